//! Per-round tables: the fine-tuning ledger with diversity scores, and the
//! import counts.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use teachhub_core::datastore::{ImportSummary, RoundLedger};
use teachhub_core::diversity::normalize_scores;

/// Placeholder shown for a round without a diversity score.
pub const UNSCORED: &str = "—";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub round: u32,
    pub newly_collected: u32,
    pub overall_collected: u32,
    pub norm_hades: Option<f64>,
    pub raw_hades: Option<f64>,
    pub model_version: Option<String>,
}

/// One row per successful round. `raw` overrides the ledger's stored scores
/// (rounds missing from it count as unscored). Normalization runs over the
/// scored rounds only.
pub fn report_rows(ledger: &RoundLedger, raw: Option<&BTreeMap<u32, f64>>) -> Vec<ReportRow> {
    let raws: Vec<Option<f64>> = ledger
        .rounds
        .iter()
        .map(|r| match raw {
            Some(table) => table.get(&r.round).copied(),
            None => r.raw_hades,
        })
        .collect();
    let scored: Vec<f64> = raws.iter().flatten().copied().collect();
    let mut norms = normalize_scores(&scored).into_iter();
    ledger
        .rounds
        .iter()
        .zip(raws)
        .map(|(r, raw)| ReportRow {
            round: r.round,
            newly_collected: r.newly_collected,
            overall_collected: r.overall_collected,
            norm_hades: raw.and_then(|_| norms.next()),
            raw_hades: raw,
            model_version: r.produced_model.clone(),
        })
        .collect()
}

/// Exact zero and one print bare, everything else with four decimals.
pub fn format_score(value: Option<f64>) -> String {
    match value {
        None => UNSCORED.to_string(),
        Some(0.0) => "0".to_string(),
        Some(1.0) => "1".to_string(),
        Some(v) => format!("{v:.4}"),
    }
}

fn render(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = header.iter().map(|h| h.chars().count()).collect();
    for row in rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.chars().count());
        }
    }
    let mut out = String::new();
    let mut line = |cells: &mut dyn Iterator<Item = &str>| {
        let parts: Vec<String> = cells
            .zip(&widths)
            .map(|(c, w)| format!("{c}{}", " ".repeat(w - c.chars().count())))
            .collect();
        let _ = writeln!(out, "{}", parts.join(" | ").trim_end());
    };
    line(&mut header.iter().copied());
    for row in rows {
        line(&mut row.iter().map(String::as_str));
    }
    out
}

pub fn render_report(rows: &[ReportRow]) -> String {
    let cells: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.round.to_string(),
                r.newly_collected.to_string(),
                r.overall_collected.to_string(),
                format_score(r.norm_hades),
                format_score(r.raw_hades),
                r.model_version.clone().unwrap_or_else(|| UNSCORED.to_string()),
            ]
        })
        .collect();
    render(&["Round", "Newly", "Overall", "norm-HaDES", "raw-HaDES", "model"], &cells)
}

/// Counts as `#images | #<class> ...`, one column per class.
pub fn render_import(summary: &ImportSummary) -> String {
    let mut header = vec!["#images".to_string(), "#with-boxes".to_string()];
    header.extend(summary.boxes_per_class.iter().map(|(name, _)| format!("#{name}")));
    let mut row = vec![summary.images.to_string(), summary.images_with_boxes.to_string()];
    row.extend(summary.boxes_per_class.iter().map(|(_, n)| n.to_string()));
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    render(&header, &[row])
}

/// Parses a rendered report back into rows (unscored cells become `None`).
pub fn parse_report(text: &str) -> Result<Vec<ReportRow>, String> {
    let score = |cell: &str| -> Result<Option<f64>, String> {
        if cell == UNSCORED {
            Ok(None)
        } else {
            cell.parse().map(Some).map_err(|e| format!("bad score `{cell}`: {e}"))
        }
    };
    text.lines()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .map(|line| {
            let cells: Vec<&str> = line.split('|').map(str::trim).collect();
            let [round, newly, overall, norm, raw, model] = cells[..] else {
                return Err(format!("expected 6 columns in `{line}`"));
            };
            let int = |c: &str| c.parse::<u32>().map_err(|e| format!("bad count `{c}`: {e}"));
            Ok(ReportRow {
                round: int(round)?,
                newly_collected: int(newly)?,
                overall_collected: int(overall)?,
                norm_hades: score(norm)?,
                raw_hades: score(raw)?,
                model_version: (model != UNSCORED).then(|| model.to_string()),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use teachhub_core::datastore::{RoundRecord, TrainerOutcome};

    fn ledger(batches: &[(u32, Option<f64>)]) -> RoundLedger {
        let mut ledger = RoundLedger::default();
        let mut overall = 0;
        for (i, (n, raw)) in batches.iter().enumerate() {
            overall += n;
            ledger.rounds.push(RoundRecord {
                round: i as u32 + 1,
                newly_collected: *n,
                overall_collected: overall,
                raw_hades: *raw,
                trainer_outcome: TrainerOutcome::Success,
                started_at: 0,
                finished_at: 0,
                produced_model: Some(format!("v{}", i + 1)),
            });
        }
        ledger
    }

    #[test]
    fn two_rounds_normalize_to_ends() {
        let rows = report_rows(&ledger(&[(9, Some(0.4)), (11, Some(0.8))]), None);
        assert_eq!(rows[0].norm_hades, Some(0.0));
        assert_eq!(rows[1].norm_hades, Some(1.0));
    }

    #[test]
    fn unscored_rounds_show_a_dash_and_skip_normalization() {
        let rows = report_rows(&ledger(&[(9, Some(0.4)), (11, None), (10, Some(0.6))]), None);
        assert_eq!(rows[1].norm_hades, None);
        assert_eq!(rows[2].norm_hades, Some(1.0));
        let text = render_report(&rows);
        assert!(text.lines().nth(2).unwrap().contains("| —"), "{text}");
        assert_eq!(parse_report(&text).unwrap(), rows.iter().map(|r| ReportRow {
            raw_hades: r.raw_hades.map(|v| format_score(Some(v)).parse().unwrap()),
            ..r.clone()
        }).collect::<Vec<_>>());
    }

    #[test]
    fn empty_ledger_prints_header_only() {
        let text = render_report(&report_rows(&RoundLedger::default(), None));
        assert_eq!(text.lines().count(), 1);
        assert!(text.starts_with("Round | Newly | Overall"));
    }

    #[test]
    fn zero_prints_bare() {
        assert_eq!(format_score(Some(0.0)), "0");
        assert_eq!(format_score(Some(0.123456)), "0.1235");
    }
}

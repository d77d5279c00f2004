//! Reference implementations written straight from the formulas. They share
//! no code with the library and work on plain tuples and vectors.
#![allow(dead_code)]

use std::collections::BTreeMap;

use rand::Rng;

pub fn entropy(counts: &[usize]) -> f64 {
    let total: usize = counts.iter().sum();
    if total == 0 {
        return 0.0;
    }
    let mut h = 0.0;
    for &c in counts {
        if c > 0 {
            let p = c as f64 / total as f64;
            h -= p * p.ln();
        }
    }
    h
}

/// Mean over dimensions of the entropy of a `k`-bin equal-width histogram.
pub fn feature_entropy(vectors: &[Vec<f64>], k: usize) -> f64 {
    let d = vectors[0].len();
    let mut sum = 0.0;
    for j in 0..d {
        let column: Vec<f64> = vectors.iter().map(|v| v[j]).collect();
        let lo = column.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = column.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if lo == hi {
            continue;
        }
        let mut counts = vec![0; k];
        for v in column {
            let i = ((v - lo) / (hi - lo) * k as f64).floor() as usize;
            counts[i.min(k - 1)] += 1;
        }
        sum += entropy(&counts);
    }
    sum / d as f64
}

pub fn label_entropy<S: AsRef<str>>(labels: &[S]) -> f64 {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for l in labels {
        *counts.entry(l.as_ref()).or_default() += 1;
    }
    entropy(&counts.into_values().collect::<Vec<_>>())
}

pub fn harmonic(f: f64, l: f64) -> f64 {
    if f == 0.0 || l == 0.0 {
        0.0
    } else {
        2.0 * f * l / (f + l)
    }
}

pub fn normalize(raw: &[f64]) -> Vec<f64> {
    let lo = raw.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    raw.iter().map(|&x| if hi == lo { 0.0 } else { (x - lo) / (hi - lo) }).collect()
}

/// Feature vectors and box labels for one random sample set.
pub fn random_hades_case(rng: &mut impl Rng) -> (Vec<Vec<f64>>, Vec<String>) {
    let n = rng.random_range(1..=30);
    let d = rng.random_range(1..=6);
    // Few distinct values make empty bins, ties and constant columns likely.
    let coarse = rng.random_bool(0.3);
    let vectors = (0..n)
        .map(|_| {
            (0..d)
                .map(|_| if coarse { f64::from(rng.random_range(0..4u8)) * 0.25 } else { rng.random_range(-3.0..3.0) })
                .collect()
        })
        .collect();
    let classes = ["door", "handle", "window"];
    let c = rng.random_range(1..=3);
    let m = rng.random_range(0..=12);
    let labels = (0..m).map(|_| classes[rng.random_range(0..c)].to_string()).collect();
    (vectors, labels)
}

/// Corners `(x0, y0, x1, y1)` of a centre-size box.
pub fn corners(cx: f64, cy: f64, w: f64, h: f64) -> [f64; 4] {
    [cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0]
}

pub fn iou(a: [f64; 4], b: [f64; 4]) -> f64 {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// `(class, cx, cy, w, h)`
pub type Gt = (u32, f64, f64, f64, f64);
/// `(class, cx, cy, w, h, confidence)`
pub type Det = (u32, f64, f64, f64, f64, f64);

#[derive(Debug, Clone)]
pub struct Scene {
    pub gts: Vec<Gt>,
    pub dets: Vec<Det>,
}

/// Per-class AP (None without ground truth) and the mean over classes that
/// have ground truth. Detections are pooled over scenes, ranked by confidence
/// (ties in scene then input order), matched greedily, and the interpolated
/// precision is summed at every recall level m / total_gt.
pub fn map50(scenes: &[Scene], classes: u32) -> (Vec<Option<f64>>, f64) {
    let mut aps = Vec::new();
    for class in 0..classes {
        let total: usize = scenes.iter().map(|s| s.gts.iter().filter(|g| g.0 == class).count()).sum();
        if total == 0 {
            aps.push(None);
            continue;
        }
        let mut ranked: Vec<(usize, Det)> = Vec::new();
        for (si, s) in scenes.iter().enumerate() {
            ranked.extend(s.dets.iter().filter(|d| d.0 == class).map(|d| (si, *d)));
        }
        ranked.sort_by(|a, b| b.1 .5.partial_cmp(&a.1 .5).unwrap());
        let mut used: Vec<Vec<bool>> = scenes.iter().map(|s| vec![false; s.gts.len()]).collect();
        let mut staircase = Vec::new();
        let mut tp = 0;
        for (rank, (si, d)) in ranked.iter().enumerate() {
            let mut best: Option<(usize, f64)> = None;
            for (gi, g) in scenes[*si].gts.iter().enumerate() {
                if g.0 != class || used[*si][gi] {
                    continue;
                }
                let o = iou(corners(d.1, d.2, d.3, d.4), corners(g.1, g.2, g.3, g.4));
                if o >= 0.5 && best.is_none_or(|(_, b)| o > b) {
                    best = Some((gi, o));
                }
            }
            if let Some((gi, _)) = best {
                used[*si][gi] = true;
                tp += 1;
            }
            staircase.push((tp as f64 / total as f64, tp as f64 / (rank + 1) as f64));
        }
        let mut ap = 0.0;
        for m in 1..=total {
            let level = m as f64 / total as f64;
            let p = staircase
                .iter()
                .filter(|(r, _)| *r >= level)
                .map(|(_, p)| *p)
                .fold(0.0, f64::max);
            ap += p / total as f64;
        }
        aps.push(Some(ap));
    }
    let scored: Vec<f64> = aps.iter().flatten().copied().collect();
    let mean = if scored.is_empty() { 0.0 } else { scored.iter().sum::<f64>() / scored.len() as f64 };
    (aps, mean)
}

fn random_box(rng: &mut impl Rng) -> (f64, f64, f64, f64) {
    let w = rng.random_range(0.05..0.5);
    let h = rng.random_range(0.05..0.5);
    (rng.random_range(w / 2.0..1.0 - w / 2.0), rng.random_range(h / 2.0..1.0 - h / 2.0), w, h)
}

/// One scene with at most 5 ground-truth boxes and 8 detections over two
/// classes. Most detections are jittered copies of ground truth.
pub fn random_scene(rng: &mut impl Rng) -> Scene {
    let gts: Vec<Gt> = (0..rng.random_range(0..=5))
        .map(|_| {
            let (cx, cy, w, h) = random_box(rng);
            (rng.random_range(0..2), cx, cy, w, h)
        })
        .collect();
    let coarse = rng.random_bool(0.3);
    let dets = (0..rng.random_range(0..=8))
        .map(|_| {
            let conf = if coarse { f64::from(rng.random_range(0..=4u8)) / 4.0 } else { rng.random_range(0.0..=1.0) };
            if !gts.is_empty() && rng.random_bool(0.7) {
                let g = gts[rng.random_range(0..gts.len())];
                let s = rng.random_range(0.0..0.2);
                let class = if rng.random_bool(0.9) { g.0 } else { 1 - g.0 };
                let w = (g.3 * (1.0 + rng.random_range(-s..s))).clamp(0.01, 1.0);
                let h = (g.4 * (1.0 + rng.random_range(-s..s))).clamp(0.01, 1.0);
                let cx = (g.1 + rng.random_range(-s..s) * g.3).clamp(w / 2.0, 1.0 - w / 2.0);
                let cy = (g.2 + rng.random_range(-s..s) * g.4).clamp(h / 2.0, 1.0 - h / 2.0);
                (class, cx, cy, w, h, conf)
            } else {
                let (cx, cy, w, h) = random_box(rng);
                (rng.random_range(0..2), cx, cy, w, h, conf)
            }
        })
        .collect();
    Scene { gts, dets }
}

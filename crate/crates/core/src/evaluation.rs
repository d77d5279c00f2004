//! Detection evaluation: IoU, greedy matching, precision-recall curves and
//! mean average precision at an IoU threshold (mAP50 by default).

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotations::{ClassMap, Detection, NormalizedBox, PixelBox};

/// IoU threshold of mAP50.
pub const MAP50_IOU: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvalError {
    #[error("cannot compare a normalized box with a pixel box")]
    MixedCoordinateKinds,
    #[error("prediction scene `{0}` has no ground truth")]
    UnknownSceneId(String),
    #[error("ground-truth scene `{0}` appears twice")]
    DuplicateSceneId(String),
    #[error("IoU threshold {0} is outside (0, 1]")]
    InvalidThreshold(f64),
    #[error("confidence {confidence} in scene `{scene}` is outside [0, 1]")]
    InvalidConfidence { scene: String, confidence: f64 },
}

/// Axis-aligned rectangle in some coordinate frame.
pub trait Rect {
    /// `(x_min, y_min, x_max, y_max)`
    fn corners(&self) -> (f64, f64, f64, f64);
}

impl Rect for NormalizedBox {
    fn corners(&self) -> (f64, f64, f64, f64) {
        (self.x_min(), self.y_min(), self.x_max(), self.y_max())
    }
}

impl Rect for PixelBox {
    fn corners(&self) -> (f64, f64, f64, f64) {
        (self.x_min, self.y_min, self.x_max, self.y_max)
    }
}

/// Intersection over union; 0 for disjoint or empty boxes.
pub fn iou<R: Rect>(a: &R, b: &R) -> f64 {
    let (ax0, ay0, ax1, ay1) = a.corners();
    let (bx0, by0, bx1, by1) = b.corners();
    let iw = (ax1.min(bx1) - ax0.max(bx0)).max(0.0);
    let ih = (ay1.min(by1) - ay0.max(by0)).max(0.0);
    let inter = iw * ih;
    let union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter;
    if inter <= 0.0 || union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// A box whose coordinate kind is only known at runtime.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AnyBox {
    Normalized(NormalizedBox),
    Pixel(PixelBox),
}

pub fn iou_any(a: &AnyBox, b: &AnyBox) -> Result<f64, EvalError> {
    match (a, b) {
        (AnyBox::Normalized(a), AnyBox::Normalized(b)) => Ok(iou(a, b)),
        (AnyBox::Pixel(a), AnyBox::Pixel(b)) => Ok(iou(a, b)),
        _ => Err(EvalError::MixedCoordinateKinds),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthScene {
    pub sample_id: String,
    pub boxes: Vec<NormalizedBox>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectionScene {
    pub sample_id: String,
    pub detections: Vec<Detection>,
}

/// Outcome of one detection after matching.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchFlag {
    pub confidence: f64,
    pub true_positive: bool,
    /// Index of the detection in the input slice.
    pub detection: usize,
    /// Index of the ground truth it claimed, if any.
    pub ground_truth: Option<usize>,
}

/// Greedy matching for one class. Detections of `class_id` are visited by
/// descending confidence (stable on ties); each claims the unmatched ground
/// truth of the same class with the highest IoU, provided IoU ≥ `threshold`.
/// The returned flags are in visiting order.
pub fn match_greedy(dets: &[Detection], gts: &[NormalizedBox], class_id: u32, threshold: f64) -> Vec<MatchFlag> {
    let mut order: Vec<usize> = (0..dets.len()).filter(|&i| dets[i].bbox.class_id == class_id).collect();
    order.sort_by(|&a, &b| dets[b].confidence.total_cmp(&dets[a].confidence));

    let mut taken = vec![false; gts.len()];
    order
        .into_iter()
        .map(|di| {
            let det = &dets[di];
            let mut best: Option<(usize, f64)> = None;
            for (gi, gt) in gts.iter().enumerate() {
                if taken[gi] || gt.class_id != class_id {
                    continue;
                }
                let overlap = iou(&det.bbox, gt);
                if overlap >= threshold && best.is_none_or(|(_, b)| overlap > b) {
                    best = Some((gi, overlap));
                }
            }
            if let Some((gi, _)) = best {
                taken[gi] = true;
            }
            MatchFlag {
                confidence: det.confidence,
                true_positive: best.is_some(),
                detection: di,
                ground_truth: best.map(|(gi, _)| gi),
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub recall: f64,
    pub precision: f64,
}

/// Cumulative precision/recall after each detection, by descending confidence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrCurve {
    pub points: Vec<PrPoint>,
    pub total_gt: usize,
}

impl PrCurve {
    pub fn from_flags(flags: &[MatchFlag], total_gt: usize) -> Self {
        let mut sorted: Vec<&MatchFlag> = flags.iter().collect();
        sorted.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
        let mut tp = 0usize;
        let points = sorted
            .iter()
            .enumerate()
            .map(|(i, f)| {
                tp += usize::from(f.true_positive);
                PrPoint {
                    recall: if total_gt == 0 { 0.0 } else { tp as f64 / total_gt as f64 },
                    precision: tp as f64 / (i + 1) as f64,
                }
            })
            .collect();
        Self { points, total_gt }
    }

    /// All-point interpolated area under the curve.
    pub fn average_precision(&self) -> f64 {
        if self.total_gt == 0 || self.points.is_empty() {
            return 0.0;
        }
        // running max from the right is the interpolated precision
        let mut envelope: Vec<f64> = self.points.iter().map(|p| p.precision).collect();
        for i in (0..envelope.len().saturating_sub(1)).rev() {
            envelope[i] = envelope[i].max(envelope[i + 1]);
        }
        let mut prev_recall = 0.0;
        let mut ap = 0.0;
        for (p, interp) in self.points.iter().zip(envelope) {
            ap += (p.recall - prev_recall) * interp;
            prev_recall = p.recall;
        }
        ap.clamp(0.0, 1.0)
    }
}

pub fn average_precision(flags: &[MatchFlag], total_gt: usize) -> f64 {
    PrCurve::from_flags(flags, total_gt).average_precision()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassAp {
    pub class_id: u32,
    pub class_name: String,
    pub gt_count: usize,
    pub detections: usize,
    /// `None` when the class has no ground truth.
    pub ap: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApResult {
    pub per_class: Vec<ClassAp>,
    /// Mean over classes that have ground truth; 0 when none do.
    pub mean: f64,
    pub iou_threshold: f64,
}

impl ApResult {
    pub fn class(&self, name: &str) -> Option<&ClassAp> {
        self.per_class.iter().find(|c| c.class_name == name)
    }

    /// `all 73.2 | door 82.4 | handle 64.1`
    pub fn summary_line(&self) -> String {
        let mut parts = vec![format!("all {}", format_percent(self.mean))];
        for c in &self.per_class {
            let value = c.ap.map_or_else(|| "—".to_string(), format_percent);
            parts.push(format!("{} {}", c.class_name, value));
        }
        parts.join(" | ")
    }
}

/// Fraction as a percentage with one decimal, e.g. `0.7325 -> "73.2"`.
pub fn format_percent(fraction: f64) -> String {
    format!("{:.1}", fraction * 100.0)
}

/// Mean of per-class APs over classes that have ground truth.
pub fn class_mean(per_class: &[ClassAp]) -> f64 {
    let scored: Vec<f64> = per_class.iter().filter_map(|c| c.ap).collect();
    if scored.is_empty() {
        0.0
    } else {
        scored.iter().sum::<f64>() / scored.len() as f64
    }
}

pub fn map50(
    preds: &[DetectionScene],
    gts: &[GroundTruthScene],
    class_map: &ClassMap,
) -> Result<ApResult, EvalError> {
    map_at(preds, gts, class_map, MAP50_IOU)
}

/// Mean AP at `threshold`. Matching happens within each scene; detections are
/// then pooled per class across scenes (ground-truth scene order breaks
/// confidence ties).
pub fn map_at(
    preds: &[DetectionScene],
    gts: &[GroundTruthScene],
    class_map: &ClassMap,
    threshold: f64,
) -> Result<ApResult, EvalError> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(EvalError::InvalidThreshold(threshold));
    }
    let mut index: BTreeMap<&str, usize> = BTreeMap::new();
    for (i, scene) in gts.iter().enumerate() {
        if index.insert(scene.sample_id.as_str(), i).is_some() {
            return Err(EvalError::DuplicateSceneId(scene.sample_id.clone()));
        }
    }
    let mut dets_by_scene: Vec<Vec<Detection>> = vec![Vec::new(); gts.len()];
    for scene in preds {
        let &i = index
            .get(scene.sample_id.as_str())
            .ok_or_else(|| EvalError::UnknownSceneId(scene.sample_id.clone()))?;
        for d in &scene.detections {
            if !(0.0..=1.0).contains(&d.confidence) {
                return Err(EvalError::InvalidConfidence {
                    scene: scene.sample_id.clone(),
                    confidence: d.confidence,
                });
            }
        }
        dets_by_scene[i].extend(scene.detections.iter().cloned());
    }

    let per_class: Vec<ClassAp> = class_map
        .iter()
        .map(|(class_id, name)| {
            let mut pooled = Vec::new();
            let mut gt_count = 0;
            for (scene, dets) in gts.iter().zip(&dets_by_scene) {
                gt_count += scene.boxes.iter().filter(|b| b.class_id == class_id).count();
                pooled.extend(match_greedy(dets, &scene.boxes, class_id, threshold));
            }
            ClassAp {
                class_id,
                class_name: name.to_string(),
                gt_count,
                detections: pooled.len(),
                ap: (gt_count > 0).then(|| average_precision(&pooled, gt_count)),
            }
        })
        .collect();
    let mean = class_mean(&per_class);
    Ok(ApResult { per_class, mean, iou_threshold: threshold })
}

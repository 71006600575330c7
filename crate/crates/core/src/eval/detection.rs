//! Box overlap, greedy detection matching and average precision.

use serde::{Deserialize, Serialize};

use super::EvalError;
use crate::protocol::BoundingBox;

pub const DEFAULT_IOU_THRESHOLD: f64 = 0.5;

/// How the precision-recall curve is integrated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Interpolation {
    /// Area under the monotone precision envelope at every recall step.
    AllPoints,
    /// Mean of the envelope sampled at recall 0.0, 0.1, ..., 1.0.
    ElevenPoint,
}

pub const AP_INTERPOLATION: Interpolation = Interpolation::AllPoints;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredBox {
    #[serde(flatten)]
    pub bbox: BoundingBox,
    #[serde(rename = "conf")]
    pub confidence: f64,
}

impl ScoredBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64, confidence: f64) -> Self {
        Self {
            bbox: BoundingBox::new(x, y, w, h),
            confidence,
        }
    }
}

/// Intersection over union of two `(x, y, w, h)` boxes.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let ix = ((a.x + a.w).min(b.x + b.w) - a.x.max(b.x)).max(0.0);
    let iy = ((a.y + a.h).min(b.y + b.h) - a.y.max(b.y)).max(0.0);
    let inter = ix * iy;
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MatchResult {
    /// `(det_index, gt_index, iou)` in matching order.
    pub pairs: Vec<(usize, usize, f64)>,
    pub unmatched_dets: Vec<usize>,
    pub unmatched_gts: Vec<usize>,
}

impl MatchResult {
    pub fn gt_for(&self, det: usize) -> Option<usize> {
        self.pairs.iter().find(|p| p.0 == det).map(|p| p.1)
    }
}

/// Detection indices by descending confidence; equal confidences keep input order.
pub fn confidence_order(dets: &[ScoredBox]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].confidence.total_cmp(&dets[a].confidence));
    order
}

/// Greedy matching: the most confident detection first takes the unmatched
/// ground truth it overlaps most (lowest index on ties), if that overlap
/// reaches `iou_threshold`.
pub fn match_detections(dets: &[ScoredBox], gts: &[BoundingBox], iou_threshold: f64) -> MatchResult {
    let mut taken = vec![false; gts.len()];
    let mut result = MatchResult::default();
    for d in confidence_order(dets) {
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gts.iter().enumerate() {
            if taken[g] {
                continue;
            }
            let o = iou(&dets[d].bbox, gt);
            if o >= iou_threshold && best.map_or(true, |(_, b)| o > b) {
                best = Some((g, o));
            }
        }
        match best {
            Some((g, o)) => {
                taken[g] = true;
                result.pairs.push((d, g, o));
            }
            None => result.unmatched_dets.push(d),
        }
    }
    result.unmatched_dets.sort_unstable();
    result.unmatched_gts = (0..gts.len()).filter(|&g| !taken[g]).collect();
    result
}

/// AP from detections already ranked by confidence, labeled true/false positive.
pub fn ap_from_ranked(is_tp: &[bool], n_gt: usize, interpolation: Interpolation) -> f64 {
    if n_gt == 0 {
        return 0.0;
    }
    let mut recall = Vec::with_capacity(is_tp.len());
    let mut precision = Vec::with_capacity(is_tp.len());
    let mut tp = 0usize;
    for (k, &hit) in is_tp.iter().enumerate() {
        if hit {
            tp += 1;
        }
        recall.push(tp as f64 / n_gt as f64);
        precision.push(tp as f64 / (k + 1) as f64);
    }
    // Monotone envelope: best precision at any equal-or-higher recall.
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    match interpolation {
        Interpolation::AllPoints => {
            // Recall grows by exactly 1/n_gt at each true positive.
            let sum = crate::numeric::exact_sum(
                is_tp
                    .iter()
                    .zip(&precision)
                    .filter(|(hit, _)| **hit)
                    .map(|(_, p)| *p),
            );
            sum / n_gt as f64
        }
        Interpolation::ElevenPoint => {
            let total: f64 = (0..=10)
                .map(|t| {
                    let level = t as f64 / 10.0;
                    recall
                        .iter()
                        .position(|&r| r >= level)
                        .map_or(0.0, |k| precision[k])
                })
                .sum();
            total / 11.0
        }
    }
}

/// True/false positive label and confidence for every detection of every
/// image, ranked by confidence (ties: image order, then detection order).
pub fn ranked_labels(
    dets_by_image: &[Vec<ScoredBox>],
    gts_by_image: &[Vec<BoundingBox>],
    iou_threshold: f64,
) -> Vec<(f64, bool)> {
    let mut labeled = Vec::new();
    for (img, dets) in dets_by_image.iter().enumerate() {
        let gts = gts_by_image.get(img).map_or(&[][..], Vec::as_slice);
        let m = match_detections(dets, gts, iou_threshold);
        for (d, det) in dets.iter().enumerate() {
            labeled.push((det.confidence, img, d, m.gt_for(d).is_some()));
        }
    }
    labeled.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    labeled.into_iter().map(|(c, _, _, tp)| (c, tp)).collect()
}

/// Average precision over a set of images. `dets_by_image[i]` and
/// `gts_by_image[i]` describe the same image.
pub fn average_precision(
    dets_by_image: &[Vec<ScoredBox>],
    gts_by_image: &[Vec<BoundingBox>],
    iou_threshold: f64,
) -> Result<f64, EvalError> {
    let n_gt: usize = gts_by_image.iter().map(Vec::len).sum();
    if n_gt == 0 {
        return Err(EvalError::NoGroundTruth);
    }
    let labels: Vec<bool> = ranked_labels(dets_by_image, gts_by_image, iou_threshold)
        .into_iter()
        .map(|(_, tp)| tp)
        .collect();
    Ok(ap_from_ranked(&labels, n_gt, AP_INTERPOLATION))
}

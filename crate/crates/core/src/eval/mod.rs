//! Benchmark evaluation of the annotators themselves, stratified by
//! intersectional subgroup (age group or skin type, crossed with gender).

mod detection;
mod io;
mod stratified;

pub use detection::{
    ap_from_ranked, average_precision, confidence_order, iou, match_detections, ranked_labels, Interpolation,
    MatchResult, ScoredBox, AP_INTERPOLATION, DEFAULT_IOU_THRESHOLD,
};
pub use io::{load_labels, load_predictions, Prediction};
pub use stratified::{stratified_accuracy, stratified_ap, stratified_mae, Cell, StratifiedTable, Strata};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::protocol::{BoundingBox, Gender};

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("no ground-truth boxes to evaluate against")]
    NoGroundTruth,
    #[error("no prediction for sample {0}")]
    MissingPrediction(String),
    #[error("sample {0} has no skin type label")]
    MissingSkinType(String),
    #[error("invalid sample {image_id}: {reason}")]
    InvalidSample { image_id: String, reason: String },
    #[error("{path} line {line}: {reason}")]
    Parse { path: String, line: usize, reason: String },
    #[error("failed to read {path}: {reason}")]
    Io { path: String, reason: String },
}

/// Fitzpatrick skin type.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum SkinType {
    I,
    II,
    III,
    IV,
    V,
    VI,
}

impl SkinType {
    pub const ALL: [SkinType; 6] = [SkinType::I, SkinType::II, SkinType::III, SkinType::IV, SkinType::V, SkinType::VI];

    pub fn label(self) -> &'static str {
        ["I", "II", "III", "IV", "V", "VI"][self as usize]
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for SkinType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for SkinType {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        SkinType::ALL
            .into_iter()
            .find(|t| t.label().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| format!("unknown skin type {s:?}"))
    }
}

/// One labeled benchmark image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSample {
    pub image_id: String,
    #[serde(default)]
    pub gt_boxes: Vec<BoundingBox>,
    pub gt_age: f64,
    pub gt_gender: Gender,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_skin_type: Option<SkinType>,
}

impl EvalSample {
    pub fn validate(&self) -> Result<(), EvalError> {
        let invalid = |reason: String| EvalError::InvalidSample {
            image_id: self.image_id.clone(),
            reason,
        };
        if !(0.0..=100.0).contains(&self.gt_age) {
            return Err(invalid(format!("gt_age {} outside [0, 100]", self.gt_age)));
        }
        if let Some(b) = self.gt_boxes.iter().find(|b| !b.is_valid()) {
            return Err(invalid(format!("invalid box {b:?}")));
        }
        Ok(())
    }
}

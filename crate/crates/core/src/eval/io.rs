//! JSONL benchmark labels and predictions.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::detection::ScoredBox;
use super::{EvalError, EvalSample};
use crate::protocol::{gender_label, AgePosterior, Gender, GenderScore, GENDER_THRESHOLD};

/// Model output for one benchmark image; any subset of fields may be present.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Prediction {
    pub image_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detections: Option<Vec<ScoredBox>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expected_age: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub age_posterior: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gender_score: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gender_label: Option<Gender>,
}

impl Prediction {
    fn absorb(&mut self, other: Prediction) {
        if other.detections.is_some() {
            self.detections = other.detections;
        }
        if other.expected_age.is_some() {
            self.expected_age = other.expected_age;
        }
        if other.age_posterior.is_some() {
            self.age_posterior = other.age_posterior;
        }
        if other.gender_score.is_some() {
            self.gender_score = other.gender_score;
        }
        if other.gender_label.is_some() {
            self.gender_label = other.gender_label;
        }
    }

    /// Point age estimate: explicit value, else the posterior's expectation.
    pub fn age(&self) -> Result<Option<f64>, String> {
        if let Some(a) = self.expected_age {
            return Ok(Some(a));
        }
        match &self.age_posterior {
            Some(p) => AgePosterior::new(p.clone())
                .map(|p| Some(p.expected_age()))
                .map_err(|e| e.to_string()),
            None => Ok(None),
        }
    }

    /// Binary label: explicit, else thresholded score.
    pub fn gender(&self) -> Result<Option<Gender>, String> {
        if let Some(g) = self.gender_label {
            return Ok(Some(g));
        }
        match self.gender_score {
            Some(s) => GenderScore::new(s)
                .map(|s| Some(gender_label(s, GENDER_THRESHOLD)))
                .map_err(|e| e.to_string()),
            None => Ok(None),
        }
    }
}

fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>, EvalError> {
    let display = path.display().to_string();
    let text = fs::read_to_string(path).map_err(|e| EvalError::Io {
        path: display.clone(),
        reason: e.to_string(),
    })?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(line).map_err(|e| EvalError::Parse {
            path: display.clone(),
            line: i + 1,
            reason: e.to_string(),
        })?);
    }
    Ok(out)
}

pub fn load_labels(path: &Path) -> Result<Vec<EvalSample>, EvalError> {
    let samples: Vec<EvalSample> = read_jsonl(path)?;
    for s in &samples {
        s.validate()?;
    }
    Ok(samples)
}

/// Load and merge prediction files; for a repeated image, later files
/// override the fields they set.
pub fn load_predictions<P: AsRef<Path>>(paths: &[P]) -> Result<BTreeMap<String, Prediction>, EvalError> {
    let mut merged: BTreeMap<String, Prediction> = BTreeMap::new();
    for p in paths {
        for pred in read_jsonl::<Prediction>(p.as_ref())? {
            match merged.get_mut(&pred.image_id) {
                Some(existing) => existing.absorb(pred),
                None => {
                    merged.insert(pred.image_id.clone(), pred);
                }
            }
        }
    }
    Ok(merged)
}

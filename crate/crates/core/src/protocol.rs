//! Annotator contract and the pure post-processing around it: expected age
//! from a 101-bin posterior, gender thresholding, age binning and the
//! detection confidence gate.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::manifest::ImageRecord;
use crate::numeric::ExactSum;

/// Number of age bins; bin `i` is age `i` years.
pub const AGE_BINS: usize = 101;
/// Allowed deviation of a posterior's total mass from 1.
pub const POSTERIOR_SUM_TOLERANCE: f64 = 1e-6;
/// Gender scores at or above this are labeled female.
pub const GENDER_THRESHOLD: f64 = 0.5;
/// Detections below this confidence never reach annotation.
pub const DEFAULT_MIN_CONFIDENCE: f64 = 0.9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProtocolError {
    #[error("invalid age posterior: {0}")]
    InvalidPosterior(String),
    #[error("age {0} outside [0, 100]")]
    AgeOutOfRange(f64),
    #[error("gender score {0} outside [0, 1]")]
    InvalidScore(f64),
    #[error("invalid detection: {0}")]
    InvalidDetection(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BoundingBox {
    pub const fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        Self { x, y, w, h }
    }

    pub fn is_valid(&self) -> bool {
        self.w > 0.0 && self.h > 0.0 && self.x.is_finite() && self.y.is_finite() && self.w.is_finite() && self.h.is_finite()
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaceDetection {
    pub image_id: String,
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    pub confidence: f64,
}

impl FaceDetection {
    pub fn new(image_id: impl Into<String>, bbox: BoundingBox, confidence: f64) -> Result<Self, ProtocolError> {
        let det = Self {
            image_id: image_id.into(),
            bbox,
            confidence,
        };
        det.validate()?;
        Ok(det)
    }

    pub fn validate(&self) -> Result<(), ProtocolError> {
        if !self.bbox.is_valid() {
            return Err(ProtocolError::InvalidDetection(format!(
                "box must have positive width and height, got {:?}",
                self.bbox
            )));
        }
        if !(0.0..=1.0).contains(&self.confidence) {
            return Err(ProtocolError::InvalidDetection(format!(
                "confidence {} outside [0, 1]",
                self.confidence
            )));
        }
        Ok(())
    }
}

/// Softmax output over ages 0..=100.
#[derive(Debug, Clone, PartialEq)]
pub struct AgePosterior(Vec<f64>);

impl AgePosterior {
    pub fn new(probs: Vec<f64>) -> Result<Self, ProtocolError> {
        if probs.len() != AGE_BINS {
            return Err(ProtocolError::InvalidPosterior(format!(
                "expected {AGE_BINS} bins, got {}",
                probs.len()
            )));
        }
        if let Some((i, p)) = probs.iter().enumerate().find(|(_, p)| !(**p >= 0.0) || !p.is_finite()) {
            return Err(ProtocolError::InvalidPosterior(format!("bin {i} has invalid mass {p}")));
        }
        let total = crate::numeric::exact_sum(probs.iter().copied());
        if (total - 1.0).abs() > POSTERIOR_SUM_TOLERANCE {
            return Err(ProtocolError::InvalidPosterior(format!("mass sums to {total}")));
        }
        Ok(Self(probs))
    }

    pub fn one_hot(age: usize) -> Self {
        let mut probs = vec![0.0; AGE_BINS];
        probs[age.min(AGE_BINS - 1)] = 1.0;
        Self(probs)
    }

    pub fn uniform() -> Self {
        Self(vec![1.0 / AGE_BINS as f64; AGE_BINS])
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn expected_age(&self) -> f64 {
        expected_age(self)
    }
}

/// Expectation of the age posterior, `sum(i * p[i])`, correctly rounded.
pub fn expected_age(posterior: &AgePosterior) -> f64 {
    let mut acc = ExactSum::new();
    for (age, &p) in posterior.0.iter().enumerate() {
        acc.add_product(age as f64, p);
    }
    acc.value().clamp(0.0, (AGE_BINS - 1) as f64)
}

/// Continuous gender output; higher means more likely labeled female.
/// Treated as an uncalibrated score, not a probability.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct GenderScore(f64);

impl GenderScore {
    pub fn new(score: f64) -> Result<Self, ProtocolError> {
        if (0.0..=1.0).contains(&score) {
            Ok(Self(score))
        } else {
            Err(ProtocolError::InvalidScore(score))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

impl TryFrom<f64> for GenderScore {
    type Error = ProtocolError;
    fn try_from(v: f64) -> Result<Self, Self::Error> {
        Self::new(v)
    }
}

impl From<GenderScore> for f64 {
    fn from(s: GenderScore) -> f64 {
        s.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Gender {
    Male,
    Female,
}

impl Gender {
    pub const ALL: [Gender; 2] = [Gender::Male, Gender::Female];

    pub fn as_str(self) -> &'static str {
        match self {
            Gender::Male => "male",
            Gender::Female => "female",
        }
    }

    pub fn title(self) -> &'static str {
        match self {
            Gender::Male => "Male",
            Gender::Female => "Female",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Gender {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Gender {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "male" | "m" => Ok(Gender::Male),
            "female" | "f" => Ok(Gender::Female),
            other => Err(format!("unknown gender label {other:?}")),
        }
    }
}

/// Binary label from a gender score. A score exactly at the threshold is female.
pub fn gender_label(score: GenderScore, threshold: f64) -> Gender {
    if score.0 >= threshold {
        Gender::Female
    } else {
        Gender::Male
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum AgeGroup {
    #[serde(rename = "0-14")]
    Child,
    #[serde(rename = "15-29")]
    Young,
    #[serde(rename = "30-44")]
    Adult,
    #[serde(rename = "45-59")]
    Middle,
    #[serde(rename = "60+")]
    Senior,
}

impl AgeGroup {
    pub const ALL: [AgeGroup; 5] = [
        AgeGroup::Child,
        AgeGroup::Young,
        AgeGroup::Adult,
        AgeGroup::Middle,
        AgeGroup::Senior,
    ];

    pub fn label(self) -> &'static str {
        match self {
            AgeGroup::Child => "0-14",
            AgeGroup::Young => "15-29",
            AgeGroup::Adult => "30-44",
            AgeGroup::Middle => "45-59",
            AgeGroup::Senior => "60+",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for AgeGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// Bin an age by its floor into 0-14, 15-29, 30-44, 45-59, 60+.
pub fn age_group(age: f64) -> Result<AgeGroup, ProtocolError> {
    if !(0.0..=100.0).contains(&age) {
        return Err(ProtocolError::AgeOutOfRange(age));
    }
    Ok(match age.floor() as u32 {
        0..=14 => AgeGroup::Child,
        15..=29 => AgeGroup::Young,
        30..=44 => AgeGroup::Adult,
        45..=59 => AgeGroup::Middle,
        _ => AgeGroup::Senior,
    })
}

/// Keep detections with confidence at or above `min_conf`, preserving order.
pub fn gate_detections(dets: &[FaceDetection], min_conf: f64) -> Vec<FaceDetection> {
    dets.iter().filter(|d| d.confidence >= min_conf).cloned().collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaceAnnotation {
    pub detection: FaceDetection,
    pub expected_age: f64,
    pub age_group: AgeGroup,
    pub gender_score: GenderScore,
    pub gender_label: Gender,
    pub annotator_version: String,
}

impl FaceAnnotation {
    pub fn from_posterior(
        detection: FaceDetection,
        posterior: &AgePosterior,
        gender_score: GenderScore,
        annotator_version: impl Into<String>,
    ) -> Self {
        Self::from_parts(detection, expected_age(posterior), gender_score, annotator_version)
            .expect("expected_age of a valid posterior lies in [0, 100]")
    }

    pub fn from_parts(
        detection: FaceDetection,
        expected_age: f64,
        gender_score: GenderScore,
        annotator_version: impl Into<String>,
    ) -> Result<Self, ProtocolError> {
        Ok(Self {
            detection,
            expected_age,
            age_group: age_group(expected_age)?,
            gender_score,
            gender_label: gender_label(gender_score, GENDER_THRESHOLD),
            annotator_version: annotator_version.into(),
        })
    }
}

#[derive(Debug, Error)]
pub enum AnnotatorError {
    #[error("annotator unavailable: {0}")]
    Unavailable(String),
    #[error("annotation failed for {image_id}: {message}")]
    Image { image_id: String, message: String },
    #[error("annotator protocol violation: {0}")]
    Protocol(String),
    #[error(transparent)]
    Invalid(#[from] ProtocolError),
}

impl AnnotatorError {
    /// Whether the failure is confined to one image.
    pub fn is_per_image(&self) -> bool {
        matches!(self, AnnotatorError::Image { .. } | AnnotatorError::Invalid(_))
    }
}

/// A face detection + apparent age + gender backend.
pub trait Annotator {
    fn version(&self) -> String;
    fn detect(&mut self, img: &ImageRecord) -> Result<Vec<FaceDetection>, AnnotatorError>;
    fn age(&mut self, img: &ImageRecord, det: &FaceDetection) -> Result<AgePosterior, AnnotatorError>;
    fn gender(&mut self, img: &ImageRecord, det: &FaceDetection) -> Result<GenderScore, AnnotatorError>;
}

/// Detect, gate, then annotate every surviving face of one image.
pub fn annotate_image<A: Annotator + ?Sized>(
    annotator: &mut A,
    img: &ImageRecord,
    min_conf: f64,
) -> Result<Vec<FaceAnnotation>, AnnotatorError> {
    let dets = annotator.detect(img)?;
    for d in &dets {
        d.validate()?;
    }
    let version = annotator.version();
    gate_detections(&dets, min_conf)
        .into_iter()
        .map(|det| {
            let posterior = annotator.age(img, &det)?;
            let score = annotator.gender(img, &det)?;
            Ok(FaceAnnotation::from_posterior(det, &posterior, score, version.clone()))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn det(conf: f64) -> FaceDetection {
        FaceDetection::new("img", BoundingBox::new(0.0, 0.0, 10.0, 10.0), conf).unwrap()
    }

    #[test]
    fn expected_age_examples() {
        assert_eq!(expected_age(&AgePosterior::uniform()), 50.0);
        assert_eq!(expected_age(&AgePosterior::one_hot(23)), 23.0);
        let mut probs = vec![0.0; AGE_BINS];
        probs[20] = 0.5;
        probs[30] = 0.5;
        assert_eq!(expected_age(&AgePosterior::new(probs).unwrap()), 25.0);
    }

    #[test]
    fn posterior_validation() {
        assert!(AgePosterior::new(vec![1.0 / 100.0; 100]).is_err());
        let mut neg = vec![0.0; AGE_BINS];
        neg[0] = 1.5;
        neg[1] = -0.5;
        assert!(AgePosterior::new(neg).is_err());
        let mut short = vec![0.0; AGE_BINS];
        short[0] = 0.99;
        assert!(AgePosterior::new(short).is_err());
        let mut close = vec![0.0; AGE_BINS];
        close[0] = 1.0 - 5e-7;
        assert!(AgePosterior::new(close).is_ok());
        let mut nan = vec![0.0; AGE_BINS];
        nan[0] = f64::NAN;
        assert!(AgePosterior::new(nan).is_err());
    }

    #[test]
    fn gender_examples() {
        let label = |s| gender_label(GenderScore::new(s).unwrap(), GENDER_THRESHOLD);
        assert_eq!(label(0.74), Gender::Female);
        assert_eq!(label(0.50), Gender::Female);
        assert_eq!(label(0.12), Gender::Male);
        assert!(GenderScore::new(1.01).is_err());
    }

    #[test]
    fn age_group_examples() {
        assert_eq!(age_group(0.0).unwrap(), AgeGroup::Child);
        assert_eq!(age_group(29.99).unwrap(), AgeGroup::Young);
        assert_eq!(age_group(60.0).unwrap(), AgeGroup::Senior);
        assert_eq!(age_group(100.0).unwrap(), AgeGroup::Senior);
        assert!(age_group(-0.1).is_err());
        assert!(age_group(100.5).is_err());
        assert!(age_group(f64::NAN).is_err());
    }

    #[test]
    fn age_group_boundaries_agree_within_integer() {
        for a in 0..100 {
            let a = a as f64;
            assert_eq!(age_group(a).unwrap(), age_group(a + 0.999).unwrap());
        }
        assert_eq!(age_group(14.999).unwrap(), AgeGroup::Child);
        assert_eq!(age_group(15.0).unwrap(), AgeGroup::Young);
        assert_eq!(age_group(59.999).unwrap(), AgeGroup::Middle);
    }

    #[test]
    fn gate_examples() {
        let dets = [det(0.95), det(0.89), det(0.90)];
        let kept = gate_detections(&dets, DEFAULT_MIN_CONFIDENCE);
        assert_eq!(kept, vec![dets[0].clone(), dets[2].clone()]);
        assert!(gate_detections(&[], 0.9).is_empty());
        assert_eq!(gate_detections(&dets, 0.0), dets.to_vec());
    }

    #[test]
    fn detection_validation() {
        assert!(FaceDetection::new("i", BoundingBox::new(0.0, 0.0, 0.0, 1.0), 0.5).is_err());
        assert!(FaceDetection::new("i", BoundingBox::new(0.0, 0.0, 1.0, 1.0), 1.2).is_err());
    }

    fn posterior() -> impl Strategy<Value = AgePosterior> {
        prop::collection::vec(0.0f64..1.0, AGE_BINS).prop_filter_map("zero mass", |w| {
            let total: f64 = w.iter().sum();
            (total > 0.0).then(|| {
                let probs: Vec<f64> = w.iter().map(|x| x / total).collect();
                AgePosterior::new(probs).ok()
            })?
        })
    }

    proptest! {
        #[test]
        fn expected_age_is_linear(p in posterior(), q in posterior(), alpha in 0.0f64..=1.0) {
            let mix: Vec<f64> = p.probs().iter().zip(q.probs()).map(|(a, b)| alpha * a + (1.0 - alpha) * b).collect();
            let mix = AgePosterior::new(mix).unwrap();
            let lhs = expected_age(&mix);
            let rhs = alpha * expected_age(&p) + (1.0 - alpha) * expected_age(&q);
            prop_assert!((lhs - rhs).abs() < 1e-9, "{lhs} vs {rhs}");
            prop_assert!((0.0..=100.0).contains(&lhs));
        }

        #[test]
        fn gender_label_monotone(a in 0.0f64..=1.0, b in 0.0f64..=1.0) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let l = gender_label(GenderScore::new(lo).unwrap(), GENDER_THRESHOLD);
            let h = gender_label(GenderScore::new(hi).unwrap(), GENDER_THRESHOLD);
            prop_assert!(l <= h);
        }

        #[test]
        fn gate_is_order_preserving_subsequence(confs in prop::collection::vec(0.0f64..=1.0, 0..20), min in 0.0f64..=1.0) {
            let dets: Vec<FaceDetection> = confs.iter().map(|&c| det(c)).collect();
            let kept = gate_detections(&dets, min);
            let mut it = dets.iter();
            for k in &kept {
                prop_assert!(k.confidence >= min);
                prop_assert!(it.any(|d| d == k));
            }
            prop_assert_eq!(kept.len(), confs.iter().filter(|&&c| c >= min).count());
        }
    }
}

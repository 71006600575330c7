//! Deterministic weightless annotator for tests and dry runs.
//!
//! Every value is derived from `(image_id, seed)` using only integer hashing
//! and IEEE basic arithmetic, so output is bit-identical across platforms:
//!
//! * state = FNV-1a-64(image_id) XOR (seed * 0x9E3779B97F4A7C15), then a
//!   SplitMix64 stream.
//! * unit draw = (next >> 11) * 2^-53.
//! * face count = next % 4; per face: x = 400u, y = 300u, w = 20 + 180u,
//!   h = 20 + 180u, confidence = 0.8 + 0.2u, all rounded to 6 decimals.
//! * age posterior: triangular weights `max(0, k - |i - c|)` with centre
//!   c = next % 101 and half-width k = 1 + next % 10, normalized.
//! * gender score = u rounded to 6 decimals.

use crate::manifest::ImageRecord;
use crate::protocol::{
    AgePosterior, Annotator, AnnotatorError, BoundingBox, FaceAnnotation, FaceDetection, GenderScore, AGE_BINS,
};

pub const STUB_VERSION: &str = "stub-v1";

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;
const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(FNV_OFFSET, |h, &b| (h ^ u64::from(b)).wrapping_mul(FNV_PRIME))
}

struct SplitMix64(u64);

impl SplitMix64 {
    fn next(&mut self) -> u64 {
        self.0 = self.0.wrapping_add(GOLDEN);
        let mut z = self.0;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }

    fn unit(&mut self) -> f64 {
        (self.next() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }
}

/// Round to 6 decimal places through the decimal text form, so the value
/// survives a fixed-precision serialization round trip unchanged.
pub fn round6(x: f64) -> f64 {
    format!("{x:.6}").parse().expect("formatted float parses")
}

#[derive(Debug, Clone, PartialEq)]
pub struct StubFace {
    pub detection: FaceDetection,
    pub posterior: AgePosterior,
    pub gender: GenderScore,
}

/// All faces the stub "sees" in an image, before gating.
pub fn stub_faces(image_id: &str, seed: u64) -> Vec<StubFace> {
    let mut rng = SplitMix64(fnv1a64(image_id.as_bytes()) ^ seed.wrapping_mul(GOLDEN));
    let n = rng.next() % 4;
    (0..n)
        .map(|_| {
            let bbox = BoundingBox::new(
                round6(400.0 * rng.unit()),
                round6(300.0 * rng.unit()),
                round6(20.0 + 180.0 * rng.unit()),
                round6(20.0 + 180.0 * rng.unit()),
            );
            let confidence = round6(0.8 + 0.2 * rng.unit());
            let centre = (rng.next() % AGE_BINS as u64) as i64;
            let half_width = 1 + (rng.next() % 10) as i64;
            let weights: Vec<f64> = (0..AGE_BINS as i64)
                .map(|i| (half_width - (i - centre).abs()).max(0) as f64)
                .collect();
            let total: f64 = weights.iter().sum();
            let posterior = AgePosterior::new(weights.iter().map(|w| w / total).collect())
                .expect("triangular posterior is valid");
            let gender = GenderScore::new(round6(rng.unit())).expect("unit draw in [0, 1)");
            StubFace {
                detection: FaceDetection {
                    image_id: image_id.to_string(),
                    bbox,
                    confidence,
                },
                posterior,
                gender,
            }
        })
        .collect()
}

/// Ungated stub annotations for one image.
pub fn stub_annotate(img: &ImageRecord, seed: u64) -> Vec<FaceAnnotation> {
    stub_faces(&img.image_id, seed)
        .into_iter()
        .map(|f| FaceAnnotation::from_posterior(f.detection, &f.posterior, f.gender, STUB_VERSION))
        .collect()
}

#[derive(Debug, Clone)]
pub struct StubAnnotator {
    pub seed: u64,
}

impl StubAnnotator {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    fn face(&self, img: &ImageRecord, det: &FaceDetection) -> Result<StubFace, AnnotatorError> {
        stub_faces(&img.image_id, self.seed)
            .into_iter()
            .find(|f| f.detection.bbox == det.bbox)
            .ok_or_else(|| AnnotatorError::Image {
                image_id: img.image_id.clone(),
                message: "box was not produced by the stub detector".into(),
            })
    }
}

impl Annotator for StubAnnotator {
    fn version(&self) -> String {
        STUB_VERSION.to_string()
    }

    fn detect(&mut self, img: &ImageRecord) -> Result<Vec<FaceDetection>, AnnotatorError> {
        Ok(stub_faces(&img.image_id, self.seed)
            .into_iter()
            .map(|f| f.detection)
            .collect())
    }

    fn age(&mut self, img: &ImageRecord, det: &FaceDetection) -> Result<AgePosterior, AnnotatorError> {
        Ok(self.face(img, det)?.posterior)
    }

    fn gender(&mut self, img: &ImageRecord, det: &FaceDetection) -> Result<GenderScore, AnnotatorError> {
        Ok(self.face(img, det)?.gender)
    }
}

//! Python bindings for the audit core.

use std::path::PathBuf;

use audit_core::aggregate::{synset_gender_ranking, AggregateState as CoreState, RankingFilters};
use audit_core::eval::{self, ScoredBox};
use audit_core::manifest::{ImageRecord, Manifest};
use audit_core::pipeline::{self, PipelineError};
use audit_core::protocol::{self, AgeGroup, AgePosterior, BoundingBox, FaceDetection, Gender, GenderScore};
use audit_core::{diversity, store, stub, AuditConfig};
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

type Box4 = (f64, f64, f64, f64);
type Det5 = (f64, f64, f64, f64, f64);

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn pipeline_err(e: PipelineError) -> PyErr {
    PyRuntimeError::new_err(format!("{}: {e}", e.kind()))
}

/// Serializable value to plain Python objects, through JSON.
fn to_py<'py, T: serde::Serialize>(py: Python<'py>, v: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(v).map_err(value_err)?;
    py.import("json")?.call_method1("loads", (text,))
}

fn bbox((x, y, w, h): Box4) -> BoundingBox {
    BoundingBox::new(x, y, w, h)
}

fn parse_age_group(s: &str) -> PyResult<AgeGroup> {
    AgeGroup::ALL
        .into_iter()
        .find(|g| g.label() == s)
        .ok_or_else(|| PyValueError::new_err(format!("unknown age group {s:?}")))
}

/// Expected age in years of a 101-bin age posterior.
#[pyfunction]
fn expected_age(posterior: Vec<f64>) -> PyResult<f64> {
    Ok(AgePosterior::new(posterior).map_err(value_err)?.expected_age())
}

/// "male" or "female" for a score read as P(female).
#[pyfunction]
#[pyo3(signature = (score, threshold = protocol::GENDER_THRESHOLD))]
fn gender_label(score: f64, threshold: f64) -> PyResult<&'static str> {
    let s = GenderScore::new(score).map_err(value_err)?;
    Ok(protocol::gender_label(s, threshold).as_str())
}

/// Age bin label ("0-14" .. "60+") of an age in years.
#[pyfunction]
fn age_group(age: f64) -> PyResult<&'static str> {
    Ok(protocol::age_group(age).map_err(value_err)?.label())
}

/// Keep detections `(x, y, w, h, conf)` with conf >= min_conf, in order.
#[pyfunction]
#[pyo3(signature = (detections, min_conf = protocol::DEFAULT_MIN_CONFIDENCE))]
fn gate_detections(detections: Vec<Det5>, min_conf: f64) -> PyResult<Vec<Det5>> {
    let dets = detections
        .into_iter()
        .map(|(x, y, w, h, c)| FaceDetection::new("", BoundingBox::new(x, y, w, h), c).map_err(value_err))
        .collect::<PyResult<Vec<_>>>()?;
    Ok(protocol::gate_detections(&dets, min_conf)
        .into_iter()
        .map(|d| (d.bbox.x, d.bbox.y, d.bbox.w, d.bbox.h, d.confidence))
        .collect())
}

/// Deterministic stub annotations (ungated) as annotation-record dicts.
#[pyfunction]
#[pyo3(signature = (image_id, synset_wnid, seed = 0, timestamp = 0))]
fn stub_annotate<'py>(
    py: Python<'py>,
    image_id: &str,
    synset_wnid: &str,
    seed: u64,
    timestamp: u64,
) -> PyResult<Bound<'py, PyAny>> {
    let img = ImageRecord::new(image_id, synset_wnid, "");
    let recs: Vec<store::AnnotationRecord> = stub::stub_annotate(&img, seed)
        .iter()
        .map(|a| store::AnnotationRecord::from_annotation(a, synset_wnid, timestamp))
        .collect();
    to_py(py, &recs)
}

/// Intersection over union of two `(x, y, w, h)` boxes.
#[pyfunction]
fn iou(a: Box4, b: Box4) -> f64 {
    eval::iou(&bbox(a), &bbox(b))
}

/// All-points AP. `detections[i]` and `ground_truth[i]` describe image i.
#[pyfunction]
#[pyo3(signature = (detections, ground_truth, iou_threshold = eval::DEFAULT_IOU_THRESHOLD))]
fn average_precision(detections: Vec<Vec<Det5>>, ground_truth: Vec<Vec<Box4>>, iou_threshold: f64) -> PyResult<f64> {
    let dets: Vec<Vec<ScoredBox>> = detections
        .into_iter()
        .map(|img| img.into_iter().map(|(x, y, w, h, c)| ScoredBox::new(x, y, w, h, c)).collect())
        .collect();
    let gts: Vec<Vec<BoundingBox>> = ground_truth
        .into_iter()
        .map(|img| img.into_iter().map(bbox).collect())
        .collect();
    eval::average_precision(&dets, &gts, iou_threshold).map_err(value_err)
}

/// Committed records of one shard file.
#[pyfunction]
#[pyo3(signature = (path, dedup = true))]
fn load_annotations<'py>(py: Python<'py>, path: PathBuf, dedup: bool) -> PyResult<Bound<'py, PyAny>> {
    let (recs, _) = store::load(&path, dedup).map_err(|e| PyIOError::new_err(e.to_string()))?;
    to_py(py, &recs)
}

/// Diversity score of one synset from image files.
#[pyfunction]
#[pyo3(signature = (wnid, paths, width = 256, height = 256))]
fn diversity_score<'py>(
    py: Python<'py>,
    wnid: &str,
    paths: Vec<PathBuf>,
    width: u32,
    height: u32,
) -> PyResult<Bound<'py, PyAny>> {
    let s = diversity::diversity_score(wnid, &paths, (width, height)).map_err(value_err)?;
    to_py(py, &s)
}

fn config(path: Option<PathBuf>, overrides: Vec<(String, String)>) -> PyResult<AuditConfig> {
    let mut cfg = match path {
        Some(p) => AuditConfig::from_file(&p).map_err(value_err)?,
        None => AuditConfig::default(),
    };
    for (k, v) in overrides {
        cfg.set(&k, &v, None).map_err(value_err)?;
    }
    cfg.validate().map_err(value_err)?;
    Ok(cfg)
}

/// Run the annotate command; settings as in the config file format.
#[pyfunction]
#[pyo3(signature = (config_path = None, overrides = Vec::new()))]
fn annotate<'py>(
    py: Python<'py>,
    config_path: Option<PathBuf>,
    overrides: Vec<(String, String)>,
) -> PyResult<Bound<'py, PyAny>> {
    let cfg = config(config_path, overrides)?;
    let summary = py.detach(|| pipeline::cmd_annotate(&cfg)).map_err(pipeline_err)?;
    to_py(py, &summary)
}

/// Run the aggregate command over the shards in the output directory.
#[pyfunction]
#[pyo3(signature = (config_path = None, overrides = Vec::new()))]
fn aggregate<'py>(
    py: Python<'py>,
    config_path: Option<PathBuf>,
    overrides: Vec<(String, String)>,
) -> PyResult<Bound<'py, PyAny>> {
    let cfg = config(config_path, overrides)?;
    let summary = py.detach(|| pipeline::cmd_aggregate(&cfg, None)).map_err(pipeline_err)?;
    to_py(py, &summary)
}

/// Face counts per (age group, gender) and per-synset tallies.
#[pyclass(name = "AggregateState", from_py_object)]
#[derive(Clone, Default)]
struct PyAggregateState(CoreState);

#[pymethods]
impl PyAggregateState {
    #[new]
    fn new() -> Self {
        Self::default()
    }

    /// State from `(image_id, wnid)` manifest pairs and shard files.
    #[staticmethod]
    #[pyo3(signature = (images, shard_paths, min_conf = protocol::DEFAULT_MIN_CONFIDENCE))]
    fn from_shards(images: Vec<(String, String)>, shard_paths: Vec<PathBuf>, min_conf: f64) -> PyResult<Self> {
        let manifest = Manifest::from_records(images.into_iter().map(|(i, w)| ImageRecord::new(i, w, "")).collect());
        let (recs, _) = store::load_many(&shard_paths, true).map_err(|e| PyIOError::new_err(e.to_string()))?;
        CoreState::from_records(&manifest, &recs, min_conf)
            .map(Self)
            .map_err(value_err)
    }

    fn merge(&self, other: &PyAggregateState) -> Self {
        Self(self.0.merge(&other.0))
    }

    /// Face count of one cell, e.g. `count("15-29", "male")`.
    fn count(&self, age_group: &str, gender: &str) -> PyResult<u64> {
        let g: Gender = gender.parse().map_err(PyValueError::new_err)?;
        Ok(self.0.count(audit_core::aggregate::SubgroupKey::new(parse_age_group(age_group)?, g)))
    }

    fn total_faces(&self) -> u64 {
        self.0.total_faces()
    }

    /// Percent table as `{row: {"Male": "x.xx", "Female": .., "All": ..}}`.
    fn top_level_table<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        let t = self.0.top_level_table().map_err(value_err)?;
        let rows: std::collections::BTreeMap<&str, std::collections::BTreeMap<&str, String>> =
            audit_core::aggregate::PercentTable::ROW_LABELS
                .iter()
                .enumerate()
                .map(|(r, label)| {
                    let cols = ["Male", "Female", "All"]
                        .iter()
                        .enumerate()
                        .map(|(c, name)| (*name, t.cell(r, c).to_string()))
                        .collect();
                    (*label, cols)
                })
                .collect();
        to_py(py, &rows)
    }

    /// `(male_ranked, female_ranked)` lists of row dicts.
    #[pyo3(signature = (min_images = 20, min_det_rate = 0.15))]
    fn ranking<'py>(&self, py: Python<'py>, min_images: u64, min_det_rate: f64) -> PyResult<Bound<'py, PyAny>> {
        let filters = RankingFilters::new(min_images, min_det_rate).map_err(PyValueError::new_err)?;
        let (male, female) = synset_gender_ranking(&self.0, None, &filters);
        let rows = |v: &[audit_core::SynsetRankRow]| {
            v.iter()
                .map(|r| {
                    serde_json::json!({
                        "wnid": r.wnid, "pct_male": r.pct_male.to_string(), "pct_female": r.pct_female.to_string(),
                        "n_faces": r.n_faces, "n_images": r.n_images, "n_detected_images": r.n_detected_images,
                    })
                })
                .collect::<Vec<_>>()
        };
        to_py(py, &(rows(&male), rows(&female)))
    }

    fn __eq__(&self, other: &PyAggregateState) -> bool {
        self.0 == other.0
    }
}

#[pymodule]
fn imagenet_audit(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(expected_age, m)?)?;
    m.add_function(wrap_pyfunction!(gender_label, m)?)?;
    m.add_function(wrap_pyfunction!(age_group, m)?)?;
    m.add_function(wrap_pyfunction!(gate_detections, m)?)?;
    m.add_function(wrap_pyfunction!(stub_annotate, m)?)?;
    m.add_function(wrap_pyfunction!(iou, m)?)?;
    m.add_function(wrap_pyfunction!(average_precision, m)?)?;
    m.add_function(wrap_pyfunction!(load_annotations, m)?)?;
    m.add_function(wrap_pyfunction!(diversity_score, m)?)?;
    m.add_function(wrap_pyfunction!(annotate, m)?)?;
    m.add_function(wrap_pyfunction!(aggregate, m)?)?;
    m.add_class::<PyAggregateState>()?;
    m.add("STUB_VERSION", stub::STUB_VERSION)?;
    Ok(())
}

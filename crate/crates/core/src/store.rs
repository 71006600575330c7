//! Append-only JSONL annotation shards.
//!
//! Each record is one line; numbers carry exactly six decimals so shards are
//! byte-stable. A record counts as committed only once its terminating
//! newline is on disk; a trailing partial line left by a crash is ignored on
//! load and cut off before the next append.

use std::collections::HashSet;
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::protocol::{BoundingBox, FaceAnnotation, FaceDetection, GenderScore, ProtocolError};

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("invalid annotation record: {0}")]
    Validation(String),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationRecord {
    pub image_id: String,
    pub synset_wnid: String,
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    pub confidence: f64,
    pub expected_age: f64,
    pub gender_score: f64,
    pub annotator_version: String,
    pub timestamp: u64,
}

impl AnnotationRecord {
    pub fn from_annotation(ann: &FaceAnnotation, synset_wnid: &str, timestamp: u64) -> Self {
        Self {
            image_id: ann.detection.image_id.clone(),
            synset_wnid: synset_wnid.to_string(),
            bbox: ann.detection.bbox,
            confidence: ann.detection.confidence,
            expected_age: ann.expected_age,
            gender_score: ann.gender_score.value(),
            annotator_version: ann.annotator_version.clone(),
            timestamp,
        }
    }

    /// Rebuild the face annotation (labels re-derived from the raw values).
    pub fn to_annotation(&self) -> Result<FaceAnnotation, ProtocolError> {
        let detection = FaceDetection::new(self.image_id.clone(), self.bbox, self.confidence)?;
        FaceAnnotation::from_parts(
            detection,
            self.expected_age,
            GenderScore::new(self.gender_score)?,
            self.annotator_version.clone(),
        )
    }

    pub fn validate(&self) -> Result<(), StoreError> {
        if self.image_id.is_empty() || self.synset_wnid.is_empty() {
            return Err(StoreError::Validation("empty image_id or synset_wnid".into()));
        }
        self.to_annotation()
            .map(|_| ())
            .map_err(|e| StoreError::Validation(e.to_string()))
    }

    /// Dedup identity: the face box within one (image, synset) record.
    pub fn dedup_key(&self) -> (String, String, [String; 4]) {
        let b = &self.bbox;
        (
            self.image_id.clone(),
            self.synset_wnid.clone(),
            [b.x, b.y, b.w, b.h].map(|v| format!("{v:.6}")),
        )
    }

    /// The canonical single-line encoding, without the trailing newline.
    pub fn to_line(&self) -> String {
        let s = |v: &str| serde_json::to_string(v).expect("string serializes");
        let b = &self.bbox;
        format!(
            "{{\"image_id\":{},\"synset_wnid\":{},\"box\":{{\"x\":{:.6},\"y\":{:.6},\"w\":{:.6},\"h\":{:.6}}},\"confidence\":{:.6},\"expected_age\":{:.6},\"gender_score\":{:.6},\"annotator_version\":{},\"timestamp\":{}}}",
            s(&self.image_id),
            s(&self.synset_wnid),
            b.x,
            b.y,
            b.w,
            b.h,
            self.confidence,
            self.expected_age,
            self.gender_score,
            s(&self.annotator_version),
            self.timestamp
        )
    }

    pub fn from_line(line: &str) -> Result<Self, StoreError> {
        let rec: Self = serde_json::from_str(line).map_err(|e| StoreError::Validation(e.to_string()))?;
        rec.validate()?;
        Ok(rec)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct LoadReport {
    pub lines: usize,
    pub records: usize,
    pub skipped_partial: usize,
    pub skipped_invalid: usize,
    pub duplicates: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct StoreCheckpoint {
    pub shard_path: PathBuf,
    pub records_committed: usize,
    pub last_image_id: Option<String>,
}

/// Split shard bytes into complete lines and an optional unterminated tail.
fn split_complete(bytes: &[u8]) -> (&[u8], &[u8]) {
    match bytes.iter().rposition(|&b| b == b'\n') {
        Some(i) => (&bytes[..=i], &bytes[i + 1..]),
        None => (&[], bytes),
    }
}

fn parse_shard(bytes: &[u8], dedup: bool) -> (Vec<AnnotationRecord>, LoadReport) {
    let (complete, tail) = split_complete(bytes);
    let mut report = LoadReport::default();
    if !tail.iter().all(u8::is_ascii_whitespace) {
        report.skipped_partial = 1;
    }
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for raw in complete.split(|&b| b == b'\n') {
        let Ok(line) = std::str::from_utf8(raw) else {
            report.lines += 1;
            report.skipped_invalid += 1;
            continue;
        };
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        report.lines += 1;
        match AnnotationRecord::from_line(line) {
            Ok(rec) => {
                if dedup && !seen.insert(rec.dedup_key()) {
                    report.duplicates += 1;
                    continue;
                }
                out.push(rec);
            }
            Err(_) => report.skipped_invalid += 1,
        }
    }
    report.records = out.len();
    (out, report)
}

/// Load every complete, valid record. With `dedup`, later records repeating
/// an earlier (image, synset, box) are dropped.
pub fn load(path: &Path, dedup: bool) -> Result<(Vec<AnnotationRecord>, LoadReport), StoreError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    Ok(parse_shard(&bytes, dedup))
}

/// Load several shards as one stream (in the given order) with optional dedup.
pub fn load_many(paths: &[PathBuf], dedup: bool) -> Result<(Vec<AnnotationRecord>, LoadReport), StoreError> {
    let mut all = Vec::new();
    let mut report = LoadReport::default();
    for p in paths {
        let (recs, r) = load(p, false)?;
        report.lines += r.lines;
        report.skipped_partial += r.skipped_partial;
        report.skipped_invalid += r.skipped_invalid;
        all.extend(recs);
    }
    if dedup {
        let mut seen = HashSet::new();
        let before = all.len();
        all.retain(|r| seen.insert(r.dedup_key()));
        report.duplicates = before - all.len();
    }
    report.records = all.len();
    Ok((all, report))
}

/// Last committed record of a shard; an absent shard is an empty checkpoint.
pub fn resume_point(path: &Path) -> Result<StoreCheckpoint, StoreError> {
    let mut cp = StoreCheckpoint {
        shard_path: path.to_path_buf(),
        ..Default::default()
    };
    if !path.exists() {
        return Ok(cp);
    }
    let (recs, _) = load(path, false)?;
    cp.records_committed = recs.len();
    cp.last_image_id = recs.last().map(|r| r.image_id.clone());
    Ok(cp)
}

/// Single-writer append handle for one shard.
pub struct ShardWriter {
    path: PathBuf,
    file: File,
    sync: bool,
}

impl ShardWriter {
    /// Open for appending, creating the file if needed and cutting off any
    /// unterminated tail left by an interrupted write.
    pub fn open(path: &Path) -> Result<Self, StoreError> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(io_err(dir))?;
        }
        let mut file = OpenOptions::new()
            .read(true)
            .append(true)
            .create(true)
            .open(path)
            .map_err(io_err(path))?;
        let mut bytes = Vec::new();
        file.read_to_end(&mut bytes).map_err(io_err(path))?;
        let (complete, tail) = split_complete(&bytes);
        if !tail.is_empty() {
            file.set_len(complete.len() as u64).map_err(io_err(path))?;
            file.seek(SeekFrom::End(0)).map_err(io_err(path))?;
        }
        Ok(Self {
            path: path.to_path_buf(),
            file,
            sync: true,
        })
    }

    /// Skip the per-record fsync (tests and throwaway runs).
    pub fn without_sync(mut self) -> Self {
        self.sync = false;
        self
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Validate and append one record; durable when this returns Ok.
    pub fn append(&mut self, rec: &AnnotationRecord) -> Result<(), StoreError> {
        rec.validate()?;
        let mut line = rec.to_line();
        line.push('\n');
        self.file.write_all(line.as_bytes()).map_err(io_err(&self.path))?;
        if self.sync {
            self.file.sync_data().map_err(io_err(&self.path))?;
        }
        Ok(())
    }
}

/// Append one record to `path` (opens and closes the shard).
pub fn append(path: &Path, rec: &AnnotationRecord) -> Result<(), StoreError> {
    ShardWriter::open(path)?.append(rec)
}

/// Concatenate shards into `out` with first-write-wins dedup.
pub fn merge_shards(inputs: &[PathBuf], out: &Path) -> Result<LoadReport, StoreError> {
    let (recs, report) = load_many(inputs, true)?;
    let file = File::create(out).map_err(io_err(out))?;
    let mut w = BufWriter::new(file);
    for r in &recs {
        writeln!(w, "{}", r.to_line()).map_err(io_err(out))?;
    }
    w.flush().map_err(io_err(out))?;
    w.get_ref().sync_all().map_err(io_err(out))?;
    Ok(report)
}

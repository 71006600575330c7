//! Import of externally produced annotation dumps into the shard format.
//!
//! The dump's schema is not fixed, so field names come from a mapping file
//! of `key = value` lines:
//!
//! ```text
//! # csv | tsv | jsonl
//! format = csv
//! field.image_id = file
//! # or: synset.from_image_id = true (prefix before the first `_`)
//! field.synset_wnid = wnid
//! # box fields are optional but come as a group
//! field.box.x = x
//! field.box.y = y
//! field.box.w = w
//! field.box.h = h
//! # optional, defaults to 1.0
//! field.confidence = det_score
//! field.expected_age = age
//! # or field.gender_label = sex
//! field.gender_score = gender
//! # female (score is P(female)) or male
//! gender_score.orientation = female
//! annotator_version = released-dump
//! timestamp = 0
//! ```
//!
//! Without box fields each face gets a synthetic 1x1 box at x = its ordinal
//! within the image, which keeps the dedup key unique per face.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use serde::Serialize;
use serde_json::Value;
use thiserror::Error;

use crate::config::parse_pairs;
use crate::protocol::{BoundingBox, Gender};
use crate::store::{AnnotationRecord, ShardWriter, StoreError};

#[derive(Debug, Error)]
pub enum ImportError {
    #[error("mapping: {0}")]
    Mapping(String),
    #[error("dump row {row}: {reason}")]
    Row { row: usize, reason: String },
    #[error("cannot read {path}: {reason}")]
    Io { path: String, reason: String },
    #[error(transparent)]
    Store(#[from] StoreError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DumpFormat {
    Csv,
    Tsv,
    Jsonl,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FieldMapping {
    pub format: DumpFormat,
    pub image_id: String,
    pub synset_wnid: Option<String>,
    pub synset_from_image_id: bool,
    pub bbox: Option<[String; 4]>,
    pub confidence: Option<String>,
    pub expected_age: String,
    pub gender_score: Option<String>,
    pub gender_label: Option<String>,
    /// Dump score counts toward male instead of female.
    pub score_is_male: bool,
    pub annotator_version: String,
    pub timestamp: u64,
}

impl FieldMapping {
    pub fn parse(text: &str) -> Result<Self, ImportError> {
        let pairs: HashMap<String, String> = parse_pairs(text)
            .map_err(|e| ImportError::Mapping(e.to_string()))?
            .into_iter()
            .collect();
        let known = [
            "format",
            "field.image_id",
            "field.synset_wnid",
            "synset.from_image_id",
            "field.box.x",
            "field.box.y",
            "field.box.w",
            "field.box.h",
            "field.confidence",
            "field.expected_age",
            "field.gender_score",
            "field.gender_label",
            "gender_score.orientation",
            "annotator_version",
            "timestamp",
        ];
        if let Some(k) = pairs.keys().find(|k| !known.contains(&k.as_str())) {
            return Err(ImportError::Mapping(format!("unknown key {k:?}")));
        }
        let get = |k: &str| pairs.get(k).cloned();
        let require = |k: &str| get(k).ok_or_else(|| ImportError::Mapping(format!("missing {k}")));

        let format = match get("format").as_deref().unwrap_or("jsonl") {
            "csv" => DumpFormat::Csv,
            "tsv" => DumpFormat::Tsv,
            "jsonl" => DumpFormat::Jsonl,
            other => return Err(ImportError::Mapping(format!("unknown format {other:?}"))),
        };
        let synset_from_image_id = get("synset.from_image_id").as_deref() == Some("true");
        let synset_wnid = get("field.synset_wnid");
        if synset_wnid.is_none() && !synset_from_image_id {
            return Err(ImportError::Mapping(
                "need field.synset_wnid or synset.from_image_id = true".into(),
            ));
        }
        let box_keys = ["field.box.x", "field.box.y", "field.box.w", "field.box.h"];
        let present = box_keys.iter().filter(|k| pairs.contains_key(**k)).count();
        let bbox = match present {
            0 => None,
            4 => Some(box_keys.map(|k| pairs[k].clone())),
            _ => return Err(ImportError::Mapping("box fields must be given all together".into())),
        };
        let gender_score = get("field.gender_score");
        let gender_label = get("field.gender_label");
        if gender_score.is_none() && gender_label.is_none() {
            return Err(ImportError::Mapping("need field.gender_score or field.gender_label".into()));
        }
        let score_is_male = match get("gender_score.orientation").as_deref().unwrap_or("female") {
            "female" => false,
            "male" => true,
            other => return Err(ImportError::Mapping(format!("orientation must be female or male, got {other:?}"))),
        };
        Ok(Self {
            format,
            image_id: require("field.image_id")?,
            synset_wnid,
            synset_from_image_id,
            bbox,
            confidence: get("field.confidence"),
            expected_age: require("field.expected_age")?,
            gender_score,
            gender_label,
            score_is_male,
            annotator_version: get("annotator_version").unwrap_or_else(|| "imported-dump".into()),
            timestamp: get("timestamp")
                .map(|t| t.parse().map_err(|_| ImportError::Mapping(format!("bad timestamp {t:?}"))))
                .transpose()?
                .unwrap_or(0),
        })
    }
}

type Row = BTreeMap<String, Value>;

fn read_rows(path: &Path, format: DumpFormat) -> Result<Vec<Row>, ImportError> {
    let io = |e: String| ImportError::Io {
        path: path.display().to_string(),
        reason: e,
    };
    match format {
        DumpFormat::Jsonl => {
            let text = fs::read_to_string(path).map_err(|e| io(e.to_string()))?;
            text.lines()
                .enumerate()
                .filter(|(_, l)| !l.trim().is_empty())
                .map(|(i, l)| {
                    serde_json::from_str::<Row>(l).map_err(|e| ImportError::Row {
                        row: i + 1,
                        reason: e.to_string(),
                    })
                })
                .collect()
        }
        DumpFormat::Csv | DumpFormat::Tsv => {
            let mut reader = csv::ReaderBuilder::new()
                .delimiter(if format == DumpFormat::Tsv { b'\t' } else { b',' })
                .from_path(path)
                .map_err(|e| io(e.to_string()))?;
            let headers = reader.headers().map_err(|e| io(e.to_string()))?.clone();
            reader
                .records()
                .enumerate()
                .map(|(i, rec)| {
                    let rec = rec.map_err(|e| ImportError::Row {
                        row: i + 1,
                        reason: e.to_string(),
                    })?;
                    Ok(headers
                        .iter()
                        .zip(rec.iter())
                        .map(|(h, v)| (h.to_string(), Value::String(v.to_string())))
                        .collect())
                })
                .collect()
        }
    }
}

fn text(row: &Row, key: &str, n: usize) -> Result<String, ImportError> {
    match row.get(key) {
        Some(Value::String(s)) => Ok(s.clone()),
        Some(Value::Number(x)) => Ok(x.to_string()),
        _ => Err(ImportError::Row {
            row: n,
            reason: format!("missing field {key:?}"),
        }),
    }
}

fn number(row: &Row, key: &str, n: usize) -> Result<f64, ImportError> {
    let bad = |reason: String| ImportError::Row { row: n, reason };
    match row.get(key) {
        Some(Value::Number(x)) => x.as_f64().ok_or_else(|| bad(format!("{key} not a number"))),
        Some(Value::String(s)) => s.trim().parse().map_err(|_| bad(format!("{key}={s:?} not a number"))),
        _ => Err(bad(format!("missing field {key:?}"))),
    }
}

fn round6(x: f64) -> f64 {
    crate::stub::round6(x)
}

/// Convert dump rows to annotation records.
pub fn convert_rows(rows: &[Row], map: &FieldMapping) -> Result<Vec<AnnotationRecord>, ImportError> {
    let mut ordinal: HashMap<(String, String), u32> = HashMap::new();
    rows.iter()
        .enumerate()
        .map(|(i, row)| {
            let n = i + 1;
            let image_id = text(row, &map.image_id, n)?;
            let synset_wnid = match &map.synset_wnid {
                Some(k) => text(row, k, n)?,
                None => image_id
                    .split('_')
                    .next()
                    .filter(|p| !p.is_empty())
                    .ok_or_else(|| ImportError::Row {
                        row: n,
                        reason: format!("cannot derive synset from {image_id:?}"),
                    })?
                    .to_string(),
            };
            let bbox = match &map.bbox {
                Some([x, y, w, h]) => BoundingBox::new(
                    round6(number(row, x, n)?),
                    round6(number(row, y, n)?),
                    round6(number(row, w, n)?),
                    round6(number(row, h, n)?),
                ),
                None => {
                    let k = ordinal.entry((image_id.clone(), synset_wnid.clone())).or_insert(0);
                    let b = BoundingBox::new(f64::from(*k), 0.0, 1.0, 1.0);
                    *k += 1;
                    b
                }
            };
            let confidence = match &map.confidence {
                Some(k) => round6(number(row, k, n)?),
                None => 1.0,
            };
            let gender_score = match (&map.gender_score, &map.gender_label) {
                (Some(k), _) => {
                    let s = number(row, k, n)?;
                    round6(if map.score_is_male { 1.0 - s } else { s })
                }
                (None, Some(k)) => {
                    let label: Gender = text(row, k, n)?
                        .parse()
                        .map_err(|reason| ImportError::Row { row: n, reason })?;
                    if label == Gender::Female {
                        1.0
                    } else {
                        0.0
                    }
                }
                (None, None) => unreachable!("mapping requires a gender field"),
            };
            let rec = AnnotationRecord {
                image_id,
                synset_wnid,
                bbox,
                confidence,
                expected_age: round6(number(row, &map.expected_age, n)?),
                gender_score,
                annotator_version: map.annotator_version.clone(),
                timestamp: map.timestamp,
            };
            rec.validate().map_err(|e| ImportError::Row {
                row: n,
                reason: e.to_string(),
            })?;
            Ok(rec)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ImportSummary {
    pub rows: usize,
    pub records_written: usize,
}

/// Convert a dump into a shard file at `out` (appending).
pub fn import_dump(dump: &Path, mapping: &Path, out: &Path) -> Result<ImportSummary, ImportError> {
    let map_text = fs::read_to_string(mapping).map_err(|e| ImportError::Io {
        path: mapping.display().to_string(),
        reason: e.to_string(),
    })?;
    let map = FieldMapping::parse(&map_text)?;
    let rows = read_rows(dump, map.format)?;
    let records = convert_rows(&rows, &map)?;
    let mut writer = ShardWriter::open(out)?.without_sync();
    for r in &records {
        writer.append(r)?;
    }
    // One sync at the end is enough for a bulk import.
    fs::File::open(out)
        .and_then(|f| f.sync_all())
        .map_err(|e| ImportError::Io {
            path: out.display().to_string(),
            reason: e.to_string(),
        })?;
    Ok(ImportSummary {
        rows: rows.len(),
        records_written: records.len(),
    })
}

//! Image manifest: `image_id<TAB>wnid<TAB>uri`, one record per line.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hierarchy::{AuditSubset, Hierarchy};

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("manifest line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("failed to read manifest {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ImageStatus {
    Present,
    Missing,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub image_id: String,
    pub synset_wnid: String,
    pub uri: String,
    pub status: ImageStatus,
}

impl ImageRecord {
    pub fn new(image_id: impl Into<String>, synset_wnid: impl Into<String>, uri: impl Into<String>) -> Self {
        Self {
            image_id: image_id.into(),
            synset_wnid: synset_wnid.into(),
            uri: uri.into(),
            status: ImageStatus::Present,
        }
    }

    pub fn is_present(&self) -> bool {
        self.status == ImageStatus::Present
    }

    /// Local filesystem path for the image, if the uri is not a remote URL.
    pub fn local_path(&self) -> Option<PathBuf> {
        local_path(&self.uri, None)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParseMode {
    /// First malformed line aborts the load.
    Strict,
    /// Malformed lines are skipped and counted.
    Lenient,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ManifestReport {
    pub lines: usize,
    pub records: usize,
    pub missing: usize,
    pub unresolved_synset: usize,
    pub missing_file: usize,
    pub malformed: usize,
    pub duplicates: usize,
}

/// Immutable set of image records, one per (image_id, synset) pair, in file order.
#[derive(Debug, Clone, Default)]
pub struct Manifest {
    records: Vec<ImageRecord>,
    report: ManifestReport,
}

fn local_path(uri: &str, base: Option<&Path>) -> Option<PathBuf> {
    let path = if let Some(rest) = uri.strip_prefix("file://") {
        PathBuf::from(rest)
    } else if uri.contains("://") {
        return None;
    } else {
        PathBuf::from(uri)
    };
    match base {
        Some(base) if path.is_relative() => Some(base.join(path)),
        _ => Some(path),
    }
}

/// Load a manifest file. Relative uris resolve against the manifest's directory
/// and are rewritten to the resolved path.
pub fn load_manifest(path: &Path, h: &Hierarchy, mode: ParseMode) -> Result<Manifest, ManifestError> {
    let text = fs::read_to_string(path).map_err(|source| ManifestError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let base = path.parent().map(Path::to_path_buf);
    parse_manifest(&text, base.as_deref(), h, mode)
}

/// Parse manifest text. When `base` is given, local uris are checked for existence.
pub fn parse_manifest(
    text: &str,
    base: Option<&Path>,
    h: &Hierarchy,
    mode: ParseMode,
) -> Result<Manifest, ManifestError> {
    let mut report = ManifestReport::default();
    let mut records = Vec::new();
    let mut seen = BTreeSet::new();

    for (idx, raw) in text.split('\n').enumerate() {
        let line_no = idx + 1;
        let line = raw.strip_suffix('\r').unwrap_or(raw);
        if line.trim().is_empty() {
            continue;
        }
        report.lines += 1;
        let fields: Vec<&str> = line.split('\t').collect();
        let problem = match fields.as_slice() {
            [id, wnid, uri] if !id.is_empty() && !wnid.is_empty() && !uri.is_empty() => None,
            [_, _, _] => Some("empty field"),
            _ => Some("expected 3 tab-separated fields"),
        };
        if let Some(reason) = problem {
            match mode {
                ParseMode::Strict => {
                    return Err(ManifestError::Parse {
                        line: line_no,
                        reason: reason.into(),
                    })
                }
                ParseMode::Lenient => {
                    report.malformed += 1;
                    continue;
                }
            }
        }
        let (image_id, wnid, uri) = (fields[0], fields[1], fields[2]);
        if !seen.insert((image_id.to_string(), wnid.to_string())) {
            match mode {
                ParseMode::Strict => {
                    return Err(ManifestError::Parse {
                        line: line_no,
                        reason: format!("duplicate record ({image_id}, {wnid})"),
                    })
                }
                ParseMode::Lenient => {
                    report.duplicates += 1;
                    continue;
                }
            }
        }

        let mut record = ImageRecord::new(image_id, wnid, uri);
        if !h.contains(wnid) {
            record.status = ImageStatus::Missing;
            report.unresolved_synset += 1;
        }
        if let Some(base) = base {
            if let Some(p) = local_path(uri, Some(base)) {
                if !p.is_file() {
                    if record.is_present() {
                        report.missing_file += 1;
                    }
                    record.status = ImageStatus::Missing;
                }
                record.uri = p.to_string_lossy().into_owned();
            }
        }
        if !record.is_present() {
            report.missing += 1;
        }
        records.push(record);
    }
    report.records = records.len();
    Ok(Manifest { records, report })
}

impl Manifest {
    pub fn from_records(records: Vec<ImageRecord>) -> Self {
        let report = ManifestReport {
            lines: records.len(),
            records: records.len(),
            missing: records.iter().filter(|r| !r.is_present()).count(),
            ..Default::default()
        };
        Self { records, report }
    }

    pub fn records(&self) -> &[ImageRecord] {
        &self.records
    }

    pub fn report(&self) -> &ManifestReport {
        &self.report
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Records whose synset belongs to `subset`, in manifest order.
    pub fn restrict(&self, subset: &AuditSubset) -> Manifest {
        Manifest::from_records(
            self.records
                .iter()
                .filter(|r| subset.contains(&r.synset_wnid))
                .cloned()
                .collect(),
        )
    }

    /// Number of present images per synset.
    pub fn present_counts(&self) -> BTreeMap<&str, u64> {
        let mut counts = BTreeMap::new();
        for r in self.records.iter().filter(|r| r.is_present()) {
            *counts.entry(r.synset_wnid.as_str()).or_insert(0) += 1;
        }
        counts
    }

    pub fn find(&self, image_id: &str, wnid: &str) -> Option<&ImageRecord> {
        self.records
            .iter()
            .find(|r| r.image_id == image_id && r.synset_wnid == wnid)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hierarchy::{load_hierarchy, Edge};

    fn hierarchy() -> Hierarchy {
        load_hierarchy(
            &[Edge::new("n1", "n0"), Edge::new("n2", "n0")],
            &BTreeMap::new(),
            false,
        )
        .unwrap()
    }

    fn write_images(dir: &Path, names: &[&str]) {
        for n in names {
            fs::write(dir.join(n), b"x").unwrap();
        }
    }

    #[test]
    fn three_valid_lines() {
        let dir = tempfile::tempdir().unwrap();
        write_images(dir.path(), &["a.jpg", "b.jpg", "c.jpg"]);
        let path = dir.path().join("manifest.tsv");
        fs::write(&path, "a\tn1\ta.jpg\nb\tn1\tb.jpg\nc\tn2\tc.jpg\n").unwrap();
        let m = load_manifest(&path, &hierarchy(), ParseMode::Strict).unwrap();
        assert_eq!(m.len(), 3);
        assert_eq!(m.report().missing, 0);
        assert_eq!(m.present_counts()["n1"], 2);
    }

    #[test]
    fn absent_file_marked_missing() {
        let dir = tempfile::tempdir().unwrap();
        write_images(dir.path(), &["a.jpg"]);
        let path = dir.path().join("manifest.tsv");
        fs::write(&path, "a\tn1\ta.jpg\nb\tn1\tgone.jpg\n").unwrap();
        let m = load_manifest(&path, &hierarchy(), ParseMode::Strict).unwrap();
        assert_eq!(m.len(), 2);
        assert_eq!(m.report().missing, 1);
        assert_eq!(m.records()[1].status, ImageStatus::Missing);
    }

    #[test]
    fn unresolved_synset_retained_as_missing() {
        let m = parse_manifest("a\tn9\thttp://x/a.jpg\n", None, &hierarchy(), ParseMode::Strict).unwrap();
        assert_eq!(m.report().unresolved_synset, 1);
        assert_eq!(m.report().missing, 1);
    }

    #[test]
    fn strict_reports_line_number() {
        let err = parse_manifest("a\tn1\ta\nbroken line\n", None, &hierarchy(), ParseMode::Strict).unwrap_err();
        assert!(matches!(err, ManifestError::Parse { line: 2, .. }));
    }

    #[test]
    fn lenient_skips_with_count() {
        let m = parse_manifest("a\tn1\ta\nbroken\nc\tn2\tc\n", None, &hierarchy(), ParseMode::Lenient).unwrap();
        assert_eq!(m.len(), 2);
        assert_eq!(m.report().malformed, 1);
    }

    #[test]
    fn same_image_in_two_synsets_is_two_records() {
        let m = parse_manifest("a\tn1\tu\na\tn2\tu\n", None, &hierarchy(), ParseMode::Strict).unwrap();
        assert_eq!(m.len(), 2);
        assert!(parse_manifest("a\tn1\tu\na\tn1\tu\n", None, &hierarchy(), ParseMode::Strict).is_err());
    }

    #[test]
    fn deterministic_load() {
        let text = "a\tn1\tu1\nb\tn9\tu2\nbad\n";
        let h = hierarchy();
        let m1 = parse_manifest(text, None, &h, ParseMode::Lenient).unwrap();
        let m2 = parse_manifest(text, None, &h, ParseMode::Lenient).unwrap();
        assert_eq!(m1.records(), m2.records());
        assert_eq!(m1.report(), m2.report());
    }
}

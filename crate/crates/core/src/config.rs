//! Audit configuration: a plain-text file of dotted `key = value` lines,
//! overridable from the command line.
//!
//! ```text
//! manifest = data/manifest.tsv
//! hierarchy.edges = data/wordnet.is_a.txt
//! hierarchy.glosses = data/words.txt
//! subset.root = n00007846
//! annotator = stub
//! gate.min_conf = 0.9
//! ranking.min_images = 20
//! ranking.min_det_rate = 0.15
//! run.shards = 4
//! run.seed = 0
//! output.dir = out
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::diversity::DEFAULT_TARGET_DIMS;
use crate::protocol::DEFAULT_MIN_CONFIDENCE;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("config line {line}: {reason}")]
    Syntax { line: usize, reason: String },
    #[error("unknown config key {0:?}")]
    UnknownKey(String),
    #[error("invalid value for {key}: {reason}")]
    Invalid { key: String, reason: String },
    #[error("missing required setting {0}")]
    Missing(&'static str),
    #[error("cannot read config {path}: {reason}")]
    Io { path: String, reason: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SubsetSpec {
    /// Root synset plus all descendants.
    Root(String),
    /// File with one wnid per line.
    ListFile(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AnnotatorSpec {
    Stub,
    Worker { endpoint: Option<String> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct AuditConfig {
    pub manifest_path: Option<PathBuf>,
    pub manifest_strict: bool,
    pub hierarchy_edges: Option<PathBuf>,
    pub hierarchy_glosses: Option<PathBuf>,
    pub hierarchy_strict: bool,
    pub subset: Option<SubsetSpec>,
    pub annotator: AnnotatorSpec,
    pub min_conf: f64,
    pub min_images: u64,
    pub min_det_rate: f64,
    pub shard_count: usize,
    pub output_dir: PathBuf,
    pub seed: u64,
    /// Fixed record timestamp; when unset, wall-clock time is used.
    pub timestamp: Option<u64>,
    pub diversity_dims: (u32, u32),
    /// Stop after this many newly annotated images (partial runs).
    pub limit: Option<usize>,
}

impl Default for AuditConfig {
    fn default() -> Self {
        Self {
            manifest_path: None,
            manifest_strict: false,
            hierarchy_edges: None,
            hierarchy_glosses: None,
            hierarchy_strict: false,
            subset: None,
            annotator: AnnotatorSpec::Stub,
            min_conf: DEFAULT_MIN_CONFIDENCE,
            min_images: 20,
            min_det_rate: 0.15,
            shard_count: 1,
            output_dir: PathBuf::from("audit-out"),
            seed: 0,
            timestamp: None,
            diversity_dims: DEFAULT_TARGET_DIMS,
            limit: None,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e: T::Err| ConfigError::Invalid {
        key: key.to_string(),
        reason: e.to_string(),
    })
}

fn parse_bool(key: &str, value: &str) -> Result<bool, ConfigError> {
    match value {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(ConfigError::Invalid {
            key: key.to_string(),
            reason: format!("expected true/false, got {value:?}"),
        }),
    }
}

/// Parse `key = value` lines; `#` starts a comment line.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>, ConfigError> {
    let mut pairs = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
            line: i + 1,
            reason: "expected `key = value`".into(),
        })?;
        let k = k.trim();
        if k.is_empty() {
            return Err(ConfigError::Syntax {
                line: i + 1,
                reason: "empty key".into(),
            });
        }
        pairs.push((k.to_string(), v.trim().to_string()));
    }
    Ok(pairs)
}

impl AuditConfig {
    /// Read a config file; relative paths resolve against its directory.
    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|e| ConfigError::Io {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        let base = path.parent().unwrap_or(Path::new(""));
        let mut cfg = Self::default();
        for (k, v) in parse_pairs(&text)? {
            cfg.set(&k, &v, Some(base))?;
        }
        Ok(cfg)
    }

    /// Apply one setting. Paths are joined onto `base` when relative.
    pub fn set(&mut self, key: &str, value: &str, base: Option<&Path>) -> Result<(), ConfigError> {
        let path = |v: &str| match base {
            Some(b) if Path::new(v).is_relative() => b.join(v),
            _ => PathBuf::from(v),
        };
        match key {
            "manifest" | "manifest.path" => self.manifest_path = Some(path(value)),
            "manifest.strict" => self.manifest_strict = parse_bool(key, value)?,
            "hierarchy.edges" => self.hierarchy_edges = Some(path(value)),
            "hierarchy.glosses" => self.hierarchy_glosses = Some(path(value)),
            "hierarchy.strict" => self.hierarchy_strict = parse_bool(key, value)?,
            "subset" | "subset.root" => self.subset = Some(SubsetSpec::Root(value.to_string())),
            "subset.list" => self.subset = Some(SubsetSpec::ListFile(path(value))),
            "annotator" => {
                self.annotator = match value {
                    "stub" => AnnotatorSpec::Stub,
                    "worker" => AnnotatorSpec::Worker { endpoint: None },
                    other => {
                        return Err(ConfigError::Invalid {
                            key: key.into(),
                            reason: format!("expected stub or worker, got {other:?}"),
                        })
                    }
                }
            }
            "annotator.endpoint" => {
                self.annotator = AnnotatorSpec::Worker {
                    endpoint: Some(value.to_string()),
                }
            }
            "gate.min_conf" => self.min_conf = parse_num(key, value)?,
            "ranking.min_images" => self.min_images = parse_num(key, value)?,
            "ranking.min_det_rate" => self.min_det_rate = parse_num(key, value)?,
            "run.shards" => self.shard_count = parse_num(key, value)?,
            "run.seed" => self.seed = parse_num(key, value)?,
            "run.timestamp" => self.timestamp = Some(parse_num(key, value)?),
            "run.limit" => self.limit = Some(parse_num(key, value)?),
            "output.dir" => self.output_dir = path(value),
            "diversity.width" => self.diversity_dims.0 = parse_num(key, value)?,
            "diversity.height" => self.diversity_dims.1 = parse_num(key, value)?,
            other => return Err(ConfigError::UnknownKey(other.to_string())),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |key: &str, reason: String| ConfigError::Invalid {
            key: key.into(),
            reason,
        };
        if !(0.0..=1.0).contains(&self.min_conf) {
            return Err(invalid("gate.min_conf", format!("{} outside [0, 1]", self.min_conf)));
        }
        if !(0.0..=1.0).contains(&self.min_det_rate) {
            return Err(invalid("ranking.min_det_rate", format!("{} outside [0, 1]", self.min_det_rate)));
        }
        if self.shard_count == 0 {
            return Err(invalid("run.shards", "must be at least 1".into()));
        }
        if self.diversity_dims.0 == 0 || self.diversity_dims.1 == 0 {
            return Err(invalid("diversity.width", "dimensions must be positive".into()));
        }
        Ok(())
    }

    /// Canonical settings that determine audit results (output location and
    /// run limits excluded).
    pub fn canonical(&self) -> BTreeMap<&'static str, String> {
        let p = |o: &Option<PathBuf>| o.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let mut m = BTreeMap::new();
        m.insert("manifest", p(&self.manifest_path));
        m.insert("manifest.strict", self.manifest_strict.to_string());
        m.insert("hierarchy.edges", p(&self.hierarchy_edges));
        m.insert("hierarchy.glosses", p(&self.hierarchy_glosses));
        m.insert("hierarchy.strict", self.hierarchy_strict.to_string());
        m.insert(
            "subset",
            match &self.subset {
                None => String::new(),
                Some(SubsetSpec::Root(r)) => format!("root:{r}"),
                Some(SubsetSpec::ListFile(f)) => format!("list:{}", f.display()),
            },
        );
        m.insert(
            "annotator",
            match &self.annotator {
                AnnotatorSpec::Stub => "stub".to_string(),
                AnnotatorSpec::Worker { .. } => "worker".to_string(),
            },
        );
        m.insert("gate.min_conf", self.min_conf.to_string());
        m.insert("ranking.min_images", self.min_images.to_string());
        m.insert("ranking.min_det_rate", self.min_det_rate.to_string());
        m.insert("run.seed", self.seed.to_string());
        m.insert(
            "run.timestamp",
            self.timestamp.map(|t| t.to_string()).unwrap_or_default(),
        );
        m.insert(
            "diversity.dims",
            format!("{}x{}", self.diversity_dims.0, self.diversity_dims.1),
        );
        m
    }

    /// First 16 hex digits of the SHA-256 of the canonical settings.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for (k, v) in self.canonical() {
            h.update(k.as_bytes());
            h.update(b"=");
            h.update(v.as_bytes());
            h.update(b"\n");
        }
        h.finalize().iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    pub fn record_timestamp(&self) -> u64 {
        self.timestamp.unwrap_or_else(|| {
            std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0)
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_file_with_relative_paths() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("audit.conf");
        fs::write(
            &p,
            "# audit\nmanifest = m.tsv\nsubset.root = n00007846\ngate.min_conf = 0.95\nrun.shards = 3\nannotator.endpoint = tcp://127.0.0.1:9000\n",
        )
        .unwrap();
        let cfg = AuditConfig::from_file(&p).unwrap();
        assert_eq!(cfg.manifest_path, Some(dir.path().join("m.tsv")));
        assert_eq!(cfg.subset, Some(SubsetSpec::Root("n00007846".into())));
        assert_eq!(cfg.min_conf, 0.95);
        assert_eq!(cfg.shard_count, 3);
        assert_eq!(
            cfg.annotator,
            AnnotatorSpec::Worker {
                endpoint: Some("tcp://127.0.0.1:9000".into())
            }
        );
        cfg.validate().unwrap();
    }

    #[test]
    fn rejects_bad_input() {
        assert!(matches!(parse_pairs("novalue\n"), Err(ConfigError::Syntax { line: 1, .. })));
        let mut cfg = AuditConfig::default();
        assert_eq!(cfg.set("bogus", "1", None), Err(ConfigError::UnknownKey("bogus".into())));
        assert!(cfg.set("run.shards", "many", None).is_err());
        cfg.min_conf = 1.5;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn hash_ignores_output_dir_but_not_thresholds() {
        let a = AuditConfig::default();
        let mut b = a.clone();
        b.output_dir = PathBuf::from("elsewhere");
        b.limit = Some(3);
        assert_eq!(a.hash(), b.hash());
        b.min_conf = 0.8;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 16);
    }
}

//! End-to-end commands: annotate, aggregate, evaluate, diversity.
//!
//! Output layout under `output_dir`:
//!
//! ```text
//! shards/shard-0000.jsonl            annotation records
//! shards/shard-0000.done             image keys fully annotated (resume log)
//! shards/shard-0000.failures.jsonl   per-image failures of the latest attempts
//! run_summary.json
//! report/top_level.{csv,md}
//! report/ranking_male.csv, report/ranking_female.csv, report/rankings.md
//! report/diversity.csv
//! ```
//!
//! Images are assigned to shards by manifest position modulo the shard
//! count, and each shard is written by exactly one thread in manifest order,
//! so a run is byte-reproducible for a fixed config and record timestamp.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::thread;

use serde::Serialize;
use thiserror::Error;

use crate::aggregate::{synset_gender_ranking, AggregateError, AggregateState, RankingFilters};
use crate::config::{AnnotatorSpec, AuditConfig, ConfigError, SubsetSpec};
use crate::diversity::{diversity_score, DiversityError, DiversityScore};
use crate::eval::{
    load_labels, load_predictions, stratified_accuracy, stratified_ap, stratified_mae, EvalError, ScoredBox,
    StratifiedTable, Strata, DEFAULT_IOU_THRESHOLD,
};
use crate::hierarchy::{read_hierarchy, subset_from_list, subtree, AuditSubset, Hierarchy, HierarchyError};
use crate::import::ImportError;
use crate::manifest::{parse_manifest, ImageRecord, Manifest, ManifestError, ParseMode};
use crate::protocol::{annotate_image, Annotator, AnnotatorError};
use crate::report::{self, ReportHeader};
use crate::store::{load_many, AnnotationRecord, ShardWriter, StoreError};
use crate::stub::StubAnnotator;
use crate::worker::{resolve_endpoint, WorkerClient};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Hierarchy(#[from] HierarchyError),
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error(transparent)]
    Annotator(#[from] AnnotatorError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Aggregate(#[from] AggregateError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Diversity(#[from] DiversityError),
    #[error(transparent)]
    Import(#[from] ImportError),
    #[error("no shard files found in {0}")]
    NoShards(PathBuf),
    #[error("{0}")]
    Usage(String),
    #[error("I/O error on {path}: {reason}")]
    Io { path: PathBuf, reason: String },
}

impl PipelineError {
    /// Stable machine-readable error kind.
    pub fn kind(&self) -> &'static str {
        match self {
            PipelineError::Config(_) => "ConfigError",
            PipelineError::Hierarchy(_) => "HierarchyError",
            PipelineError::Manifest(_) => "ManifestError",
            PipelineError::Annotator(AnnotatorError::Unavailable(_)) => "AnnotatorUnavailable",
            PipelineError::Annotator(_) => "AnnotatorError",
            PipelineError::Store(_) => "StoreError",
            PipelineError::Aggregate(AggregateError::EmptyAudit) => "EmptyAudit",
            PipelineError::Aggregate(_) => "AggregateError",
            PipelineError::Eval(EvalError::MissingPrediction(_)) => "MissingPrediction",
            PipelineError::Eval(_) => "EvalError",
            PipelineError::Diversity(_) => "DiversityError",
            PipelineError::Import(_) => "ImportError",
            PipelineError::NoShards(_) => "NoShards",
            PipelineError::Usage(_) => "UsageError",
            PipelineError::Io { .. } => "IoError",
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |e| PipelineError::Io {
        path: path.to_path_buf(),
        reason: e.to_string(),
    }
}

fn write_file(path: &Path, contents: &str) -> Result<(), PipelineError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(path, contents).map_err(io_err(path))
}

/// Hierarchy, audit subset and the manifest restricted to it.
#[derive(Debug, Clone)]
pub struct AuditInputs {
    pub hierarchy: Hierarchy,
    pub subset: Option<AuditSubset>,
    pub manifest: Manifest,
}

fn manifest_wnids(text: &str) -> BTreeSet<String> {
    text.lines()
        .filter_map(|l| l.split('\t').nth(1))
        .map(|w| w.trim().to_string())
        .filter(|w| !w.is_empty())
        .collect()
}

fn load_hierarchy_for(cfg: &AuditConfig, fallback_wnids: impl FnOnce() -> BTreeSet<String>) -> Result<Hierarchy, PipelineError> {
    match &cfg.hierarchy_edges {
        Some(edges) => Ok(read_hierarchy(edges, cfg.hierarchy_glosses.as_deref(), cfg.hierarchy_strict)?),
        None => Ok(Hierarchy::flat(fallback_wnids())),
    }
}

fn resolve_subset(cfg: &AuditConfig, h: &Hierarchy) -> Result<Option<AuditSubset>, PipelineError> {
    Ok(match &cfg.subset {
        None => None,
        Some(SubsetSpec::Root(root)) => Some(subtree(h, root)?),
        Some(SubsetSpec::ListFile(path)) => {
            let text = fs::read_to_string(path).map_err(io_err(path))?;
            let name = path.file_stem().map_or("list".into(), |s| s.to_string_lossy().into_owned());
            Some(subset_from_list(h, &name, text.lines())?)
        }
    })
}

/// Load hierarchy, subset and manifest. Without hierarchy files, every wnid in
/// the manifest is accepted as a root synset.
pub fn load_inputs(cfg: &AuditConfig) -> Result<AuditInputs, PipelineError> {
    cfg.validate()?;
    let path = cfg
        .manifest_path
        .as_ref()
        .ok_or(PipelineError::Config(ConfigError::Missing("manifest")))?;
    let text = fs::read_to_string(path).map_err(|source| ManifestError::Io {
        path: path.clone(),
        source,
    })?;
    let hierarchy = load_hierarchy_for(cfg, || manifest_wnids(&text))?;
    let mode = if cfg.manifest_strict {
        ParseMode::Strict
    } else {
        ParseMode::Lenient
    };
    let base = path.parent().map(Path::to_path_buf);
    let full = parse_manifest(&text, base.as_deref(), &hierarchy, mode)?;
    let subset = resolve_subset(cfg, &hierarchy)?;
    let manifest = match &subset {
        Some(s) => full.restrict(s),
        None => full,
    };
    let subset = subset.map(|s| s.with_image_counts(&manifest));
    Ok(AuditInputs {
        hierarchy,
        subset,
        manifest,
    })
}

pub fn shard_dir(cfg: &AuditConfig) -> PathBuf {
    cfg.output_dir.join("shards")
}

pub fn report_dir(cfg: &AuditConfig) -> PathBuf {
    cfg.output_dir.join("report")
}

pub fn shard_path(dir: &Path, i: usize) -> PathBuf {
    dir.join(format!("shard-{i:04}.jsonl"))
}

fn done_path(shard: &Path) -> PathBuf {
    shard.with_extension("done")
}

fn failures_path(shard: &Path) -> PathBuf {
    shard.with_extension("failures.jsonl")
}

fn image_key(img: &ImageRecord) -> String {
    format!("{}\t{}", img.image_id, img.synset_wnid)
}

/// Complete lines of a progress log; an unterminated tail is ignored.
fn read_done(path: &Path) -> Result<HashSet<String>, PipelineError> {
    if !path.exists() {
        return Ok(HashSet::new());
    }
    let bytes = fs::read(path).map_err(io_err(path))?;
    let end = bytes.iter().rposition(|&b| b == b'\n').map_or(0, |i| i + 1);
    Ok(String::from_utf8_lossy(&bytes[..end])
        .lines()
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect())
}

/// Open a progress log for appending, cutting off a torn tail first.
fn open_log(path: &Path) -> Result<File, PipelineError> {
    if path.exists() {
        let bytes = fs::read(path).map_err(io_err(path))?;
        let end = bytes.iter().rposition(|&b| b == b'\n').map_or(0, |i| i + 1);
        if end != bytes.len() {
            OpenOptions::new()
                .write(true)
                .open(path)
                .and_then(|f| f.set_len(end as u64))
                .map_err(io_err(path))?;
        }
    }
    OpenOptions::new().append(true).create(true).open(path).map_err(io_err(path))
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ShardSummary {
    pub shard: String,
    pub processed: usize,
    pub failed: usize,
    pub records_written: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct RunSummary {
    pub config_hash: String,
    pub annotator_version: String,
    pub manifest_images: usize,
    /// Newly annotated in this run.
    pub processed: usize,
    /// Already done in an earlier run, or marked missing in the manifest.
    pub skipped: usize,
    pub failed: usize,
    /// Left for a later run because of `limit`.
    pub deferred: usize,
    pub records_written: usize,
    pub shards: Vec<ShardSummary>,
}

#[derive(Serialize)]
struct FailureLine<'a> {
    image_id: &'a str,
    synset_wnid: &'a str,
    error: String,
}

fn make_annotator(cfg: &AuditConfig) -> Result<Box<dyn Annotator + Send>, PipelineError> {
    match &cfg.annotator {
        AnnotatorSpec::Stub => Ok(Box::new(StubAnnotator::new(cfg.seed))),
        AnnotatorSpec::Worker { endpoint } => {
            let ep = resolve_endpoint(endpoint.as_deref()).ok_or_else(|| {
                AnnotatorError::Unavailable(format!("no worker endpoint configured (set {})", crate::worker::ENDPOINT_ENV))
            })?;
            Ok(Box::new(WorkerClient::connect(&ep)?))
        }
    }
}

fn annotate_shard(
    cfg: &AuditConfig,
    annotator: &mut dyn Annotator,
    shard: &Path,
    images: &[&ImageRecord],
    timestamp: u64,
) -> Result<ShardSummary, PipelineError> {
    let mut writer = ShardWriter::open(shard)?;
    let mut done = open_log(&done_path(shard))?;
    let mut summary = ShardSummary {
        shard: shard.file_name().map_or(String::new(), |n| n.to_string_lossy().into_owned()),
        ..Default::default()
    };
    let mut failures = Vec::new();
    for img in images {
        match annotate_image(annotator, img, cfg.min_conf) {
            Ok(faces) => {
                for face in &faces {
                    writer.append(&AnnotationRecord::from_annotation(face, &img.synset_wnid, timestamp))?;
                }
                // Marked done only after its records are durable.
                writeln!(done, "{}", image_key(img))
                    .and_then(|_| done.sync_data())
                    .map_err(io_err(&done_path(shard)))?;
                summary.processed += 1;
                summary.records_written += faces.len();
            }
            Err(e) if e.is_per_image() => {
                summary.failed += 1;
                failures.push(FailureLine {
                    image_id: &img.image_id,
                    synset_wnid: &img.synset_wnid,
                    error: e.to_string(),
                });
            }
            Err(e) => return Err(e.into()),
        }
    }
    let fpath = failures_path(shard);
    if failures.is_empty() {
        if fpath.exists() {
            fs::remove_file(&fpath).map_err(io_err(&fpath))?;
        }
    } else {
        let text: String = failures
            .iter()
            .map(|f| serde_json::to_string(f).expect("failure serializes") + "\n")
            .collect();
        write_file(&fpath, &text)?;
    }
    Ok(summary)
}

/// Annotate every present manifest image not already done. Per-image
/// failures are counted and logged; an unreachable annotator is fatal.
pub fn cmd_annotate(cfg: &AuditConfig) -> Result<RunSummary, PipelineError> {
    let inputs = load_inputs(cfg)?;
    let dir = shard_dir(cfg);
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let timestamp = cfg.record_timestamp();

    let shard_paths: Vec<PathBuf> = (0..cfg.shard_count).map(|i| shard_path(&dir, i)).collect();
    let mut done = HashSet::new();
    for p in &shard_paths {
        done.extend(read_done(&done_path(p))?);
    }

    let mut summary = RunSummary {
        config_hash: cfg.hash(),
        manifest_images: inputs.manifest.len(),
        ..Default::default()
    };
    let mut buckets: Vec<Vec<&ImageRecord>> = vec![Vec::new(); cfg.shard_count];
    let mut budget = cfg.limit.unwrap_or(usize::MAX);
    for (i, img) in inputs.manifest.records().iter().enumerate() {
        if !img.is_present() || done.contains(&image_key(img)) {
            summary.skipped += 1;
        } else if budget == 0 {
            summary.deferred += 1;
        } else {
            budget -= 1;
            buckets[i % cfg.shard_count].push(img);
        }
    }

    // Connect every annotator up front so an unreachable worker fails fast.
    let mut annotators = (0..cfg.shard_count)
        .map(|_| make_annotator(cfg))
        .collect::<Result<Vec<_>, _>>()?;
    summary.annotator_version = annotators[0].version();

    let results: Vec<Result<ShardSummary, PipelineError>> = thread::scope(|s| {
        let handles: Vec<_> = annotators
            .iter_mut()
            .zip(&buckets)
            .zip(&shard_paths)
            .map(|((ann, imgs), path)| s.spawn(move || annotate_shard(cfg, ann.as_mut(), path, imgs, timestamp)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("annotation thread panicked"))
            .collect()
    });
    for r in results {
        let s = r?;
        summary.processed += s.processed;
        summary.failed += s.failed;
        summary.records_written += s.records_written;
        summary.shards.push(s);
    }
    let json = serde_json::to_string_pretty(&summary).expect("summary serializes") + "\n";
    write_file(&cfg.output_dir.join("run_summary.json"), &json)?;
    Ok(summary)
}

/// Shard files in `dir`, sorted by name.
pub fn list_shards(dir: &Path) -> Result<Vec<PathBuf>, PipelineError> {
    if !dir.is_dir() {
        return Err(PipelineError::NoShards(dir.to_path_buf()));
    }
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            let name = p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            name.ends_with(".jsonl") && !name.ends_with(".failures.jsonl")
        })
        .collect();
    out.sort();
    if out.is_empty() {
        return Err(PipelineError::NoShards(dir.to_path_buf()));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct AggregateSummary {
    pub records_loaded: usize,
    pub duplicates: usize,
    pub skipped_partial: usize,
    pub skipped_invalid: usize,
    pub faces_counted: u64,
    pub synsets_ranked: usize,
    pub outputs: Vec<String>,
}

fn versions_of(records: &[AnnotationRecord]) -> String {
    let set: BTreeSet<&str> = records.iter().map(|r| r.annotator_version.as_str()).collect();
    set.into_iter().collect::<Vec<_>>().join("+")
}

/// Manifest made of the (image, synset) pairs that appear in the records.
fn manifest_from_records(records: &[AnnotationRecord]) -> Manifest {
    let pairs: BTreeSet<(&str, &str)> = records
        .iter()
        .map(|r| (r.image_id.as_str(), r.synset_wnid.as_str()))
        .collect();
    Manifest::from_records(pairs.into_iter().map(|(i, w)| ImageRecord::new(i, w, "")).collect())
}

/// Tables and rankings from shards. `shards` defaults to every shard under
/// the output directory. Without a manifest only the top-level table can be
/// computed, since the ranking filters need per-synset image counts.
pub fn cmd_aggregate(cfg: &AuditConfig, shards: Option<&[PathBuf]>) -> Result<AggregateSummary, PipelineError> {
    cfg.validate()?;
    let shard_files = match shards {
        Some(s) if !s.is_empty() => s.to_vec(),
        _ => list_shards(&shard_dir(cfg))?,
    };
    let (mut records, load) = load_many(&shard_files, true)?;

    let (state, hierarchy) = if cfg.manifest_path.is_some() {
        let inputs = load_inputs(cfg)?;
        // Records outside the audited subset are not part of this audit.
        if let Some(subset) = &inputs.subset {
            records.retain(|r| subset.contains(&r.synset_wnid));
        }
        let state = AggregateState::from_records(&inputs.manifest, &records, cfg.min_conf)?;
        (state, Some(inputs.hierarchy))
    } else {
        if cfg.subset.is_some() {
            let h = load_hierarchy_for(cfg, || records.iter().map(|r| r.synset_wnid.clone()).collect())?;
            if let Some(subset) = resolve_subset(cfg, &h)? {
                records.retain(|r| subset.contains(&r.synset_wnid));
            }
        }
        let manifest = manifest_from_records(&records);
        (AggregateState::from_records(&manifest, &records, cfg.min_conf)?, None)
    };

    let table = state.top_level_table()?;
    let header = ReportHeader::new(cfg.hash(), versions_of(&records));
    let out = report_dir(cfg);
    let mut outputs = Vec::new();
    let mut emit = |name: &str, text: String| -> Result<(), PipelineError> {
        write_file(&out.join(name), &text)?;
        outputs.push(name.to_string());
        Ok(())
    };
    emit("top_level.csv", report::top_level_csv(&table, &header))?;
    emit(
        "top_level.md",
        report::top_level_markdown(&table, "Top-level statistics", &header),
    )?;
    let mut synsets_ranked = 0;
    if let Some(h) = &hierarchy {
        let filters = RankingFilters::new(cfg.min_images, cfg.min_det_rate).map_err(|reason| ConfigError::Invalid {
            key: "ranking".into(),
            reason,
        })?;
        let (male, female) = synset_gender_ranking(&state, Some(h), &filters);
        synsets_ranked = male.len();
        emit("ranking_male.csv", report::ranking_csv(&male, &header))?;
        emit("ranking_female.csv", report::ranking_csv(&female, &header))?;
        emit(
            "rankings.md",
            report::rankings_markdown(&male, &female, 12, "Gender-skewed synsets", &header),
        )?;
    }
    Ok(AggregateSummary {
        records_loaded: load.records,
        duplicates: load.duplicates,
        skipped_partial: load.skipped_partial,
        skipped_invalid: load.skipped_invalid,
        faces_counted: state.total_faces(),
        synsets_ranked,
        outputs,
    })
}

pub fn parse_strata(s: &str) -> Result<Strata, PipelineError> {
    match s.trim().to_ascii_lowercase().as_str() {
        "age" | "age-gender" | "age_gender" => Ok(Strata::AgeGender),
        "skin" | "skin-gender" | "skin_gender" => Ok(Strata::SkinGender),
        other => Err(PipelineError::Usage(format!("unknown strata {other:?} (age or skin)"))),
    }
}

fn strata_slug(s: Strata) -> &'static str {
    match s {
        Strata::AgeGender => "age",
        Strata::SkinGender => "skin",
    }
}

/// Stratified tables for every metric the predictions support. A metric is
/// computed when any prediction carries its field, and then every labeled
/// sample needs one.
pub fn cmd_evaluate(
    pred_files: &[PathBuf],
    label_file: &Path,
    strata: &[Strata],
    out_dir: &Path,
    header: &ReportHeader,
) -> Result<Vec<StratifiedTable>, PipelineError> {
    if pred_files.is_empty() {
        return Err(PipelineError::Usage("at least one prediction file is required".into()));
    }
    let samples = load_labels(label_file)?;
    let preds = load_predictions(pred_files)?;
    let invalid = |id: &str, reason: String| EvalError::InvalidSample {
        image_id: id.to_string(),
        reason,
    };

    let mut ages = BTreeMap::new();
    let mut genders = BTreeMap::new();
    let mut dets: BTreeMap<String, Vec<ScoredBox>> = BTreeMap::new();
    for (id, p) in &preds {
        if let Some(a) = p.age().map_err(|e| invalid(id, e))? {
            ages.insert(id.clone(), a);
        }
        if let Some(g) = p.gender().map_err(|e| invalid(id, e))? {
            genders.insert(id.clone(), g);
        }
        if let Some(d) = &p.detections {
            dets.insert(id.clone(), d.clone());
        }
    }

    let mut tables = Vec::new();
    for &st in strata {
        let slug = strata_slug(st);
        let mut run = |name: &str, title: &str, table: StratifiedTable| -> Result<(), PipelineError> {
            write_file(&out_dir.join(format!("{name}_{slug}.csv")), &report::stratified_csv(&table, header))?;
            write_file(
                &out_dir.join(format!("{name}_{slug}.md")),
                &report::stratified_markdown(&table, title, header),
            )?;
            tables.push(table);
            Ok(())
        };
        if !dets.is_empty() {
            run(
                "detection_ap",
                "Face detection AP",
                stratified_ap(&dets, &samples, st, DEFAULT_IOU_THRESHOLD)?,
            )?;
        }
        if !ages.is_empty() {
            run("age_mae", "Apparent age MAE (years)", stratified_mae(&ages, &samples, st)?)?;
        }
        if !genders.is_empty() {
            run(
                "gender_accuracy",
                "Gender classification accuracy",
                stratified_accuracy(&genders, &samples, st)?,
            )?;
        }
    }
    if tables.is_empty() {
        return Err(PipelineError::Usage(
            "predictions carry no detections, ages or gender fields".into(),
        ));
    }
    Ok(tables)
}

/// Compression score for each synset of the audited manifest.
pub fn cmd_diversity(cfg: &AuditConfig) -> Result<Vec<DiversityScore>, PipelineError> {
    let inputs = load_inputs(cfg)?;
    let mut by_synset: BTreeMap<&str, Vec<PathBuf>> = BTreeMap::new();
    for img in inputs.manifest.records().iter().filter(|r| r.is_present()) {
        if let Some(p) = img.local_path() {
            by_synset.entry(img.synset_wnid.as_str()).or_default().push(p);
        }
    }
    let mut scores = Vec::new();
    for (wnid, paths) in &by_synset {
        match diversity_score(wnid, paths, cfg.diversity_dims) {
            Ok(s) => scores.push(s),
            // A synset whose files all fail to decode is left out of the report.
            Err(DiversityError::NoDecodableImages(_)) => {}
            Err(e) => return Err(e.into()),
        }
    }
    let header = ReportHeader::new(cfg.hash(), "none");
    write_file(&report_dir(cfg).join("diversity.csv"), &report::diversity_csv(&scores, &header))?;
    Ok(scores)
}

/// Image keys recorded as done in a shard's progress log.
pub fn done_images(shard: &Path) -> Result<BTreeSet<String>, PipelineError> {
    Ok(read_done(&done_path(shard))?.into_iter().collect())
}

/// Path of a shard's progress log.
pub fn progress_log(shard: &Path) -> PathBuf {
    done_path(shard)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::load;

    fn fixture(n: usize, synsets: usize) -> (tempfile::TempDir, AuditConfig) {
        let dir = tempfile::tempdir().unwrap();
        let mut text = String::new();
        for i in 0..n {
            text.push_str(&format!("img{i:04}\tn{:08}\thttp://example.invalid/{i}.jpg\n", i % synsets));
        }
        fs::write(dir.path().join("manifest.tsv"), text).unwrap();
        let cfg = AuditConfig {
            manifest_path: Some(dir.path().join("manifest.tsv")),
            output_dir: dir.path().join("out"),
            timestamp: Some(1),
            min_images: 1,
            min_det_rate: 0.0,
            ..Default::default()
        };
        (dir, cfg)
    }

    #[test]
    fn annotate_then_aggregate() {
        let (_d, mut cfg) = fixture(40, 4);
        cfg.shard_count = 3;
        let s = cmd_annotate(&cfg).unwrap();
        assert_eq!(s.processed, 40);
        assert_eq!(s.shards.len(), 3);
        let a = cmd_aggregate(&cfg, None).unwrap();
        assert_eq!(a.duplicates, 0);
        assert!(a.outputs.contains(&"rankings.md".to_string()));
        let csv = fs::read_to_string(report_dir(&cfg).join("top_level.csv")).unwrap();
        assert!(csv.starts_with(&format!("# config_hash={}", cfg.hash())));
    }

    #[test]
    fn rerun_processes_nothing() {
        let (_d, cfg) = fixture(10, 2);
        cmd_annotate(&cfg).unwrap();
        let again = cmd_annotate(&cfg).unwrap();
        assert_eq!(again.processed, 0);
        assert_eq!(again.skipped, 10);
    }

    #[test]
    fn limit_defers_the_rest() {
        let (_d, mut cfg) = fixture(10, 2);
        cfg.limit = Some(4);
        let s = cmd_annotate(&cfg).unwrap();
        assert_eq!((s.processed, s.deferred), (4, 6));
        cfg.limit = None;
        assert_eq!(cmd_annotate(&cfg).unwrap().processed, 6);
    }

    #[test]
    fn empty_manifest_is_not_an_error() {
        let (_d, cfg) = fixture(0, 1);
        let s = cmd_annotate(&cfg).unwrap();
        assert_eq!(s.processed, 0);
        assert!(matches!(
            cmd_aggregate(&cfg, None),
            Err(PipelineError::Aggregate(AggregateError::EmptyAudit))
        ));
    }

    #[test]
    fn unreachable_worker_is_fatal() {
        let (_d, mut cfg) = fixture(3, 1);
        cfg.annotator = AnnotatorSpec::Worker {
            endpoint: Some("tcp://127.0.0.1:1".into()),
        };
        if std::env::var(crate::worker::ENDPOINT_ENV).is_ok() {
            return;
        }
        let err = cmd_annotate(&cfg).unwrap_err();
        assert_eq!(err.kind(), "AnnotatorUnavailable");
    }

    #[test]
    fn aggregate_without_shards() {
        let (_d, cfg) = fixture(3, 1);
        assert_eq!(cmd_aggregate(&cfg, None).unwrap_err().kind(), "NoShards");
    }

    #[test]
    fn records_only_aggregation() {
        let (_d, cfg) = fixture(30, 3);
        cmd_annotate(&cfg).unwrap();
        let shard = shard_path(&shard_dir(&cfg), 0);
        let (recs, _) = load(&shard, true).unwrap();
        let bare = AuditConfig {
            output_dir: cfg.output_dir.join("bare"),
            ..Default::default()
        };
        let a = cmd_aggregate(&bare, Some(&[shard])).unwrap();
        let gated = recs.iter().filter(|r| r.confidence >= 0.9).count() as u64;
        assert_eq!(a.faces_counted, gated);
        assert_eq!(a.outputs, vec!["top_level.csv", "top_level.md"]);
    }

    #[test]
    fn strata_names() {
        assert_eq!(parse_strata("age").unwrap(), Strata::AgeGender);
        assert_eq!(parse_strata("Skin").unwrap(), Strata::SkinGender);
        assert!(parse_strata("race").is_err());
    }
}

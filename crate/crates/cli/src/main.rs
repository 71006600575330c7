//! `audit` command line. Every subcommand prints one JSON object on stdout:
//! its summary on success, `{"status":"error","kind":..,"message":..}` on a
//! fatal error (exit code 1).

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use audit_core::config::SubsetSpec;
use audit_core::pipeline::{self, PipelineError};
use audit_core::report::ReportHeader;
use audit_core::AuditConfig;
use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

#[derive(Parser)]
#[command(name = "audit", version, about = "Demographic audit of synset-organized image datasets")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Annotate manifest images into JSONL shards (resumable).
    Annotate(AuditArgs),
    /// Build top-level tables and synset rankings from shards.
    Aggregate {
        #[command(flatten)]
        audit: AuditArgs,
        /// Shard files to read; defaults to every shard under <out>/shards.
        #[arg(long = "shard")]
        shard_files: Vec<PathBuf>,
    },
    /// Stratified benchmark evaluation of annotator predictions.
    Evaluate {
        /// Prediction JSONL files; later files override earlier fields.
        #[arg(long = "pred", required = true)]
        preds: Vec<PathBuf>,
        /// Label JSONL file.
        #[arg(long)]
        labels: PathBuf,
        /// Row attribute: age or skin (repeatable).
        #[arg(long = "strata", default_value = "age")]
        strata: Vec<String>,
        /// Output directory for the tables.
        #[arg(long, default_value = "eval-out")]
        out: PathBuf,
    },
    /// Compression-based visual diversity score per synset.
    Diversity(AuditArgs),
    /// Convert an external annotation dump into a shard file.
    ImportDump {
        #[arg(long)]
        dump: PathBuf,
        /// key = value field mapping file.
        #[arg(long)]
        mapping: PathBuf,
        /// Shard file to append to.
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct AuditArgs {
    /// key = value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Root wnid, or a file with one wnid per line.
    #[arg(long)]
    subset: Option<String>,
    #[arg(long)]
    hierarchy: Option<PathBuf>,
    #[arg(long)]
    glosses: Option<PathBuf>,
    #[arg(long)]
    min_conf: Option<f64>,
    #[arg(long)]
    min_images: Option<u64>,
    #[arg(long)]
    min_det_rate: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    shards: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// stub or worker.
    #[arg(long)]
    annotator: Option<String>,
    /// Worker endpoint (AUDIT_WORKER_ENDPOINT takes precedence).
    #[arg(long)]
    endpoint: Option<String>,
    /// Fixed record timestamp, for reproducible shards.
    #[arg(long)]
    timestamp: Option<u64>,
    /// Annotate at most this many new images.
    #[arg(long)]
    limit: Option<usize>,
    /// Any other setting, as key=value (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl AuditArgs {
    fn config(&self) -> Result<AuditConfig, PipelineError> {
        let mut cfg = match &self.config {
            Some(p) => AuditConfig::from_file(p)?,
            None => AuditConfig::default(),
        };
        let mut put = |key: &str, value: String| cfg.set(key, &value, None);
        let path = |p: &Path| p.display().to_string();
        if let Some(v) = &self.manifest {
            put("manifest", path(v))?;
        }
        if let Some(v) = &self.hierarchy {
            put("hierarchy.edges", path(v))?;
        }
        if let Some(v) = &self.glosses {
            put("hierarchy.glosses", path(v))?;
        }
        if let Some(v) = self.min_conf {
            put("gate.min_conf", v.to_string())?;
        }
        if let Some(v) = self.min_images {
            put("ranking.min_images", v.to_string())?;
        }
        if let Some(v) = self.min_det_rate {
            put("ranking.min_det_rate", v.to_string())?;
        }
        if let Some(v) = &self.out {
            put("output.dir", path(v))?;
        }
        if let Some(v) = self.shards {
            put("run.shards", v.to_string())?;
        }
        if let Some(v) = self.seed {
            put("run.seed", v.to_string())?;
        }
        if let Some(v) = &self.annotator {
            put("annotator", v.clone())?;
        }
        if let Some(v) = &self.endpoint {
            put("annotator.endpoint", v.clone())?;
        }
        if let Some(v) = self.timestamp {
            put("run.timestamp", v.to_string())?;
        }
        if let Some(v) = self.limit {
            put("run.limit", v.to_string())?;
        }
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| PipelineError::Usage(format!("--set expects KEY=VALUE, got {kv:?}")))?;
            put(k.trim(), v.trim().to_string())?;
        }
        if let Some(s) = &self.subset {
            cfg.subset = Some(if Path::new(s).is_file() {
                SubsetSpec::ListFile(PathBuf::from(s))
            } else {
                SubsetSpec::Root(s.clone())
            });
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn run(cli: Cli) -> Result<Value, PipelineError> {
    match cli.command {
        Command::Annotate(a) => Ok(json!(pipeline::cmd_annotate(&a.config()?)?)),
        Command::Aggregate { audit, shard_files } => {
            Ok(json!(pipeline::cmd_aggregate(&audit.config()?, Some(&shard_files))?))
        }
        Command::Evaluate {
            preds,
            labels,
            strata,
            out,
        } => {
            let strata = strata
                .iter()
                .map(|s| pipeline::parse_strata(s))
                .collect::<Result<Vec<_>, _>>()?;
            let header = ReportHeader::new("none", "predictions");
            let tables = pipeline::cmd_evaluate(&preds, &labels, &strata, &out, &header)?;
            Ok(json!({
                "tables": tables.iter().map(|t| json!({
                    "metric": t.metric_name,
                    "strata": t.strata,
                    "all": t.all().value,
                    "n": t.all().n,
                })).collect::<Vec<_>>(),
                "out": out,
            }))
        }
        Command::Diversity(a) => Ok(json!({ "scores": json!(pipeline::cmd_diversity(&a.config()?)?) })),
        Command::ImportDump { dump, mapping, out } => Ok(json!(audit_core::import::import_dump(&dump, &mapping, &out)?)),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(summary) => {
            let mut obj = json!({ "status": "ok" });
            if let (Some(o), Value::Object(s)) = (obj.as_object_mut(), summary) {
                o.extend(s);
            }
            println!("{obj}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            let kind = e.kind();
            let message = format!("{:#}", anyhow::Error::new(e));
            println!("{}", json!({ "status": "error", "kind": kind, "message": message }));
            ExitCode::FAILURE
        }
    }
}

use std::fs;
use std::path::Path;
use std::process::Command;

use serde_json::Value;

fn audit(args: &[&str]) -> (bool, Value) {
    let out = Command::new(env!("CARGO_BIN_EXE_audit"))
        .args(args)
        .env_remove("AUDIT_WORKER_ENDPOINT")
        .output()
        .expect("run audit");
    let stdout = String::from_utf8(out.stdout).unwrap();
    let v: Value = serde_json::from_str(stdout.trim())
        .unwrap_or_else(|e| panic!("stdout is not one JSON object ({e}): {stdout:?}"));
    (out.status.success(), v)
}

fn write_manifest(dir: &Path, n: usize) -> String {
    let text: String = (0..n)
        .map(|i| format!("img{i:03}\tn{:08}\thttp://example.invalid/{i}.jpg\n", i % 2))
        .collect();
    let p = dir.join("manifest.tsv");
    fs::write(&p, text).unwrap();
    p.display().to_string()
}

#[test]
fn annotate_then_aggregate() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_manifest(dir.path(), 60);
    let out = dir.path().join("out").display().to_string();
    let base = ["--manifest", &manifest, "--out", &out, "--timestamp", "1"];

    let (ok, v) = audit(&[&["annotate", "--shards", "2"], &base[..]].concat());
    assert!(ok, "{v}");
    assert_eq!(v["status"], "ok");
    assert_eq!(v["processed"], 60);

    // Rerunning resumes with nothing left.
    let (ok, v) = audit(&[&["annotate", "--shards", "2"], &base[..]].concat());
    assert!(ok);
    assert_eq!(v["processed"], 0);

    let (ok, v) = audit(&[&["aggregate"], &base[..]].concat());
    assert!(ok, "{v}");
    assert!(v["faces_counted"].as_u64().unwrap() > 0);
    let table = fs::read_to_string(Path::new(&out).join("report/top_level.csv")).unwrap();
    assert!(table.lines().any(|l| l.starts_with("All,") && l.contains(",100.00,")));
    assert!(Path::new(&out).join("report/ranking_male.csv").exists());
}

#[test]
fn unreachable_worker_is_a_json_error() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_manifest(dir.path(), 3);
    let out = dir.path().join("out").display().to_string();
    let (ok, v) = audit(&[
        "annotate",
        "--manifest",
        &manifest,
        "--out",
        &out,
        "--annotator",
        "worker",
        "--endpoint",
        "tcp://127.0.0.1:1",
    ]);
    assert!(!ok);
    assert_eq!(v["status"], "error");
    assert_eq!(v["kind"], "AnnotatorUnavailable");
}

#[test]
fn aggregate_without_shards_fails() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("empty").display().to_string();
    let (ok, v) = audit(&["aggregate", "--out", &out]);
    assert!(!ok);
    assert_eq!(v["kind"], "NoShards");
}

#[test]
fn evaluate_reports_missing_predictions() {
    let dir = tempfile::tempdir().unwrap();
    let labels = dir.path().join("labels.jsonl");
    fs::write(
        &labels,
        "{\"image_id\":\"a\",\"gt_age\":30,\"gt_gender\":\"female\",\"gt_skin_type\":\"II\"}\n\
         {\"image_id\":\"b\",\"gt_age\":70,\"gt_gender\":\"male\",\"gt_skin_type\":\"V\"}\n",
    )
    .unwrap();
    let preds = dir.path().join("pred.jsonl");
    let out = dir.path().join("eval").display().to_string();
    let args = |p: &Path| {
        vec![
            "evaluate".to_string(),
            "--pred".into(),
            p.display().to_string(),
            "--labels".into(),
            labels.display().to_string(),
            "--strata".into(),
            "age".into(),
            "--strata".into(),
            "skin".into(),
            "--out".into(),
            out.clone(),
        ]
    };

    fs::write(&preds, "{\"image_id\":\"a\",\"expected_age\":32,\"gender_score\":0.9}\n").unwrap();
    let a = args(&preds);
    let (ok, v) = audit(&a.iter().map(String::as_str).collect::<Vec<_>>());
    assert!(!ok);
    assert_eq!(v["kind"], "MissingPrediction");

    fs::write(
        &preds,
        "{\"image_id\":\"a\",\"expected_age\":32,\"gender_score\":0.9}\n\
         {\"image_id\":\"b\",\"expected_age\":60,\"gender_score\":0.1}\n",
    )
    .unwrap();
    let (ok, v) = audit(&a.iter().map(String::as_str).collect::<Vec<_>>());
    assert!(ok, "{v}");
    let tables = v["tables"].as_array().unwrap();
    assert_eq!(tables.len(), 4);
    let mae = tables.iter().find(|t| t["metric"] == "age_mae_years").unwrap();
    assert_eq!(mae["all"], 6.0);
    assert!(Path::new(&out).join("gender_accuracy_skin.csv").exists());
}

#[test]
fn import_dump_then_aggregate_records_only() {
    let dir = tempfile::tempdir().unwrap();
    let dump = dir.path().join("dump.csv");
    fs::write(
        &dump,
        "file,score,age,p_male\n\
         n01_1.jpg,0.99,33.5,0.9\n\
         n01_1.jpg,0.95,8.0,0.2\n\
         n02_7.jpg,0.50,40.0,0.4\n",
    )
    .unwrap();
    let mapping = dir.path().join("mapping.txt");
    fs::write(
        &mapping,
        "format = csv\nfield.image_id = file\nsynset.from_image_id = true\nfield.expected_age = age\n\
         field.gender_score = p_male\ngender_score.orientation = male\nfield.confidence = score\n",
    )
    .unwrap();
    let out = dir.path().join("out");
    let shard = out.join("shards/shard-0000.jsonl");
    let (ok, v) = audit(&[
        "import-dump",
        "--dump",
        &dump.display().to_string(),
        "--mapping",
        &mapping.display().to_string(),
        "--out",
        &shard.display().to_string(),
    ]);
    assert!(ok, "{v}");
    assert_eq!(v["rows"], 3);

    let (ok, v) = audit(&["aggregate", "--out", &out.display().to_string()]);
    assert!(ok, "{v}");
    assert_eq!(v["faces_counted"], 2);
}

#[test]
fn bad_set_is_a_usage_error() {
    let (ok, v) = audit(&["annotate", "--set", "nonsense"]);
    assert!(!ok);
    assert_eq!(v["kind"], "UsageError");
}

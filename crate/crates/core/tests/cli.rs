use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use prism_rec::cli::{schema_json, SchemaKind};

fn prism(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_prism"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("prism runs")
}

fn ok(out: &Output) -> String {
    assert_eq!(out.status.code(), Some(0), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

const CONFIG: &str = r#"{
  "data": {
    "interactions": "data/interactions.tsv",
    "image_embeddings": "data/image.prem",
    "text_embeddings": "data/text.prem"
  },
  "model": {"backbone": "attention", "dim": 8, "expert_hidden": 8, "reweight_hidden": 8,
            "blocks": 1, "heads": 2, "max_len": 8},
  "train": {"epochs": 2, "batch_size": 32, "seeds": [0]}
}"#;

/// A small synthetic dataset plus a config that trains on it.
fn workspace() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    ok(&prism(
        &["synth", "--scenario", "unique_img", "--out", "data", "--seed", "1", "--users", "60", "--items", "30"],
        dir.path(),
    ));
    std::fs::write(dir.path().join("config.json"), CONFIG).unwrap();
    dir
}

fn trained() -> (tempfile::TempDir, PathBuf) {
    let dir = workspace();
    ok(&prism(&["train", "--config", "config.json", "--seed", "3", "--out", "run"], dir.path()));
    let ckpt = dir.path().join("run/seed_3/model.ckpt");
    (dir, ckpt)
}

fn validate(schema: SchemaKind, instance: &Path) {
    let schema: serde_json::Value = serde_json::from_str(&schema_json(schema)).unwrap();
    let instance: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(instance).unwrap()).unwrap();
    let validator = jsonschema::validator_for(&schema).unwrap();
    let errors: Vec<String> = validator.iter_errors(&instance).map(|e| e.to_string()).collect();
    assert!(errors.is_empty(), "{errors:?}");
}

#[test]
fn train_writes_valid_report_and_manifest() {
    let (dir, _) = trained();
    let run = dir.path().join("run");
    for f in ["report.json", "timing.json", "metrics.csv", "loss_curves.csv", "manifest.json", "seed_3/model.json"] {
        assert!(run.join(f).is_file(), "{f}");
    }
    validate(SchemaKind::Report, &run.join("report.json"));
    validate(SchemaKind::Manifest, &run.join("manifest.json"));
    validate(SchemaKind::Config, &dir.path().join("config.json"));

    let manifest: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(run.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seeds"], serde_json::json!([3]));
    assert_eq!(manifest["inputs"].as_array().unwrap().len(), 3);
    assert!(manifest["inputs"][0]["sha256"].as_str().unwrap().len() == 64);
    let outputs: Vec<&str> = manifest["outputs"].as_array().unwrap().iter().map(|v| v.as_str().unwrap()).collect();
    assert!(outputs.contains(&"report.json") && outputs.contains(&"seed_3/model.ckpt"));

    let curves = std::fs::read_to_string(run.join("loss_curves.csv")).unwrap();
    assert_eq!(curves.lines().next().unwrap(), "seed,epoch,rec,uni_i,uni_t,syn,rdn,exp,total");
    assert_eq!(curves.lines().count(), 3);
}

#[test]
fn eval_gives_four_rows_and_is_repeatable() {
    let (dir, ckpt) = trained();
    let ckpt = ckpt.to_str().unwrap();
    let a = ok(&prism(&["eval", "--checkpoint", ckpt, "--data", "data"], dir.path()));
    let b = ok(&prism(&["eval", "--checkpoint", ckpt, "--data", "config.json"], dir.path()));
    assert_eq!(a, b);
    let rows: Vec<&str> = a.lines().collect();
    assert_eq!(rows.len(), 5);
    let mut names: Vec<String> = rows[1..].iter().map(|r| r.split(',').take(2).collect::<Vec<_>>().join("@")).collect();
    names.sort();
    assert_eq!(names, ["N@10", "N@20", "R@10", "R@20"]);

    ok(&prism(&["eval", "--checkpoint", ckpt, "--data", "data", "--out", "m.csv"], dir.path()));
    assert_eq!(std::fs::read_to_string(dir.path().join("m.csv")).unwrap(), a);
}

#[test]
fn weights_csv_covers_test_contexts() {
    let (dir, ckpt) = trained();
    let csv = ok(&prism(&["weights", "--checkpoint", ckpt.to_str().unwrap(), "--data", "data"], dir.path()));
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "user_id,position,item_id,w_uni_i,w_uni_t,w_syn,w_rdn");
    let mut n = 0;
    for l in lines {
        let w: Vec<f64> = l.split(',').skip(3).map(|v| v.parse().unwrap()).collect();
        assert_eq!(w.len(), 4);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-4);
        n += 1;
    }
    assert!(n > 0);
}

#[test]
fn corrupt_checkpoint_is_a_usage_error() {
    let (dir, ckpt) = trained();
    let mut bytes = std::fs::read(&ckpt).unwrap();
    bytes[..4].copy_from_slice(b"NOPE");
    std::fs::write(&ckpt, bytes).unwrap();
    let out = prism(&["eval", "--checkpoint", ckpt.to_str().unwrap(), "--data", "data"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("magic"));
}

#[test]
fn missing_field_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("c.json"), r#"{"data": {"image_embeddings": "a", "text_embeddings": "b"}}"#).unwrap();
    let out = prism(&["train", "--config", "c.json", "--out", "run"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("data.interactions"));
    assert!(!dir.path().join("run").exists());
}

#[test]
fn bad_arguments_are_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let out = prism(&["synth", "--scenario", "parity", "--out", "d"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(prism(&["frobnicate"], dir.path()).status.code(), Some(2));
    assert_eq!(prism(&["train"], dir.path()).status.code(), Some(2));
    assert_eq!(prism(&["--help"], dir.path()).status.code(), Some(0));
}

#[test]
fn train_is_byte_deterministic() {
    let dir = workspace();
    ok(&prism(&["train", "--config", "config.json", "--out", "a"], dir.path()));
    ok(&prism(&["train", "--config", "config.json", "--out", "b"], dir.path()));
    for f in ["report.json", "metrics.csv", "loss_curves.csv", "seed_0/model.ckpt", "seed_0/fusion_trace.csv"] {
        let a = std::fs::read(dir.path().join("a").join(f)).unwrap();
        let b = std::fs::read(dir.path().join("b").join(f)).unwrap();
        assert!(a == b, "{f} differs");
    }
}

#[test]
fn synth_is_deterministic_and_labelled() {
    let dir = tempfile::tempdir().unwrap();
    let args = |out: &'static str| ["synth", "--scenario", "synergy_xor", "--out", out, "--seed", "5", "--users", "400"];
    let first = ok(&prism(&args("a"), dir.path()));
    ok(&prism(&args("b"), dir.path()));
    assert!(first.contains("dominant interaction: synergy"), "{first}");
    for f in ["interactions.tsv", "image.prem", "text.prem", "truth.json", "experiment.json"] {
        assert_eq!(std::fs::read(dir.path().join("a").join(f)).unwrap(), std::fs::read(dir.path().join("b").join(f)).unwrap(), "{f}");
    }
}

#[test]
fn synth_output_trains_directly() {
    let dir = tempfile::tempdir().unwrap();
    ok(&prism(&["synth", "--scenario", "redundant", "--out", "d", "--users", "40", "--items", "20"], dir.path()));
    let cfg: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("d/experiment.json")).unwrap()).unwrap();
    let mut cfg = cfg.as_object().unwrap().clone();
    cfg.insert("train".into(), serde_json::json!({"epochs": 1, "seeds": [0]}));
    cfg.insert("model".into(), serde_json::json!({"backbone": "mean_pool", "dim": 8, "expert_hidden": 8, "reweight_hidden": 8, "max_len": 8}));
    std::fs::write(dir.path().join("d/experiment.json"), serde_json::to_string(&cfg).unwrap()).unwrap();
    ok(&prism(&["train", "--config", "d/experiment.json", "--out", "run"], dir.path()));
}

#[test]
fn gradcheck_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(&prism(&["gradcheck", "--seed", "4"], dir.path()));
    assert_eq!(out.lines().count(), 14);
    assert!(out.lines().all(|l| l.ends_with("PASS")));
}

#[test]
fn bench_reports_twelve_passes() {
    let dir = workspace();
    let out = ok(&prism(&["bench", "--config", "config.json", "--epochs", "1"], dir.path()));
    let report: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert_eq!(report["expert_passes_per_step"], 12.0);
    assert!(report["ratio"].as_f64().unwrap() > 0.0);
}

#[test]
fn checked_in_schemas_are_current() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../schemas");
    for (kind, file) in [
        (SchemaKind::Config, "config.schema.json"),
        (SchemaKind::Report, "report.schema.json"),
        (SchemaKind::Manifest, "manifest.schema.json"),
    ] {
        let on_disk = std::fs::read_to_string(root.join(file)).unwrap();
        assert_eq!(on_disk.trim_end(), schema_json(kind), "schemas/{file} is stale; regenerate with `prism schema`");
    }
}

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const SMALL: &str = r#"{
  "prior": {"num_marks_range": [1, 2], "window_end": 10.0, "base_kinds": ["Constant"]},
  "model": {"d_model": 8, "n_heads": 2, "n_layers_seq_encoder": 1, "n_layers_cross_encoder": 1,
            "n_layers_decoder": 1, "d_ff": 8, "max_marks": 3},
  "train": {"steps": 4, "warmup_steps": 1, "batch_instances": 2, "sequences_per_instance": 6,
            "targets_per_instance": 2, "checkpoint_every": 2},
  "finetune": {"steps": 2, "warmup_steps": 0, "batch_instances": 1, "sequences_per_instance": 4,
               "targets_per_instance": 1},
  "simulation": {"sequences_per_instance": 8},
  "eval": {"context_size": 5, "next_event_samples": 20, "grid_points": 5}
}"#;

fn fimpp(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fimpp"))
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("cfg.json"), SMALL).unwrap();
    ok(&fimpp(dir.path(), &["--config", "cfg.json", "--seed", "3", "--out", "data", "generate", "--instances", "2"]));
    dir
}

#[test]
fn generate_poisson_and_reproduce() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = r#"{"prior": {"num_marks_range": [1, 1], "base_kinds": ["Constant"], "sparsity": 1.0}}"#;
    fs::write(dir.path().join("p.json"), cfg).unwrap();
    for out in ["a", "b"] {
        ok(&fimpp(dir.path(), &["--config", "p.json", "--seed", "8", "--out", out, "generate", "--instances", "1"]));
    }
    let side: Value = serde_json::from_slice(&fs::read(dir.path().join("a/instances.json")).unwrap()).unwrap();
    assert_eq!(side.as_array().unwrap().len(), 1);
    let lines = fs::read_to_string(dir.path().join("a/sequences.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), 32);
    for f in ["manifest.json", "sequences.jsonl", "instances.json"] {
        assert_eq!(fs::read(dir.path().join("a").join(f)).unwrap(), fs::read(dir.path().join("b").join(f)).unwrap());
    }
}

#[test]
fn explosive_prior_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = r#"{"prior": {"sparsity": 0.0, "inhibition_prob": 0.0,
                  "ranges": {"kernel_weight": [5.0, 10.0]}}}"#;
    fs::write(dir.path().join("x.json"), cfg).unwrap();
    let out = fimpp(dir.path(), &["--config", "x.json", "--seed", "1", "--out", "d", "generate", "--instances", "1"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("unstable"));
}

#[test]
fn malformed_config_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("bad.json"), r#"{"train": {"stepz": 3}}"#).unwrap();
    let out = fimpp(dir.path(), &["--config", "bad.json", "--seed", "1", "--out", "r", "train"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("stepz"));
    let out = fimpp(dir.path(), &["train", "--bogus"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn train_zero_steps_writes_checkpoint() {
    let dir = setup();
    ok(&fimpp(dir.path(), &["--config", "cfg.json", "--seed", "1", "--out", "r", "train", "--steps", "0"]));
    assert!(dir.path().join("r/final/manifest.json").exists());
}

#[test]
fn resumed_training_is_bit_exact() {
    let dir = setup();
    let base = ["--config", "cfg.json", "--seed", "5", "--threads", "1"];
    ok(&fimpp(dir.path(), &[&base[..], &["--out", "full", "train"]].concat()));
    ok(&fimpp(
        dir.path(),
        &[&base[..], &["--out", "resumed", "--resume", "full/checkpoints/step-0000002", "train"]].concat(),
    ));
    for f in ["tensors.bin", "manifest.json"] {
        let a = fs::read(dir.path().join("full/final").join(f)).unwrap();
        let b = fs::read(dir.path().join("resumed/final").join(f)).unwrap();
        assert!(a == b, "{f} differs");
    }
    // a different seed does not resume someone else's run
    let out = fimpp(
        dir.path(),
        &["--config", "cfg.json", "--seed", "6", "--out", "x", "--resume", "full/checkpoints/step-0000002", "train"],
    );
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn finetune_writes_split() {
    let dir = setup();
    ok(&fimpp(dir.path(), &["--config", "cfg.json", "--seed", "1", "--out", "r", "train", "--steps", "0"]));
    ok(&fimpp(dir.path(), &["--config", "cfg.json", "--seed", "1", "--out", "ft", "finetune", "--checkpoint", "r/final", "--dataset", "data"]));
    let split: Value = serde_json::from_slice(&fs::read(dir.path().join("ft/split.json")).unwrap()).unwrap();
    assert_eq!(split["holdout_ids"].as_array().unwrap().len(), 4);
    assert!(dir.path().join("ft/final/tensors.bin").exists());
}

#[test]
fn infer_curves() {
    let dir = setup();
    ok(&fimpp(dir.path(), &["--config", "cfg.json", "--seed", "1", "--out", "r", "train", "--steps", "0"]));
    let out = fimpp(dir.path(), &["--config", "cfg.json", "infer", "--checkpoint", "r/final", "--context", "data", "--instance", "0", "--grid", "1"]);
    ok(&out);
    let text = String::from_utf8(out.stdout).unwrap();
    let rows: Vec<&str> = text.lines().collect();
    assert_eq!(rows[0], "t,mark,lambda_hat,lambda_true");
    let side: Value = serde_json::from_slice(&fs::read(dir.path().join("data/instances.json")).unwrap()).unwrap();
    let k = side[0]["num_marks"].as_u64().unwrap() as usize;
    assert_eq!(rows.len(), 1 + k);
    assert!(rows[1].split(',').all(|f| !f.is_empty()));

    let out = fimpp(
        dir.path(),
        &["--config", "cfg.json", "--out", "curve.csv", "infer", "--checkpoint", "r/final", "--context", "data",
          "--instance", "1", "--history", "seq:0@prefix:2", "--grid", "0:10:11"],
    );
    ok(&out);
    assert!(fs::read_to_string(dir.path().join("curve.csv")).unwrap().lines().count() > 11);

    let out = fimpp(dir.path(), &["infer", "--checkpoint", "missing", "--context", "data"]);
    assert_eq!(out.status.code(), Some(2));
    let out = fimpp(dir.path(), &["infer", "--checkpoint", "r/final", "--context", "data", "--history", "seq:99@prefix:1"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn eval_report_aggregates() {
    let dir = setup();
    ok(&fimpp(dir.path(), &["--config", "cfg.json", "--seed", "1", "--out", "r", "train", "--steps", "0"]));
    ok(&fimpp(dir.path(), &["--config", "cfg.json", "--seed", "2", "--out", "rep.json", "eval", "--checkpoint", "r/final", "--dataset", "data"]));
    let rep: Value = serde_json::from_slice(&fs::read(dir.path().join("rep.json")).unwrap()).unwrap();
    let rows = rep["per_instance"].as_array().unwrap();
    assert_eq!(rows.len(), 2);
    for key in ["model_nll_per_event", "nll_gap", "intensity_rmse", "next_event_mae", "next_mark_accuracy"] {
        let mean = rows.iter().map(|r| r[key].as_f64().unwrap()).sum::<f64>() / 2.0;
        assert!((rep["aggregate"][key].as_f64().unwrap() - mean).abs() < 1e-12, "{key}");
    }
}

#[test]
fn forecast_outputs() {
    let dir = setup();
    ok(&fimpp(dir.path(), &["--config", "cfg.json", "--seed", "1", "--out", "r", "train", "--steps", "0"]));
    let out = fimpp(dir.path(), &["--seed", "1", "forecast", "--checkpoint", "r/final", "--context", "data", "--samples", "0"]);
    ok(&out);
    let f: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(f["trajectories"].as_array().unwrap().is_empty());

    let out = fimpp(dir.path(), &["--seed", "1", "forecast", "--checkpoint", "r/final", "--context", "data", "--samples", "3", "--horizon", "2"]);
    ok(&out);
    let f: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(f["trajectories"].as_array().unwrap().len(), 3);
    assert_eq!(f["end"].as_f64(), Some(2.0));

    let out = fimpp(dir.path(), &["forecast", "--checkpoint", "r/final", "--context", "data", "--horizon", "-1"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_seed_is_drawn_and_printed() {
    let dir = setup();
    let out = fimpp(dir.path(), &["--config", "cfg.json", "--out", "g", "generate", "--instances", "1"]);
    ok(&out);
    let err = String::from_utf8(out.stderr).unwrap();
    let seed = err.lines().find_map(|l| l.strip_prefix("seed: ")).expect("seed printed");
    seed.parse::<u64>().unwrap();
    ok(&fimpp(dir.path(), &["--config", "cfg.json", "--seed", seed, "--out", "h", "generate", "--instances", "1"]));
    assert_eq!(
        fs::read(dir.path().join("g/sequences.jsonl")).unwrap(),
        fs::read(dir.path().join("h/sequences.jsonl")).unwrap()
    );
}

#[test]
fn import_csv_dataset() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("log.csv"), "sequence_id,time,mark\nu1,100.0,click\nu1,103.5,view\n").unwrap();
    ok(&fimpp(dir.path(), &["--out", "imp", "import-csv", "--input", "log.csv", "--time-unit", "s"]));
    let line = fs::read_to_string(dir.path().join("imp/sequences.jsonl")).unwrap();
    let rec: Value = serde_json::from_str(line.trim()).unwrap();
    assert_eq!(rec["events"].as_array().unwrap().len(), 2);
    assert_eq!(rec["T"].as_f64(), Some(3.5));
    assert_eq!(rec["K"].as_u64(), Some(2));
    let out = fimpp(dir.path(), &["--out", "imp2", "import-csv", "--input", "nope.csv"]);
    assert_eq!(out.status.code(), Some(2));
}

//! End-to-end command runs through the built binary on a tiny configuration.

use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const TINY: &str = "\
# Small enough for a few seconds per command.
model.layers = 1
model.dim = 16
model.n_max = 24
pretrain.steps = 20
data.corpus_size = 200
data.train_per_class = 6
data.test_per_class = 6
data.holdout_per_class = 6
data.checker_per_class = 6
data.real_baseline = 4
dp.epsilon = inf
admm.rho = 1
admm.t = 2
admm.inner_steps = 2
admm.init_steps = 2
admm.k = 5
admm.pool_per_class = 4
filter.r = 2
finetune.steps = 4
finetune.eval_every = 2
theory.instances = 40
";

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_textdistill"));
    c.env("RUST_LOG", "warn");
    c
}

fn run(dir: &Path, args: &[&str]) -> Output {
    let cfg = dir.join("tiny.conf");
    if !cfg.exists() {
        std::fs::write(&cfg, TINY).unwrap();
    }
    bin()
        .arg("--config")
        .arg(&cfg)
        .arg("--out")
        .arg(dir.join("out"))
        .args(args)
        .output()
        .unwrap()
}

fn ok(o: &Output) {
    assert!(
        o.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        o.status.code(),
        String::from_utf8_lossy(&o.stdout),
        String::from_utf8_lossy(&o.stderr)
    );
}

fn structured_error(o: &Output) -> Value {
    let text = String::from_utf8_lossy(&o.stderr);
    let line = text.lines().rev().find(|l| l.starts_with('{')).expect("json error line");
    serde_json::from_str(line).unwrap()
}

#[test]
fn unknown_key_and_bad_flag_are_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &["--set", "admm.nope=1", "theory"]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(structured_error(&o)["exit_code"], 1);
    let o = run(dir.path(), &["--set", "admm.t=many", "theory"]);
    assert_eq!(o.status.code(), Some(1));
    let o = bin().arg("--bogus").output().unwrap();
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn missing_input_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &["distill"]);
    assert_eq!(o.status.code(), Some(2));
    let e = structured_error(&o);
    assert_eq!(e["exit_code"], 2);
    assert!(e["error"].as_str().unwrap().contains("missing input"), "{e}");
}

#[test]
fn print_config_echoes_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &["--seed", "9", "--set", "admm.k=7", "--print-config", "theory"]);
    ok(&o);
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.lines().any(|l| l == "seed = 9"), "{text}");
    assert!(text.lines().any(|l| l == "admm.k = 7"));
    assert!(text.lines().any(|l| l == "admm.t = 2"));
}

#[test]
fn theory_passes_and_is_recorded() {
    let dir = tempfile::tempdir().unwrap();
    ok(&run(dir.path(), &["theory"]));
    let out = dir.path().join("out");
    let rep: Value = serde_json::from_str(&std::fs::read_to_string(out.join("theory_report.json")).unwrap()).unwrap();
    assert_eq!(rep["passed"], true);
    for check in ["lemma1", "theorem1", "corollary1"] {
        assert_eq!(rep["suite"][check]["violations"], 0);
    }
    assert_eq!(rep["config"]["theory.instances"], "40");
    let man: Value = serde_json::from_str(&std::fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(man["files"]["theory_report.json"]["command"], "theory");
}

#[test]
fn full_pipeline_with_zero_admm_rounds() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    ok(&run(p, &["toy-data"]));
    ok(&run(p, &["pretrain"]));
    ok(&run(p, &["--set", "admm.t=0", "distill"]));
    let out = p.join("out");
    let pool = std::fs::read_to_string(out.join("pool.jsonl")).unwrap();
    let records: Vec<Value> = pool.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(records.len(), 8);
    assert!(records.iter().all(|r| r["iters"] == 0));
    let synthetic = std::fs::read_to_string(out.join("synthetic.jsonl")).unwrap();
    assert!(synthetic.lines().count() <= 4);

    ok(&run(p, &["--set", "admm.t=0", "finetune"]));
    ok(&run(p, &["--set", "admm.t=0", "evaluate"]));
    ok(&run(p, &["--set", "admm.t=0", "theory"]));
    ok(&run(p, &["--set", "admm.t=0", "report"]));

    let report: Value = serde_json::from_str(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    let metrics = report["metrics"].to_string();
    for key in ["accuracy", "fid", "mia_advantage", "log_ppl", "nearest_real_mean"] {
        assert!(metrics.contains(key), "report lacks {key}: {metrics}");
    }
    assert!(!report["grad_error"].as_array().unwrap().is_empty());
    assert_eq!(report["config"]["admm.t"], "0");

    // Every file in the output directory is in the manifest and its hash
    // matches, apart from the manifest itself.
    let man: Value = serde_json::from_str(&std::fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    let files = man["files"].as_object().unwrap();
    for entry in std::fs::read_dir(&out).unwrap() {
        let name = entry.unwrap().file_name().to_string_lossy().into_owned();
        if name == "manifest.json" {
            continue;
        }
        let rec = files.get(&name).unwrap_or_else(|| panic!("{name} missing from manifest"));
        let bytes = std::fs::read(out.join(&name)).unwrap();
        assert_eq!(rec["sha256"], textdistill_cli::manifest::hex_sha256(&bytes), "{name}");
        assert_eq!(rec["bytes"], bytes.len() as u64);
    }
    let md = std::fs::read_to_string(out.join("report.md")).unwrap();
    assert!(md.contains("admm.t = 0"));
    assert!(md.contains("## Notes") && md.contains("scaled form"));
    assert_eq!(report["notes"].as_array().unwrap().len(), 4);
}

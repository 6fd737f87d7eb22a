use std::path::Path;
use std::process::{Command, Output};

fn lmoe(root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lmoe"))
        .args(args)
        .env("LMOE_OUTPUT_ROOT", root)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

const TRAIN: &str = r#"
seed = 3
output_dir = "run"
[model]
preset = "tiny"
instance = "gla"
pattern = "LN"
[train]
steps = 12
batch_size = 4
log_every = 4
[train.schedule]
lr = 0.01
min_lr = 0.001
[mqar]
pairs = 2
queries = 2
train_examples = 32
eval_examples = 8
[parallel]
sp = 2
"#;

#[test]
fn verify_default_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = lmoe(dir.path(), &["verify", "--report", "verify.json"]);
    assert!(out.status.success(), "{}", stdout(&out));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("verify.json")).unwrap()).unwrap();
    assert_eq!(report["passed"], true);
    assert_eq!(report["suites"].as_array().unwrap().len(), 7);
}

#[test]
fn verify_only_filters_suites() {
    let dir = tempfile::tempdir().unwrap();
    let out = lmoe(dir.path(), &["verify", "--only", "sp"]);
    assert!(out.status.success());
    let text = stdout(&out);
    assert_eq!(text.lines().count(), 1);
    assert!(text.starts_with("sp"));
    assert!(!lmoe(dir.path(), &["verify", "--only", "nope"]).status.success());
}

#[test]
fn injected_fault_is_caught() {
    let dir = tempfile::tempdir().unwrap();
    let out = lmoe(dir.path(), &["verify", "--only", "kernels", "--inject-fault", "chunk-decay"]);
    assert!(!out.status.success());
    assert!(stdout(&out).contains("FAIL"));
}

#[test]
fn gen_mqar_is_seeded_and_honors_output_root() {
    let dir = tempfile::tempdir().unwrap();
    let args = |out: &'static str| ["gen-mqar", "--seed", "5", "--pairs", "3", "--queries", "2", "--out", out];
    assert!(lmoe(dir.path(), &args("a/mqar.json")).status.success());
    assert!(lmoe(dir.path(), &args("b.json")).status.success());
    let a = std::fs::read_to_string(dir.path().join("a/mqar.json")).unwrap();
    assert_eq!(a, std::fs::read_to_string(dir.path().join("b.json")).unwrap());
    let data: serde_json::Value = serde_json::from_str(&a).unwrap();
    assert_eq!(data["examples"].as_array().unwrap().len(), 1000);
    let bad = lmoe(dir.path(), &["gen-mqar", "--seed", "1", "--pairs", "40", "--queries", "1", "--out", "x.json", "--vocab", "16"]);
    assert!(!bad.status.success());
}

#[test]
fn train_writes_outputs_reproducibly() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("train.toml");
    std::fs::write(&cfg, TRAIN).unwrap();
    let cfg = cfg.to_str().unwrap();
    let first = lmoe(dir.path(), &["train", "--config", cfg]);
    assert!(first.status.success(), "{}", String::from_utf8_lossy(&first.stderr));
    let run = dir.path().join("run");
    for f in ["metrics.jsonl", "loss_curve.tsv", "summary.json", "checkpoint.lmoe"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let curve = std::fs::read_to_string(run.join("loss_curve.tsv")).unwrap();
    assert_eq!(curve.lines().count(), 13);
    assert_eq!(std::fs::read_to_string(run.join("metrics.jsonl")).unwrap().lines().count(), 4);
    assert!(lmoe(dir.path(), &["train", "--config", cfg]).status.success());
    assert_eq!(std::fs::read_to_string(run.join("loss_curve.tsv")).unwrap(), curve);
}

#[test]
fn unknown_config_keys_fail() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[train]\nstepz = 3\n").unwrap();
    let out = lmoe(dir.path(), &["train", "--config", cfg.to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("stepz"));
}

#[test]
fn bench_writes_scaling_table() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bench.toml");
    std::fs::write(&cfg, "[bench]\ninstance = \"bla\"\nlengths = [16, 32]\ntoken_budget = 64\nhead_dim = 4\nchunk_size = 8\nrepeats = 1\n")
        .unwrap();
    let out = lmoe(dir.path(), &["bench", "--config", cfg.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let table = std::fs::read_to_string(dir.path().join("bench/bench.tsv")).unwrap();
    assert_eq!(table.lines().count(), 3);
    assert!(dir.path().join("bench/bench.json").exists());
}

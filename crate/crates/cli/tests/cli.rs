use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sha2::{Digest, Sha256};
use tempfile::TempDir;

const TINY: &str = r#"
scenario = "2p2"
[data]
num_train = 24
num_test = 12
[data.scene]
colours = ["red"]
[detector]
widths = [4, 8, 8, 16]
head_width = 8
[train]
epochs = 3
"#;

fn clod(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_clod"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = clod(args);
    assert!(
        out.status.success(),
        "clod {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn setup() -> (TempDir, PathBuf) {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("tiny.toml");
    std::fs::write(&cfg, TINY).unwrap();
    (dir, cfg)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn train(cfg: &Path, out: &Path, method: &str, extra: &[&str]) {
    let mut args = vec!["train-cl", "--config", s(cfg), "--out-dir", s(out), "--method", method];
    args.extend_from_slice(extra);
    ok(&args);
}

#[test]
fn same_seed_gives_identical_results_and_checkpoints() {
    let (dir, cfg) = setup();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    train(&cfg, &a, "yolo-lwf+ocdm", &["--seed", "3", "--memory-size", "4"]);
    train(&cfg, &b, "yolo-lwf+ocdm", &["--seed", "3", "--memory-size", "4"]);
    for f in ["results.csv", "memory.json", "checkpoints/task1.bin", "checkpoints/task2.bin"] {
        assert_eq!(
            std::fs::read(a.join(f)).unwrap(),
            std::fs::read(b.join(f)).unwrap(),
            "{f} differs"
        );
    }
    let csv = std::fs::read_to_string(a.join("results.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3, "{csv}");
}

#[test]
fn manifest_hashes_the_resolved_config_and_reruns_from_it() {
    let (dir, cfg) = setup();
    let a = dir.path().join("a");
    train(&cfg, &a, "lwf", &["--seed", "5"]);
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(a.join("manifest.json")).unwrap()).unwrap();
    let text = std::fs::read(a.join("config.toml")).unwrap();
    let hex: String = Sha256::digest(&text).iter().map(|b| format!("{b:02x}")).collect();
    assert_eq!(manifest["config_sha256"], hex.as_str());
    assert_eq!(manifest["seed"], 5);
    assert_eq!(manifest["command"], "train-cl");

    // the written config carries method and seed, so no flags are needed
    let b = dir.path().join("b");
    ok(&["train-cl", "--config", s(&a.join("config.toml")), "--out-dir", s(&b)]);
    assert_eq!(
        std::fs::read(a.join("results.csv")).unwrap(),
        std::fs::read(b.join("results.csv")).unwrap()
    );
}

#[test]
fn generated_layout_reproduces_in_memory_data() {
    let (dir, cfg) = setup();
    let data = dir.path().join("data");
    ok(&["gen-data", "--config", s(&cfg), "--out-dir", s(&data)]);
    for f in ["annotations/full.json", "annotations/test.json", "annotations/task1.json", "annotations/task2.json"] {
        assert!(data.join(f).is_file(), "{f} missing");
    }
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    train(&cfg, &a, "finetune", &[]);
    train(&cfg, &b, "finetune", &["--data", s(&data)]);
    assert_eq!(
        std::fs::read(a.join("results.csv")).unwrap(),
        std::fs::read(b.join("results.csv")).unwrap()
    );
}

#[test]
fn report_is_byte_identical_and_file_matches_stdout() {
    let (dir, cfg) = setup();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    train(&cfg, &a, "finetune", &[]);
    train(&cfg, &b, "yolo-lwf", &[]);
    let inputs = [s(&a.join("results.csv")).to_string(), s(&b.join("results.csv")).to_string()];
    let first = ok(&["report", "--input", &inputs[0], &inputs[1]]);
    let second = ok(&["report", "--input", &inputs[0], &inputs[1]]);
    assert_eq!(first, second);
    assert!(first.contains("finetune") && first.contains("yolo-lwf"), "{first}");
    let table = dir.path().join("table.txt");
    ok(&["report", "--input", &inputs[0], &inputs[1], "--output", s(&table)]);
    assert_eq!(std::fs::read_to_string(&table).unwrap(), first);
}

#[test]
fn plot_writes_one_svg_per_scenario() {
    let (dir, cfg) = setup();
    let a = dir.path().join("a");
    train(&cfg, &a, "finetune", &[]);
    let plots = dir.path().join("plots");
    ok(&["plot", "--input", s(&a.join("results.csv")), "--out-dir", s(&plots)]);
    let svg = std::fs::read_to_string(plots.join("plot_2p2.svg")).unwrap();
    assert!(svg.starts_with("<svg"));
}

#[test]
fn eval_reproduces_the_training_record() {
    let (dir, cfg) = setup();
    let a = dir.path().join("a");
    train(&cfg, &a, "yolo-lwf", &[]);
    let stdout = ok(&[
        "eval",
        "--config",
        s(&cfg),
        "--checkpoint",
        s(&a.join("checkpoints/task2.bin")),
        "--task",
        "2",
        "--out-dir",
        s(&dir.path().join("ev")),
    ]);
    let csv = std::fs::read_to_string(a.join("results.csv")).unwrap();
    let last: Vec<&str> = csv.lines().last().unwrap().split(',').collect();
    let expected = format!(
        "task 2: old {:.1} new {:.1} all {:.1}",
        last[4].parse::<f64>().unwrap(),
        last[5].parse::<f64>().unwrap(),
        last[6].parse::<f64>().unwrap()
    );
    assert_eq!(stdout.trim(), expected);
}

#[test]
fn unknown_method_lists_valid_names() {
    let (dir, cfg) = setup();
    let out = clod(&[
        "train-cl",
        "--config",
        s(&cfg),
        "--out-dir",
        s(&dir.path().join("x")),
        "--method",
        "bogus",
    ]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("bogus") && err.contains("yolo-lwf+ocdm") && err.contains("finetune"), "{err}");
}

#[test]
fn missing_checkpoint_is_a_clear_error() {
    let (dir, cfg) = setup();
    let out = clod(&[
        "eval",
        "--config",
        s(&cfg),
        "--checkpoint",
        s(&dir.path().join("absent.bin")),
        "--task",
        "1",
        "--out-dir",
        s(&dir.path().join("ev")),
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("checkpoint not found"));
}

#[test]
fn malformed_config_reports_position() {
    let (dir, _) = setup();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "scenario = \"4p4\"\nseed = [oops\n").unwrap();
    let out = clod(&["train-cl", "--config", s(&bad), "--out-dir", s(&dir.path().join("x"))]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("bad.toml") && err.contains("line 2"), "{err}");
}

#[test]
fn ablating_one_toggle_gives_two_rows() {
    let (dir, cfg) = setup();
    let out = dir.path().join("ab");
    let table = ok(&["ablate", "--config", s(&cfg), "--out-dir", s(&out), "--toggles", "ce"]);
    let csv = std::fs::read_to_string(out.join("ablation.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 2, "{csv}");
    assert!(rows[0].starts_with("false,true,true,true"), "{csv}");
    assert!(rows[1].starts_with("true,true,true,true"), "{csv}");
    assert_eq!(table.lines().count(), 3);

    let bad = clod(&["ablate", "--config", s(&cfg), "--out-dir", s(&out), "--toggles", "nope"]);
    assert!(!bad.status.success());
}

#[test]
fn sensitivity_reports_both_memory_sizes() {
    let (dir, cfg) = setup();
    let out = dir.path().join("se");
    let table = ok(&[
        "sensitivity",
        "--config",
        s(&cfg),
        "--out-dir",
        s(&out),
        "--memory-sizes",
        "6,3",
    ]);
    assert!(table.contains("m=6") && table.contains("m=3"), "{table}");
    let csv = std::fs::read_to_string(out.join("results.csv")).unwrap();
    assert!(csv.contains("yolo-lwf+ocdm@m6") && csv.contains("yolo-lwf+ocdm@m3"), "{csv}");

    let refused = clod(&[
        "sensitivity",
        "--config",
        s(&cfg),
        "--out-dir",
        s(&out),
        "--method",
        "finetune",
        "--memory-sizes",
        "6,3",
    ]);
    assert!(!refused.status.success());
}

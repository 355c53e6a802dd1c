use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = r#"
seed = 7
runs = 2

[data.sizes]
train = 400
dev = 100
test = 100

[train]
method = "ce"
hidden = 16
max_epochs = 3
batch_size = 32
"#;

fn faircon(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_faircon"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = faircon(args);
    assert!(
        out.status.success(),
        "faircon {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn write_config(dir: &Path, text: &str) -> String {
    let path = dir.join("exp.toml");
    fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn generate_writes_three_embedding_files() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out = dir.path().join("data");
    ok(&["generate", "--config", &cfg, "--out", s(&out)]);
    for (name, rows) in [("train", 400), ("dev", 100), ("test", 100)] {
        let text = fs::read_to_string(out.join(format!("{name}.csv"))).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("16,2"));
        assert_eq!(lines.count(), rows);
    }
}

#[test]
fn train_is_reproducible_and_summarises_runs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    ok(&["train", "--config", &cfg, "--out", s(&a)]);
    ok(&["train", "--config", &cfg, "--out", s(&b), "--workers", "2"]);

    let runs: Vec<_> = fs::read_dir(&a)
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.file_name().to_string_lossy().starts_with("run_"))
        .collect();
    assert_eq!(runs.len(), 2);
    let summary = json(&a.join("summary.json"));
    assert_eq!(summary["seeds"].as_array().unwrap().len(), 2);
    for key in ["accuracy", "gap", "leakage_h", "leakage_yhat"] {
        assert!(summary[key]["mean"].is_f64());
        assert!(summary[key]["std"].as_f64().unwrap() >= 0.0);
    }
    assert_eq!(
        fs::read(a.join("summary.json")).unwrap(),
        fs::read(b.join("summary.json")).unwrap()
    );
    for split in ["train", "dev", "test"] {
        assert!(a.join(format!("reps_{split}.csv")).exists());
    }
}

#[test]
fn single_run_has_zero_std() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out = dir.path().join("one");
    ok(&["train", "--config", &cfg, "--runs", "1", "--out", s(&out)]);
    let summary = json(&out.join("summary.json"));
    assert_eq!(summary["accuracy"]["std"].as_f64(), Some(0.0));
}

#[test]
fn unknown_keys_fail_with_their_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "seed = 1\n[train]\nhiden = 3\n");
    let out = faircon(&["train", "--config", &cfg]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("exp.toml:3"), "{err}");
    assert!(err.contains("hiden"), "{err}");
}

#[test]
fn validation_errors_name_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &format!("{SMALL}\n[train.loss]\ntau = -1.0\n"));
    let out = faircon(&["train", "--config", &cfg]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("train.loss.tau"));

    let out = faircon(&["train", "--config", &cfg, "--method", "bogus"]);
    assert!(!out.status.success());
}

#[test]
fn beta_sweep_includes_the_ce_point() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let sweep_dir = dir.path().join("sweep");
    let ce_dir = dir.path().join("ce");
    ok(&[
        "sweep", "--config", &cfg, "--method", "con", "--sweep", "beta=0,0.1,1", "--out", s(&sweep_dir),
    ]);
    ok(&["train", "--config", &cfg, "--runs", "1", "--out", s(&ce_dir)]);

    let sweep = json(&sweep_dir.join("sweep.json"));
    let points = sweep["points"].as_array().unwrap();
    assert_eq!(points.len(), 3);
    let ce = json(&ce_dir.join("run_7.json"));
    for key in ["accuracy", "gap", "leakage_h", "leakage_yhat"] {
        assert_eq!(points[0]["test"][key], ce["test"][key], "{key}");
    }

    // frontier rows are exactly the non-dominated (accuracy, leakage) points
    let pts: Vec<(f64, f64)> = points
        .iter()
        .map(|p| (p["test"]["accuracy"].as_f64().unwrap(), p["test"]["leakage_h"].as_f64().unwrap()))
        .collect();
    let frontier: Vec<usize> = sweep["frontier"].as_array().unwrap().iter().map(|v| v.as_u64().unwrap() as usize).collect();
    for (j, p) in pts.iter().enumerate() {
        let dominated = pts.iter().any(|q| q.0 > p.0 && q.1 < p.1);
        assert_eq!(frontier.contains(&j), !dominated);
    }
    let csv = fs::read_to_string(sweep_dir.join("frontier.csv")).unwrap();
    assert!(csv.starts_with("beta,accuracy,gap,leakage_h,leakage_yhat,frontier,selected\n"));
    assert_eq!(csv.lines().filter(|l| l.ends_with(",true")).count(), 1);
    assert!(sweep["selected"].as_u64().unwrap() < 3);
}

#[test]
fn sweep_axis_must_match_method() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out = faircon(&["sweep", "--config", &cfg, "--sweep", "lambda=0,1"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("sweep.axis"));
    let out = faircon(&["sweep", "--config", &cfg, "--method", "adv", "--sweep", "beta=0,1"]);
    assert!(!out.status.success());
}

#[test]
fn report_compiles_a_comparison_table() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let ce = dir.path().join("ce");
    let con = dir.path().join("con");
    ok(&["train", "--config", &cfg, "--out", s(&ce)]);
    ok(&["train", "--config", &cfg, "--method", "con", "--out", s(&con)]);
    let table = dir.path().join("comparison.csv");
    ok(&["report", s(&ce), s(&con), "--out", s(&table)]);
    let text = fs::read_to_string(&table).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "method,accuracy,gap,leakage_h,leakage_yhat,tradeoff,time");
    assert!(lines[1].starts_with("ce,") && lines[1].ends_with(",1.0×"), "{}", lines[1]);
    assert!(lines[2].starts_with("con,") && lines[2].contains('±'));
}

#[test]
fn evaluate_reproduces_a_saved_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let run = dir.path().join("run");
    ok(&["train", "--config", &cfg, "--runs", "1", "--out", s(&run)]);
    let eval = dir.path().join("eval");
    let ckpt = run.join("model_7.ckpt");
    ok(&["evaluate", "--config", &cfg, "--checkpoint", s(&ckpt), "--out", s(&eval), "--export-reps"]);
    let report = json(&eval.join("eval_test.json"));
    let record = json(&run.join("run_7.json"));
    assert_eq!(report["accuracy"], record["test"]["accuracy"]);
    assert_eq!(report["gap"], record["test"]["gap"]);
    assert_eq!(
        fs::read(eval.join("reps_test.csv")).unwrap(),
        fs::read(run.join("reps_test.csv")).unwrap()
    );
}

#[test]
fn training_from_embedding_files() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let data = dir.path().join("data");
    ok(&["generate", "--config", &cfg, "--out", s(&data)]);
    let files = write_config(
        dir.path(),
        &format!("{SMALL}\n[data.files]\ntrain = \"data/train.csv\"\ndev = \"data/dev.csv\"\ntest = \"data/test.csv\"\n"),
    );
    let from_files = dir.path().join("files");
    let synthetic = dir.path().join("synthetic");
    ok(&["train", "--config", &files, "--runs", "1", "--out", s(&from_files)]);
    ok(&["train", "--config", &cfg, "--runs", "1", "--out", s(&synthetic)]);
    assert_eq!(
        fs::read(from_files.join("summary.json")).unwrap(),
        fs::read(synthetic.join("summary.json")).unwrap()
    );
}

#[test]
fn malformed_embedding_file_reports_its_line() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("bad.csv"), "2,2\n0,1,0.5,0.5\n1,0,0.5\n").unwrap();
    fs::write(dir.path().join("ok.csv"), "2,2\n0,1,0.5,0.5\n1,0,0.5,1.0\n").unwrap();
    let cfg = write_config(
        dir.path(),
        "runs = 1\n[data.files]\ntrain = \"bad.csv\"\ndev = \"ok.csv\"\ntest = \"ok.csv\"\n",
    );
    let out = faircon(&["train", "--config", &cfg]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("bad.csv:3"), "{err}");
}

use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const TINY: [&str; 8] = [
    "--set",
    "epochs=2",
    "--set",
    "task.train_size=256",
    "--set",
    "task.val_size=128",
    "--set",
    "task.shifted_size=64",
];

fn klue(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_klue"))
        .args(args)
        .current_dir(cwd)
        .env("KLUE_LOG", "error")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn train(dir: &Path, out: &str, extra: &[&str]) -> Output {
    let mut args = vec!["train", "--out-dir", out];
    args.extend(TINY);
    args.extend(extra);
    klue(&args, dir)
}

fn read_json(p: &Path) -> Value {
    serde_json::from_slice(&std::fs::read(p).unwrap()).unwrap()
}

#[test]
fn rulegen_prints_counts_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let args = ["rulegen", "--T", "100", "--K", "20", "--l", "5", "--pneg", "1.0", "--seed", "1", "--out", "a.json"];
    let o = klue(&args, dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.lines().next().unwrap().contains("positive"));
    assert!(out.contains("concepts covered: 100 of 100"));
    let mut args2 = args;
    args2[args2.len() - 1] = "b.json";
    klue(&args2, dir.path());
    let a = std::fs::read(dir.path().join("a.json")).unwrap();
    assert_eq!(a, std::fs::read(dir.path().join("b.json")).unwrap());
    let doc: Value = serde_json::from_slice(&a).unwrap();
    assert_eq!(doc["header"]["tool"], "klue");
    assert_eq!(doc["header"]["config_hash"].as_str().unwrap().len(), 16);

    let o = klue(&["validate-rules", "--rules", "a.json"], dir.path());
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("satisfy all invariants"));
}

#[test]
fn rulegen_rejects_bad_parameters() {
    let dir = tempfile::tempdir().unwrap();
    let o = klue(&["rulegen", "--qmin", "4", "--qmax", "2", "--out", "r.json"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("q_max"), "{}", stderr(&o));
    let o = klue(&["rulegen", "--T", "abc", "--out", "r.json"], dir.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn validate_rules_flags_tampered_file() {
    let dir = tempfile::tempdir().unwrap();
    klue(&["rulegen", "--T", "12", "--K", "3", "--l", "2", "--out", "r.json"], dir.path());
    let p = dir.path().join("r.json");
    let text = std::fs::read_to_string(&p).unwrap();
    // Drop the last rule line; the converse pairing breaks.
    let mut lines: Vec<&str> = text.lines().collect();
    let n = lines.len();
    lines.remove(n - 2);
    let fixed = lines.join("\n").replace(",\n]}", "\n]}");
    std::fs::write(&p, fixed).unwrap();
    let o = klue(&["validate-rules", "--rules", "r.json"], dir.path());
    assert_eq!(o.status.code(), Some(1), "{}{}", stdout(&o), stderr(&o));
    assert!(stdout(&o).contains("violation"));
}

#[test]
fn gradcheck_targets_and_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    for t in ["fuzzy", "dku", "model", "loss"] {
        let o = klue(&["gradcheck", "--target", t, "--seed", "2"], dir.path());
        assert_eq!(o.status.code(), Some(0), "{t}: {}", stdout(&o));
        assert!(stdout(&o).contains("checks passed"));
        assert!(!stdout(&o).contains("FAIL"));
    }
    let o = klue(&["gradcheck", "--target", "bogus"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    let o = klue(&["frobnicate"], dir.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn train_writes_all_outputs_with_headers() {
    let dir = tempfile::tempdir().unwrap();
    let o = train(dir.path(), "run", &["--checkpoint-every", "1"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let run = dir.path().join("run");
    let summary = read_json(&run.join("summary.json"));
    let hash = summary["header"]["config_hash"].as_str().unwrap().to_string();
    assert_eq!(read_json(&run.join("config.json"))["header"]["config_hash"], hash.as_str());
    assert_eq!(read_json(&run.join("checkpoint.json"))["header"]["config_hash"], hash.as_str());
    assert!(run.join("checkpoints/epoch_001.json").exists());
    assert!(run.join("checkpoints/epoch_002.json").exists());
    let metrics = std::fs::read_to_string(run.join("metrics.ndjson")).unwrap();
    let first: Value = serde_json::from_str(metrics.lines().next().unwrap()).unwrap();
    assert_eq!(first["header"]["config_hash"], hash.as_str());
    assert_eq!(first["header"]["version"], env!("CARGO_PKG_VERSION"));
    // Header plus (train, val, shifted) per epoch.
    assert_eq!(metrics.lines().count(), 1 + 3 * 2);
    let rec: Value = serde_json::from_str(metrics.lines().nth(2).unwrap()).unwrap();
    for key in ["epoch", "split", "mAP_initial", "mAP_refined", "AUC_initial", "AUC_refined", "loss"] {
        assert!(rec.get(key).is_some(), "missing {key}");
    }

    // The written config reproduces the run.
    let o = klue(&["train", "--config", "run/config.json", "--out-dir", "again"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(
        std::fs::read(run.join("metrics.ndjson")).unwrap(),
        std::fs::read(dir.path().join("again/metrics.ndjson")).unwrap()
    );
}

#[test]
fn identical_flags_give_identical_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let a = train(dir.path(), "a", &["--set", "variant=v2"]);
    let b = train(dir.path(), "b", &["--set", "variant=v2"]);
    assert_eq!(a.stdout.len() > 0, true);
    for f in ["config.json", "metrics.ndjson", "summary.json", "checkpoint.json"] {
        let x = std::fs::read(dir.path().join("a").join(f)).unwrap();
        let y = std::fs::read(dir.path().join("b").join(f)).unwrap();
        assert_eq!(x, y, "{f} differs");
    }
    assert_eq!(stdout(&a).replace("in a", ""), stdout(&b).replace("in b", ""));
}

#[test]
fn inert_dku_matches_baseline_through_the_cli() {
    let dir = tempfile::tempdir().unwrap();
    let inert = ["--set", "dku.alpha_temp=0", "--set", "loss.uniq_class=0", "--set", "loss.uniq_concept=0", "--set", "loss.sat=0"];
    let mut base = inert.to_vec();
    base.extend(["--set", "variant=baseline"]);
    assert_eq!(train(dir.path(), "k", &inert).status.code(), Some(0));
    assert_eq!(train(dir.path(), "b", &base).status.code(), Some(0));
    let k = read_json(&dir.path().join("k/summary.json"));
    let b = read_json(&dir.path().join("b/summary.json"));
    for split in ["train", "val", "shifted"] {
        for m in ["mAP_refined", "AUC_refined"] {
            assert_eq!(k["final"][split][m], b["final"][split][m], "{split} {m}");
        }
    }
}

#[test]
fn train_reports_missing_rules_and_dimension_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let o = train(dir.path(), "x", &["--rules", "nope.json"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("nope.json"), "{}", stderr(&o));

    klue(&["rulegen", "--T", "30", "--K", "6", "--out", "r.json"], dir.path());
    let o = train(dir.path(), "x", &["--rules", "r.json"]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert!(err.contains("T=30") && err.contains("S=24"), "{err}");

    let o = train(dir.path(), "x", &["--set", "nope=1"]);
    assert_eq!(o.status.code(), Some(2));
    let o = train(dir.path(), "x", &["--set", "variant=v9"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn analysis_commands_run_on_trained_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(train(dir.path(), "b", &["--set", "variant=baseline"]).status.code(), Some(0));
    assert_eq!(train(dir.path(), "k", &[]).status.code(), Some(0));
    let mut args = vec!["hard-split", "--baseline", "b/checkpoint.json", "--model", "k/checkpoint.json", "--out", "hard.json"];
    args.extend(TINY);
    let o = klue(&args, dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let hard = read_json(&dir.path().join("hard.json"));
    assert_eq!(hard["hard_indices"].as_array().unwrap().len(), 13);
    assert_eq!(hard["models"].as_array().unwrap().len(), 2);
    assert!(hard["header"]["config_hash"].is_string());

    let mut args = vec!["concept-report", "--checkpoint", "k/checkpoint.json", "--permutations", "3", "--out", "cr.json"];
    args.extend(TINY);
    let o = klue(&args, dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let cr = read_json(&dir.path().join("cr.json"));
    assert_eq!(cr["recovery"]["matching"].as_array().unwrap().len(), 12);
    assert_eq!(cr["formulas"].as_array().unwrap().len(), 6);

    let mut args = vec!["eval", "--checkpoint", "k/checkpoint.json", "--split", "val", "--out", "ev.json"];
    args.extend(TINY);
    let o = klue(&args, dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let ev = read_json(&dir.path().join("ev.json"));
    let summary = read_json(&dir.path().join("k/summary.json"));
    assert_eq!(ev["splits"]["val"]["refined"]["map"], summary["final"]["val"]["mAP_refined"]);

    let o = klue(&["eval", "--checkpoint", "missing.json", "--out", "e.json"], dir.path());
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn export_curves_two_series_and_errors() {
    let dir = tempfile::tempdir().unwrap();
    train(dir.path(), "b", &["--set", "variant=baseline"]);
    train(dir.path(), "k", &[]);
    let o = klue(
        &["export-curves", "--metrics", "b/metrics.ndjson", "--metrics", "k/metrics.ndjson", "--out", "c.csv"],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let csv = std::fs::read_to_string(dir.path().join("c.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert!(lines[0].starts_with("# klue "));
    assert_eq!(lines[1], "epoch,variant,auc");
    assert_eq!(lines.len(), 2 + 4);
    assert!(lines[2].starts_with("0,baseline,"));
    assert!(lines[4].starts_with("0,v1,"));

    std::fs::write(dir.path().join("empty.ndjson"), "").unwrap();
    let o = klue(&["export-curves", "--metrics", "empty.ndjson", "--out", "e.csv"], dir.path());
    assert_eq!(o.status.code(), Some(0));
    let csv = std::fs::read_to_string(dir.path().join("e.csv")).unwrap();
    assert_eq!(csv.lines().nth(1), Some("epoch,variant,auc"));
    assert_eq!(csv.lines().count(), 2);

    let good = std::fs::read_to_string(dir.path().join("k/metrics.ndjson")).unwrap();
    let broken: String = good.lines().take(3).map(|l| format!("{l}\n")).collect::<String>() + "{\"epoch\": \n";
    std::fs::write(dir.path().join("bad.ndjson"), broken).unwrap();
    let o = klue(&["export-curves", "--metrics", "bad.ndjson", "--out", "x.csv"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("bad.ndjson:4:"), "{}", stderr(&o));

    let o = klue(&["export-curves", "--out", "x.csv"], dir.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn log_level_controls_stderr() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["train", "--out-dir", "r"];
    args.extend(TINY);
    let quiet = Command::new(env!("CARGO_BIN_EXE_klue"))
        .args(&args)
        .current_dir(dir.path())
        .env("KLUE_LOG", "error")
        .output()
        .unwrap();
    assert!(quiet.stderr.is_empty());
    let loud = Command::new(env!("CARGO_BIN_EXE_klue"))
        .args(&args)
        .current_dir(dir.path())
        .env("KLUE_LOG", "info")
        .output()
        .unwrap();
    assert!(String::from_utf8_lossy(&loud.stderr).contains("epoch 0"));
    assert_eq!(quiet.stdout, loud.stdout);
}

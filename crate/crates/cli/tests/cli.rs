use std::path::Path;
use std::process::{Command, Output};

fn canids(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_canids"))
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .args(args)
        .output()
        .expect("run canids")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = canids(dir, args);
    assert!(
        out.status.success(),
        "canids {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn manifest(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn csv_field(text: &str, row: &str, col: usize) -> f64 {
    text.lines()
        .find(|l| l.starts_with(row))
        .and_then(|l| l.split(',').nth(col))
        .and_then(|v| v.parse().ok())
        .unwrap_or_else(|| panic!("no {row}[{col}] in\n{text}"))
}

#[test]
fn simulate_is_reproducible_and_recorded() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    ok(p, &["simulate", "--attack", "dos", "--duration", "3", "--seed", "7", "-o", "a.log"]);
    ok(p, &["simulate", "--attack", "dos", "--duration", "3", "--seed", "7", "-o", "b.log"]);
    assert_eq!(std::fs::read(p.join("a.log")).unwrap(), std::fs::read(p.join("b.log")).unwrap());
    let m = manifest(&p.join("a.log.manifest.json"));
    assert_eq!(m["seed"], 7);
    assert_eq!(m["command"], "simulate");
    assert_eq!(m["config"]["attack"], "dos");

    let out = canids(p, &["simulate", "--attack", "dos", "--attack", "spoof", "-o", "c.log"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!p.join("c.log").exists());
}

#[test]
fn flags_override_config_file() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    std::fs::write(p.join("run.toml"), "seed = 3\n[simulate]\nattack = \"fuzzing\"\nduration = 2.0\n").unwrap();
    ok(p, &["--config", "run.toml", "simulate", "--seed", "9", "-o", "a.log"]);
    let m = manifest(&p.join("a.log.manifest.json"));
    assert_eq!(m["seed"], 9);
    assert_eq!(m["config"]["attack"], "fuzzing");
    assert_eq!(m["config"]["duration"], 2.0);

    std::fs::write(p.join("bad.toml"), "[simulate]\nspeed = 1\n").unwrap();
    assert!(!canids(p, &["--config", "bad.toml", "simulate", "-o", "b.log"]).status.success());
}

/// Simulated per-attack captures ingested into `data/`.
fn fixture(p: &Path) {
    for (attack, seed) in [("dos", "1"), ("fuzzing", "2"), ("spoof", "3")] {
        ok(p, &["simulate", "--attack", attack, "--duration", "4", "--seed", seed, "-o", &format!("{attack}.log")]);
    }
    ok(
        p,
        &[
            "ingest", "--capture", "dos=dos.log", "--capture", "fuzzing=fuzzing.log", "--capture", "spoof=spoof.log",
            "--seed", "1", "-o", "data",
        ],
    );
    for f in ["train.blk", "validation.blk", "test.blk", "manifest.json"] {
        assert!(p.join("data").join(f).exists(), "{f}");
    }
}

#[test]
fn train_eval_streamline_bench() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    fixture(p);
    let small = ["--dims", "40,32,16,4", "--lr", "0.01"];
    let train = |out: &str, epochs: &str| {
        let mut args = vec!["train", "--data", "data", "--bits", "2", "--epochs", epochs, "--seed", "1", "-o", out];
        args.extend(small);
        ok(p, &args);
    };
    train("a.model", "5");
    train("b.model", "5");
    assert_eq!(std::fs::read(p.join("a.model")).unwrap(), std::fs::read(p.join("b.model")).unwrap());
    let curve = std::fs::read_to_string(p.join("a.model.loss.csv")).unwrap();
    assert_eq!(curve.lines().count(), 6);

    train("zero.model", "0");
    assert!(p.join("zero.model").exists());
    assert_eq!(std::fs::read_to_string(p.join("zero.model.loss.csv")).unwrap().lines().count(), 1);

    ok(p, &["eval", "--model", "a.model", "--data", "data", "-o", "ev"]);
    let metrics = std::fs::read_to_string(p.join("ev/metrics.csv")).unwrap();
    assert!(csv_field(&metrics, "accuracy", 2) >= 0.25, "{metrics}");
    assert!(p.join("ev/confusion.csv").exists() && p.join("ev/manifest.json").exists());

    ok(p, &["streamline", "--model", "a.model", "-o", "a.pipe"]);
    assert_eq!(manifest(&p.join("a.pipe.manifest.json"))["config"]["check_blocks"], 1000);
    // The integer pipeline reproduces the model's predictions.
    ok(p, &["eval", "--pipeline", "a.pipe", "--data", "data", "-o", "ev_int"]);
    assert_eq!(
        std::fs::read_to_string(p.join("ev/confusion.csv")).unwrap(),
        std::fs::read_to_string(p.join("ev_int/confusion.csv")).unwrap()
    );

    for mode in ["per-block", "sliding"] {
        ok(p, &["bench", "--pipeline", "a.pipe", "--frames", "10000", "--mode", mode, "-o", "bench.csv"]);
    }
    let bench = std::fs::read_to_string(p.join("bench.csv")).unwrap();
    assert_eq!(bench.lines().count(), 3);
    assert!(csv_field(&bench, "per_block", 6) > 0.0);
    assert_eq!(csv_field(&bench, "per_message_sliding", 1), 9997.0);

    let out = canids(p, &["eval", "--model", "missing.model", "--data", "data"]);
    assert!(!out.status.success());
    let out = canids(p, &["train", "--data", "data", "--bits", "5", "-o", "x.model"]);
    assert!(!out.status.success());
    assert!(!p.join("x.model").exists());
}

#[test]
fn eval_from_confusion_table() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    std::fs::write(
        p.join("table.csv"),
        "true\\predicted,Benign,DoS,Fuzzing,SpoofRPM\n\
         Benign,103142,17,17,0\nDoS,27,23666,0,0\nFuzzing,78,0,28003,8\nSpoofRPM,0,0,0,25042\n",
    )
    .unwrap();
    ok(p, &["eval", "--from-confusion", "table.csv", "-o", "out"]);
    let m = std::fs::read_to_string(p.join("out/metrics.csv")).unwrap();
    assert!((csv_field(&m, "DoS", 4) * 100.0 - 99.90).abs() < 0.05);
    assert!((csv_field(&m, "Fuzzing", 3) * 100.0 - 99.69).abs() < 0.05);
    assert_eq!(csv_field(&m, "SpoofRPM", 3), 1.0);
    assert_eq!(csv_field(&m, "misclassifications", 1), 147.0);

    // A class missing from the data is flagged, not fatal.
    std::fs::write(p.join("partial.csv"), "Benign,5,0,0,0\nDoS,0,5,0,0\nFuzzing,0,0,0,0\nSpoofRPM,0,0,0,0\n").unwrap();
    let out = canids(p, &["eval", "--from-confusion", "partial.csv"]);
    assert!(out.status.success());
}

#[test]
fn cost_reports() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    ok(p, &["cost", "--bits", "3", "-o", "c3.csv"]);
    assert!((csv_field(&std::fs::read_to_string(p.join("c3.csv")).unwrap(), "cost", 6) - 0.686).abs() < 1e-3);
    ok(p, &["cost", "--bits", "4", "-o", "c4.csv"]);
    assert_eq!(csv_field(&std::fs::read_to_string(p.join("c4.csv")).unwrap(), "cost", 6), 1.0);
    assert!(p.join("c4.csv.manifest.json").exists());
}

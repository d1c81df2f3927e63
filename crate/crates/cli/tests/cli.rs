use std::path::Path;
use std::process::{Command, Output};

fn gda(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gda"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn gda")
}

fn ok(dir: &Path, args: &[&str]) -> serde_json::Value {
    let out = gda(dir, args);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{args:?}\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert_eq!(stdout.lines().count(), 1, "one summary line: {stdout}");
    serde_json::from_str(stdout.trim()).unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Tiny source and target domains plus a briefly trained model.
fn fixture(dir: &Path) {
    ok(dir, &["gen-data", "--out", "d", "--count", "24"]);
    ok(
        dir,
        &["train-source", "--data", "d/source", "--out", "m", "--epochs", "2", "--batch-size", "12"],
    );
}

#[test]
fn eval_writes_report_and_echoes_config() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    fixture(dir);
    let s = ok(dir, &["eval", "--model", "m/model.gdac", "--data", "d/source", "--report", "r.csv"]);
    assert_eq!(s["command"], "eval");
    let auc = s["auc"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&auc));
    let report = std::fs::read_to_string(dir.join("r.csv")).unwrap();
    let keys: Vec<&str> = report.lines().map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(&keys[..5], ["metric", "hter", "auc", "eer_threshold", "hter_at_0.5"]);
    let echoed: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.join("r.config.json")).unwrap()).unwrap();
    assert_eq!(echoed["model"], "m/model.gdac");
    assert_eq!(echoed["train"]["lambda_ph"], 0.01);

    // Stylized evaluation of the held-out target split through the sealed manifest.
    ok(dir, &["adapt", "--model", "m/model.gdac", "--data", "d/target", "--out", "a", "--steps", "2", "--batch-size", "8"]);
    let s = ok(
        dir,
        &["eval", "--model", "m/model.gdac", "--generator", "a/generator.gdac", "--data", "d/target", "--out", "e"],
    );
    assert_eq!(s["stylized"], true);
    assert_eq!(s["samples"], 12);
    for f in ["report.csv", "roc.csv", "config.json"] {
        assert!(dir.join("e").join(f).exists(), "{f}");
    }
    let log = std::fs::read_to_string(dir.join("a/adapt_log.csv")).unwrap();
    assert_eq!(log.lines().next().unwrap(), "step,stat,per,ent1,ent2,ph,total");
    assert_eq!(log.lines().count(), 3);
}

#[test]
fn commands_are_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    ok(dir, &["gen-data", "--out", "d", "--count", "16"]);
    for run in ["m1", "m2"] {
        ok(dir, &["train-source", "--data", "d/source", "--out", run, "--epochs", "1", "--batch-size", "8"]);
    }
    for f in ["model.gdac", "source_log.csv", "config.json"] {
        assert_eq!(
            std::fs::read(dir.join("m1").join(f)).unwrap(),
            std::fs::read(dir.join("m2").join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn specmix_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    ok(dir, &["gen-data", "--out", "d", "--count", "2"]);
    let args = |out: &'static str| {
        [
            "specmix",
            "--input",
            "d/target/images/target_00000.ppm",
            "--ref",
            "d/target/images/target_00001.ppm",
            "--eta",
            "0.1",
            "--seed",
            "3",
            "--out",
            out,
        ]
    };
    let a = ok(dir, &args("c.ppm"));
    let b = ok(dir, &args("c2.ppm"));
    assert_eq!(a["lambda"], b["lambda"]);
    let lambda = a["lambda"].as_f64().unwrap();
    assert!((0.0..0.1).contains(&lambda));
    assert_eq!(std::fs::read(dir.join("c.ppm")).unwrap(), std::fs::read(dir.join("c2.ppm")).unwrap());
    // λ = 0 returns the input up to quantization.
    ok(
        dir,
        &["specmix", "--input", "d/target/images/target_00000.ppm", "--ref", "d/target/images/target_00001.ppm", "--lambda", "0", "--out", "same.ppm"],
    );
    assert_eq!(
        std::fs::read(dir.join("same.ppm")).unwrap(),
        std::fs::read(dir.join("d/target/images/target_00000.ppm")).unwrap()
    );
}

#[test]
fn usage_errors_exit_one() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let out = gda(dir, &["eval", "--bogus"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("Usage"));
    assert_eq!(gda(dir, &["frobnicate"]).status.code(), Some(1));
    assert_eq!(gda(dir, &["--help"]).status.code(), Some(0));
    // Missing inputs are rejected before anything is written.
    let out = gda(dir, &["adapt", "--model", "nope.gdac", "--data", "d", "--out", "o"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!dir.join("o").exists());
}

#[test]
fn config_errors_are_located() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    std::fs::write(dir.join("bad.json"), "{\n  \"train\": {\n    \"lr\": ,\n  }\n}\n").unwrap();
    let out = gda(dir, &["grad-check", "--config", "bad.json"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("line 3 column 11"), "{}", stderr(&out));

    std::fs::write(dir.join("key.json"), r#"{"train": {"gamma": 2}}"#).unwrap();
    let out = gda(dir, &["grad-check", "--config", "key.json"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("gamma"));

    std::fs::write(dir.join("range.json"), r#"{"train": {"eta": 3.0}}"#).unwrap();
    let out = gda(dir, &["gen-data", "--config", "range.json", "--out", "x"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!dir.join("x").exists());
}

#[test]
fn flags_override_config_and_are_persisted() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    std::fs::write(
        dir.join("c.json"),
        r#"{"train": {"source_epochs": 3, "batch_size": 8}, "domains": [
            {"name": "s", "style": {"gain": [1, 1, 1], "offset": 0, "noise_std": 0.01},
             "count_per_class": 8, "seed": 4}]}"#,
    )
    .unwrap();
    ok(dir, &["gen-data", "--config", "c.json", "--out", "d"]);
    let s = ok(dir, &["train-source", "--config", "c.json", "--data", "d/s", "--epochs", "1", "--seed", "9", "--out", "m"]);
    assert_eq!(s["epochs"], 1);
    let echoed: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.join("m/config.json")).unwrap()).unwrap();
    assert_eq!(echoed["train"]["source_epochs"], 1);
    assert_eq!(echoed["train"]["batch_size"], 8);
    assert_eq!(echoed["train"]["seed"], 9);
}

#[test]
fn grad_check_passes_and_catches_a_flipped_rule() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let s = ok(dir, &["grad-check", "--trials", "2", "--seed", "5", "--out", "g1"]);
    assert_eq!(s["passed"], true);
    assert!(s["max_rel_error"].as_f64().unwrap() < 1e-4);
    ok(dir, &["grad-check", "--trials", "2", "--seed", "5", "--out", "g2"]);
    assert_eq!(
        std::fs::read(dir.join("g1/grad_check.csv")).unwrap(),
        std::fs::read(dir.join("g2/grad_check.csv")).unwrap()
    );

    let out = gda(dir, &["grad-check", "--trials", "2", "--inject-fault"]);
    assert_ne!(out.status.code(), Some(0));
    let err = stderr(&out);
    assert!(err.contains("injected/sign_flip") && err.contains("FAIL"), "{err}");
}

use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

fn specadv(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_specadv"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "status {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Briefly trained classifier shared by every test. A few dozen epochs are
/// needed before its logits respond to shape changes at all.
fn classifier() -> &'static PathBuf {
    static CLF: OnceLock<(tempfile::TempDir, PathBuf)> = OnceLock::new();
    &CLF.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("clf");
        ok(&specadv(&["train-classifier", "--set", "epochs=25", "--out", s(&out)]));
        (dir, out.join("classifier.bin"))
    })
    .1
}

#[test]
fn train_classifier_writes_its_artifacts_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str| {
        let out = dir.path().join(name);
        ok(&specadv(&["train-classifier", "--set", "epochs=1", "--seed", "4", "--out", s(&out)]));
        out
    };
    let a = run("a");
    let b = run("b");
    for f in ["config.toml", "run_log.jsonl", "classifier.bin", "train_report.csv", "summary.json"] {
        assert!(a.join(f).is_file(), "{f} missing");
    }
    for f in ["classifier.bin", "train_report.csv"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f} differs");
    }
    let cfg = std::fs::read_to_string(a.join("config.toml")).unwrap();
    assert!(cfg.contains("seed = 4"));
}

#[test]
fn single_attack_exports_meshes_and_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("opt");
    let base = [
        "attack-opt",
        "--classifier",
        s(classifier()),
        "--shape",
        "0",
        "--k",
        "20",
        "--set",
        "max_iters=200",
        "--set",
        "attack_lr=0.05",
        "--set",
        "c0=100.0",
        "--set",
        "c_rounds=2",
        "--set",
        "c_bisect=0",
    ];
    // shape 0 belongs to class 0, so target 0 is rejected
    let mut args = base.to_vec();
    args.extend(["--target", "0", "--out", s(&out)]);
    let bad = specadv(&args);
    assert_eq!(bad.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("true class"));

    let mut args = base.to_vec();
    args.extend(["--target", "1", "--out", s(&out)]);
    ok(&specadv(&args));
    let table = std::fs::read_to_string(out.join("attacks.csv")).unwrap();
    assert_eq!(table.lines().count(), 2, "{table}");
    assert!(table.lines().next().unwrap().starts_with("name,split,label,target,predicted,success"));
    let sub = out.join(table.lines().nth(1).unwrap().rsplit(',').next().unwrap());
    for f in ["original.off", "adversarial.off", "coeffs.csv"] {
        assert!(sub.join(f).is_file(), "{f} missing");
    }
    let coeffs = std::fs::read_to_string(sub.join("coeffs.csv")).unwrap();
    assert_eq!(coeffs.lines().count(), 21);
    assert!(out.join("metrics.csv").is_file());

    let mut args = base.to_vec();
    args.extend(["--target", "10", "--out", s(&out)]);
    assert_eq!(specadv(&args).status.code(), Some(2));

    let table_path = dir.path().join("table.csv");
    let eval = specadv(&["eval", "--run", &format!("opt={}", s(&out)), "--out", s(&table_path)]);
    ok(&eval);
    let t = std::fs::read_to_string(&table_path).unwrap();
    assert!(t.lines().any(|l| l.starts_with("opt,")));
    assert!(t.lines().last().unwrap().starts_with("reference,"));
}

#[test]
fn config_errors_exit_with_usage_code() {
    let dir = tempfile::tempdir().unwrap();
    let out = specadv(&["train-classifier", "--set", "epochz=3", "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("epochz"));

    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "learning_rate = 0.1\n").unwrap();
    let out = specadv(&["train-classifier", "--config", s(&cfg)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rate"));

    let out = specadv(&["attack-opt", "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(2), "missing classifier is a usage error");

    assert_eq!(specadv(&["no-such-command"]).status.code(), Some(2));
}

#[test]
fn eval_of_a_missing_directory_fails() {
    let dir = tempfile::tempdir().unwrap();
    let out = specadv(&[
        "eval",
        "--run",
        &format!("x={}", s(&dir.path().join("nope"))),
        "--out",
        s(&dir.path().join("t.csv")),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("attacks.csv"));
}

#[test]
fn generator_training_logs_epochs_and_resumes() {
    let dir = tempfile::tempdir().unwrap();
    let first = dir.path().join("m1");
    let common = ["--classifier", s(classifier()), "--set", "epochs=1", "--set", "k=8"];
    let mut args = vec!["attack-train", "--model", "model1", "--out", s(&first)];
    args.extend(common);
    ok(&specadv(&args));
    let epochs = std::fs::read_to_string(first.join("epochs.csv")).unwrap();
    let mut lines = epochs.lines();
    assert_eq!(lines.next().unwrap(), "epoch,split,misclass_pct,recon_loss,total_loss");
    assert_eq!(lines.count(), 4);
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(first.join("summary.json")).unwrap()).unwrap();
    assert!(summary["spiky"].is_boolean());
    assert!(first.join("attacks/attacks.csv").is_file());

    let second = dir.path().join("m1b");
    let ckpt = first.join("generator.bin");
    let mut args = vec!["attack-train", "--resume", s(&ckpt), "--out", s(&second)];
    args.extend(common);
    ok(&specadv(&args));
    // the resumed run starts where the first ended
    let last_first: Vec<String> = epochs.lines().skip(3).map(|l| l.split_once(',').unwrap().1.to_string()).collect();
    let resumed = std::fs::read_to_string(second.join("epochs.csv")).unwrap();
    let first_resumed: Vec<String> =
        resumed.lines().skip(1).take(2).map(|l| l.split_once(',').unwrap().1.to_string()).collect();
    assert_eq!(last_first, first_resumed);

    let mut args = vec!["attack-train", "--model", "model2", "--resume", s(&ckpt), "--out", s(&second)];
    args.extend(common);
    assert_eq!(specadv(&args).status.code(), Some(2));
}

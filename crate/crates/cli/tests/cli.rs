use std::path::Path;
use std::process::{Command, Output};

fn medrec(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_medrec"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn text(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn help_and_version_exit_zero() {
    assert_eq!(code(&medrec(&["--help"])), 0);
    assert_eq!(code(&medrec(&["--version"])), 0);
    assert_eq!(code(&medrec(&["train", "--help"])), 0);
}

#[test]
fn usage_and_validation_errors_exit_one() {
    assert_eq!(code(&medrec(&["no-such-command"])), 1);
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing");
    let o = medrec(&["build-kg", "--data", p(&missing)]);
    assert_eq!(code(&o), 1);
    let data = dir.path().join("data");
    assert_eq!(code(&medrec(&["generate-data", "--out", p(&data), "--patients", "12"])), 0);
    let o = medrec(&["train", "--data", p(&data), "--out", p(&dir.path().join("r")), "--set", "heads=3"]);
    assert_eq!(code(&o), 1, "{}", String::from_utf8_lossy(&o.stderr));
    let o = medrec(&["train", "--data", p(&data), "--out", p(&dir.path().join("r")), "--set", "bogus=1"]);
    assert_eq!(code(&o), 1);
    let bad = dir.path().join("bad.ckpt");
    std::fs::write(&bad, "not a checkpoint").unwrap();
    let o = medrec(&["evaluate", "--data", p(&data), "--checkpoint", p(&bad)]);
    assert_eq!(code(&o), 1);
}

#[test]
fn full_pipeline_writes_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let run = dir.path().join("run");
    let o = medrec(&["generate-data", "--out", p(&data), "--patients", "15", "--seed", "3"]);
    assert_eq!(code(&o), 0);
    for f in ["vocab.tsv", "cohort.tsv", "ontology.tsv", "semantic.tsv", "ddi.tsv", "split.tsv"] {
        assert!(data.join(f).exists(), "{f}");
    }

    let o = medrec(&["build-kg", "--data", p(&data)]);
    assert_eq!(code(&o), 0);
    assert!(!text(&o).is_empty());

    let o = medrec(&["train", "--data", p(&data), "--out", p(&run), "--epochs", "2", "--set", "embed_dim=16"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let snapshot = std::fs::read_to_string(run.join("config.resolved.txt")).unwrap();
    assert!(snapshot.contains("embed_dim = 16") && snapshot.contains("epochs = 2"), "{snapshot}");
    let log = std::fs::read_to_string(run.join("train.log")).unwrap();
    assert_eq!(log.lines().count(), 3);
    let ckpt = run.join("model.ckpt");
    assert!(ckpt.exists());

    let report = dir.path().join("eval/report.json");
    let o = medrec(&[
        "evaluate", "--data", p(&data), "--checkpoint", p(&ckpt), "--json", p(&report), "--references",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let table = text(&o);
    assert!(table.contains("Jaccard") && table.contains("Ground Truth"), "{table}");
    assert!(report.exists() && dir.path().join("eval/config.resolved.txt").exists());

    let recs = dir.path().join("recs.jsonl");
    let o = medrec(&["recommend", "--data", p(&data), "--checkpoint", p(&ckpt), "--out", p(&recs)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(std::fs::read_to_string(&recs).unwrap().lines().count(), 15);

    let sweep = dir.path().join("sweep");
    let o = medrec(&[
        "tau-sweep", "--data", p(&data), "--out", p(&sweep), "--taus", "0.05,0.1", "--epochs", "1", "--set", "embed_dim=8",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(std::fs::read_to_string(sweep.join("sweep.csv")).unwrap().lines().count(), 3);
}

#[test]
fn runtime_failures_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert_eq!(code(&medrec(&["generate-data", "--out", p(&data), "--patients", "12"])), 0);
    let o = medrec(&[
        "train", "--data", p(&data), "--out", p(&dir.path().join("r")), "--epochs", "3", "--set", "lr=1e300", "--set", "embed_dim=8",
    ]);
    assert_eq!(code(&o), 2, "{}", String::from_utf8_lossy(&o.stderr));
}

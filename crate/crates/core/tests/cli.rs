use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn sidkit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sidkit"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = sidkit(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(dir: &Path, name: &str) -> String {
    dir.join(name).to_str().unwrap().to_string()
}

fn gen_toy(dir: &Path) {
    ok(&[
        "gen-toy", "--items", "300", "--clusters", "10", "--dim", "8", "--train-sequences", "200",
        "--test-sequences", "40", "--history-len", "4", "--seed", "5", "--out-dir", dir.to_str().unwrap(),
    ]);
}

fn tokenize(dir: &Path, tag: &str) {
    ok(&[
        "tokenize", "--catalog", &p(dir, "catalog.tsv"), "--input-dim", "8", "--quantizer", "rqkmeans",
        "--levels", "4,4,4", "--seed", "1", "--out-assignments", &p(dir, &format!("raw{tag}.tsv")),
        "--out-model", &p(dir, &format!("model{tag}.txt")),
    ]);
}

#[test]
fn pipeline_runs_and_reruns_identically() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    gen_toy(d);
    tokenize(d, "");
    tokenize(d, "2");
    assert_eq!(fs::read(d.join("raw.tsv")).unwrap(), fs::read(d.join("raw2.tsv")).unwrap());
    assert_eq!(fs::read(d.join("model.txt")).unwrap(), fs::read(d.join("model2.txt")).unwrap());

    for policy in ["noco", "knn", "random", "merge"] {
        ok(&[
            "collide", "--catalog", &p(d, "catalog.tsv"), "--input-dim", "8", "--model", &p(d, "model.txt"),
            "--policy", policy, "--sigma", "2", "--out", &p(d, &format!("{policy}.tsv")),
        ]);
    }
    let stdout = ok(&[
        "eval-sid", "--catalog", &p(d, "catalog.tsv"), "--input-dim", "8", "--assignments", &p(d, "knn.tsv"),
        "--levels", "4,4,4", "--labels", &p(d, "labels.tsv"), "--sequences", &p(d, "test.tsv"),
        "--hr-k", "5", "--csv", &p(d, "metrics.csv"),
    ]);
    assert!(stdout.lines().any(|l| l.starts_with("gini\t")), "{stdout}");
    assert!(stdout.contains("embedding_hitrate@5\t"), "{stdout}");
    assert!(stdout.contains("style_consistency\t"), "{stdout}");

    ok(&[
        "train-scorer", "--assignments", &p(d, "noco.tsv"), "--levels", "4,4,4", "--sequences",
        &p(d, "train.tsv"), "--out", &p(d, "scorer.txt"),
    ]);
    let hr = ok(&[
        "eval-hr", "--scorer", &p(d, "scorer.txt"), "--assignments", &p(d, "noco.tsv"), "--sequences",
        &p(d, "test.tsv"), "--beam", "4,8,16", "--k", "1,5,20", "--stage", "toy",
    ]);
    let lines: Vec<&str> = hr.lines().collect();
    assert_eq!(lines[0], "stage,K,value");
    assert_eq!(lines.len(), 4);
    assert!(lines[1].starts_with("toy,1,"));
    let values: Vec<f64> = lines[1..].iter().map(|l| l.rsplit(',').next().unwrap().parse().unwrap()).collect();
    assert!(values.windows(2).all(|w| w[0] <= w[1]), "{values:?}");

    ok(&[
        "retrieve", "--scorer", &p(d, "scorer.txt"), "--assignments", &p(d, "noco.tsv"), "--sequences",
        &p(d, "test.tsv"), "--beam", "4,8,16", "--top", "3", "--out", &p(d, "retrieved.tsv"),
    ]);
    let retrieved = fs::read_to_string(d.join("retrieved.tsv")).unwrap();
    assert!(retrieved.lines().count() >= 40 * 3);

    ok(&[
        "build-pretrain-corpus", "--assignments", &p(d, "noco.tsv"), "--levels", "4,4,4", "--sequences",
        &p(d, "train.tsv"), "--out", &p(d, "corpus.tsv"),
    ]);
    let corpus = fs::read_to_string(d.join("corpus.tsv")).unwrap();
    let first = corpus.lines().next().unwrap();
    let (pv, text) = first.split_once('\t').unwrap();
    assert_eq!(pv, "train0");
    assert!(text.starts_with('C'));
}

#[test]
fn uniform_occupancy_prints_zero_gini() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let mut catalog = String::new();
    let mut assignments = String::new();
    for (i, sid) in ["[0,0]", "[0,1]", "[1,0]", "[1,1]"].iter().enumerate() {
        catalog.push_str(&format!("x{i}\t{i}.0,1.0\n"));
        assignments.push_str(&format!("x{i}\t{sid}\n"));
    }
    fs::write(d.join("catalog.tsv"), catalog).unwrap();
    fs::write(d.join("sids.tsv"), assignments).unwrap();
    let out = ok(&[
        "eval-sid", "--catalog", &p(d, "catalog.tsv"), "--input-dim", "2", "--assignments", &p(d, "sids.tsv"),
        "--levels", "2,2",
    ]);
    assert!(out.lines().any(|l| l == "gini\t0.0000"), "{out}");
    assert!(out.lines().any(|l| l == "utilization\t100.0000"), "{out}");
}

#[test]
fn exit_codes() {
    assert_eq!(sidkit(&["--help"]).status.code(), Some(0));
    assert_eq!(sidkit(&["collide", "--bogus"]).status.code(), Some(1));
    assert_eq!(sidkit(&["gen-toy", "--items", "10", "--clusters", "2", "--out-dir", "x"]).status.code(), Some(1));
    let dir = tempfile::tempdir().unwrap();
    let missing = p(dir.path(), "missing.tsv");
    let out = sidkit(&[
        "tokenize", "--catalog", &missing, "--quantizer", "rqkmeans", "--levels", "4,4", "--seed", "1",
        "--out-assignments", &p(dir.path(), "a.tsv"), "--out-model", &p(dir.path(), "m.txt"),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.tsv"));
    assert!(!dir.path().join("m.txt").exists());

    fs::write(dir.path().join("bad.tsv"), "x0\t1.0,zz\n").unwrap();
    let out = sidkit(&[
        "tokenize", "--catalog", &p(dir.path(), "bad.tsv"), "--input-dim", "2", "--quantizer", "rqkmeans",
        "--levels", "4,4", "--seed", "1", "--out-assignments", &p(dir.path(), "a.tsv"),
        "--out-model", &p(dir.path(), "m.txt"),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

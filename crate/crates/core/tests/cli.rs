use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use hsd::eval::{load_predictions, MetricsReport};
use hsd::textio::load_posts;

fn hsd(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hsd")).args(args).current_dir(dir).env("RUST_LOG", "warn").output().unwrap()
}

fn ok(args: &[&str], dir: &Path) -> String {
    let out = hsd(args, dir);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

#[test]
fn synthetic_generation_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&["gen-synthetic", "--seed", "4", "--users", "10", "--out", "a"], d);
    ok(&["gen-synthetic", "--seed", "4", "--users", "10", "--out", "b"], d);
    ok(&["gen-synthetic", "--seed", "5", "--users", "10", "--out", "c"], d);
    for f in ["train.jsonl", "test.jsonl", "history.jsonl", "pool.jsonl", "embeddings.txt"] {
        assert_eq!(fs::read(d.join("a").join(f)).unwrap(), fs::read(d.join("b").join(f)).unwrap(), "{f}");
    }
    assert_ne!(fs::read(d.join("a/train.jsonl")).unwrap(), fs::read(d.join("c/train.jsonl")).unwrap());
}

#[test]
fn ingest_maps_labels_and_rejects_unknown_ones() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(
        d.join("in.csv"),
        "id,user,text,label\n1,u1,\"hello, @bob\",racism\n2,u1,just a post,none\n3,u2,no label,\n",
    )
    .unwrap();
    ok(&["ingest", "--input", "in.csv", "--output", "out.jsonl"], d);
    let posts = load_posts(&d.join("out.jsonl")).unwrap();
    let labels: Vec<Option<u8>> = posts.iter().map(|p| p.label).collect();
    assert_eq!(labels, vec![Some(1), Some(0), None]);
    assert_eq!(posts[0].text, "hello, @bob");

    fs::write(d.join("bad.csv"), "id,user,text,label\n1,u1,hi,maybe\n").unwrap();
    let out = hsd(&["ingest", "--input", "bad.csv", "--output", "bad.jsonl"], d);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("maybe"));
}

#[test]
fn neighbor_count_is_restricted() {
    let dir = tempfile::tempdir().unwrap();
    let out =
        hsd(&["train", "--run", "r", "--train", "t.jsonl", "--mode", "intra-rl", "--neighbors", "30"], dir.path());
    assert!(!out.status.success());
}

#[test]
fn pipeline_runs_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&["gen-synthetic", "--seed", "1", "--users", "12", "--out", "data"], d);
    ok(
        &[
            "pretrain",
            "--run",
            "run",
            "--train",
            "data/train.jsonl",
            "--history",
            "data/history.jsonl",
            "--embeddings",
            "data/embeddings.txt",
            "--vocab-from",
            "data/pool.jsonl",
            "--epochs",
            "2",
        ],
        d,
    );
    ok(&["build-index", "--pool", "data/pool.jsonl", "--out", "index.json"], d);

    let out = hsd(&["train", "--run", "run", "--train", "data/train.jsonl", "--mode", "intra-rl"], d);
    assert!(!out.status.success(), "inter modes need an index");

    let train = |mode: &str| {
        ok(
            &[
                "train",
                "--run",
                "run",
                "--mode",
                mode,
                "--train",
                "data/train.jsonl",
                "--history",
                "data/history.jsonl",
                "--index",
                "index.json",
                "--epochs",
                "1",
                "--neighbors",
                "50",
            ],
            d,
        )
    };
    train("intra");
    train("intra-rl");
    for f in ["configs/baseline.json", "configs/intra-rl.json", "checkpoints/intra-rl.ckpt", "cache/intra-rl.json"] {
        assert!(d.join("run").join(f).exists(), "{f}");
    }

    let predict = |mode: &str, out: &str| {
        ok(
            &[
                "predict",
                "--run",
                "run",
                "--mode",
                mode,
                "--input",
                "data/test.jsonl",
                "--history",
                "data/history.jsonl",
                "--index",
                "index.json",
                "--out",
                out,
            ],
            d,
        )
    };
    predict("baseline", "base.jsonl");
    predict("intra-rl", "rl.jsonl");
    predict("intra-rl", "rl2.jsonl");
    assert_eq!(fs::read(d.join("rl.jsonl")).unwrap(), fs::read(d.join("rl2.jsonl")).unwrap());
    let test = load_posts(&d.join("data/test.jsonl")).unwrap();
    let preds = load_predictions(&d.join("rl.jsonl")).unwrap();
    assert_eq!(preds.len(), test.len());
    assert!(preds.iter().all(|p| (p.scores[0] + p.scores[1] - 1.0).abs() < 1e-9));

    let out = hsd(&["evaluate", "--gold", "data/test.jsonl", "--pred", "rl=rl.jsonl", "--pred", "rl2.jsonl"], d);
    assert!(!out.status.success(), "identical predictions leave McNemar undefined");
    assert!(String::from_utf8_lossy(&out.stdout).contains("rl2"));

    let out = hsd(
        &[
            "evaluate",
            "--gold",
            "data/test.jsonl",
            "--pred",
            "base=base.jsonl",
            "--pred",
            "rl=rl.jsonl",
            "--out",
            "m.json",
        ],
        d,
    );
    let report = MetricsReport::from_json(&fs::read_to_string(d.join("m.json")).unwrap()).unwrap();
    assert_eq!(out.status.success(), !report.has_undefined_test());
}

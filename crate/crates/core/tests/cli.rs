//! End-to-end runs of the `melseg` binary.

use std::path::Path;
use std::process::{Command, Output};

use melseg::evaluator::parse_report;
use melseg::score::{boundary_set, parse_corpus};
use serde_json::Value;

fn melseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_melseg"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn synth(dir: &Path, n: usize, seed: u64) -> std::path::PathBuf {
    let path = dir.join(format!("c{n}_{seed}.jsonl"));
    let o = melseg(&["synth", "--n", &n.to_string(), "--seed", &seed.to_string(), "--out", p(&path)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    path
}

#[test]
fn data_commands_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = synth(dir.path(), 12, 4);
    let songs = parse_corpus(&corpus).unwrap();
    assert_eq!(songs.len(), 12);

    let o = melseg(&["stats", "--corpus", p(&corpus)]);
    assert_eq!(code(&o), 0);
    let csv = String::from_utf8(o.stdout).unwrap();
    assert!(csv.starts_with("kind,lo,hi,value"));
    assert!(csv.contains("positive_rate"));
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("config: {"));

    let labels = dir.path().join("labels.jsonl");
    let o = melseg(&["labels", "--corpus", p(&corpus), "--scheme", "ascend", "--out", p(&labels)]);
    assert_eq!(code(&o), 0);
    let text = std::fs::read_to_string(&labels).unwrap();
    let first: Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    assert_eq!(first["scheme"], "ascend");
    assert_eq!(first["labels"].as_array().unwrap().len(), songs[0].len());

    let aug = dir.path().join("aug.jsonl");
    let o = melseg(&[
        "augment", "--corpus", p(&corpus), "--pitch", "0,3", "--duration", "0", "--rest", "0,0.5", "--out", p(&aug),
    ]);
    assert_eq!(code(&o), 0);
    let variants = parse_corpus(&aug).unwrap();
    assert_eq!(variants.len(), 12 * 4);
    assert_eq!(variants[0], songs[0]);
    assert_eq!(boundary_set(&variants[3]), boundary_set(&songs[0]));
}

#[test]
fn train_eval_segment() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = synth(dir.path(), 16, 6);
    let run = dir.path().join("run");
    let o = melseg(&[
        "train", "--preset", "smoke-cnn-crf", "--corpus", p(&corpus), "--out-dir", p(&run), "--folds", "2", "--epochs",
        "2",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["config.json", "train_log.csv", "fold0.pseg", "fold1.pseg", "folds.json", "report.csv"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let log = std::fs::read_to_string(run.join("train_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 1 + 2 * 2);
    let report = parse_report(&std::fs::read_to_string(run.join("report.csv")).unwrap()).unwrap();
    assert_eq!((report[0].model.as_str(), report[0].label.as_str()), ("cnn-crf", "ascend"));

    let ck0 = run.join("fold0.pseg");
    let ck1 = run.join("fold1.pseg");
    let rep = dir.path().join("eval.csv");
    let o = melseg(&[
        "eval", "--checkpoint", p(&ck0), "--checkpoint", p(&ck1), "--corpus", p(&corpus), "--report-out", p(&rep),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(String::from_utf8(o.stdout).unwrap().lines().count(), 3);
    assert_eq!(parse_report(&std::fs::read_to_string(&rep).unwrap()).unwrap().len(), 1);

    // one checkpoint cannot give a standard deviation
    let o = melseg(&["eval", "--checkpoint", p(&ck0), "--corpus", p(&corpus), "--report-out", p(&rep)]);
    assert_eq!(code(&o), 1);

    let seg = dir.path().join("seg.jsonl");
    let o = melseg(&["segment", "--checkpoint", p(&ck0), "--corpus", p(&corpus), "--out", p(&seg)]);
    assert_eq!(code(&o), 0);
    let text = std::fs::read_to_string(&seg).unwrap();
    assert_eq!(text.lines().count(), 16);
    for line in text.lines() {
        let v: Value = serde_json::from_str(line).unwrap();
        let bounds: Vec<u64> = v["boundaries"].as_array().unwrap().iter().map(|b| b.as_u64().unwrap()).collect();
        let ends: Vec<u64> = v["phrases"].as_array().unwrap().iter().map(|s| s[1].as_u64().unwrap() - 1).collect();
        // every written phrase ends on a predicted boundary
        assert!(ends.iter().all(|e| bounds.contains(e)));
    }
}

#[test]
fn verification_commands() {
    let o = melseg(&["crf-oracle", "--trials", "50", "--seed", "2"]);
    assert_eq!(code(&o), 0);
    assert!(String::from_utf8(o.stdout).unwrap().contains("illegal_paths=0"));
    let o = melseg(&["gradcheck", "--filter", "softmax"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&melseg(&[])), 1);
    assert_eq!(code(&melseg(&["train", "--corpus", "x.jsonl"])), 1);
    assert_eq!(code(&melseg(&["frobnicate"])), 1);
    assert_eq!(code(&melseg(&["--help"])), 0);

    let missing = dir.path().join("missing.jsonl");
    assert_eq!(code(&melseg(&["stats", "--corpus", p(&missing)])), 2);
    let broken = dir.path().join("broken.jsonl");
    std::fs::write(&broken, "{\"id\":\"a\",\"notes\":[[60,1,0]],\"phrases\":[[0,3]]}\n").unwrap();
    assert_eq!(code(&melseg(&["stats", "--corpus", p(&broken)])), 2);

    let corpus = synth(dir.path(), 10, 1);
    let out = dir.path().join("r");
    let bad_key = ["train", "--preset", "smoke-cnn", "--set", "sgd.speed=1", "--corpus", p(&corpus), "--out-dir", p(&out)];
    assert_eq!(code(&melseg(&bad_key)), 1);
    assert_eq!(code(&melseg(&["train", "--preset", "nope", "--corpus", p(&corpus), "--out-dir", p(&out)])), 1);
}

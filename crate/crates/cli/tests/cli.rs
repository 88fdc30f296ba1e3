use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn qgen(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qgen"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A toy corpus and desk-sized config in a fresh directory.
fn workspace() -> (TempDir, PathBuf, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let rows = [
        ("a", "the zambezi river flows east to the ocean", "the ocean", "where does the zambezi flow"),
        ("b", "victoria falls lies on the zambezi river", "the zambezi river", "where does victoria falls lie"),
        ("c", "the river was named by early traders", "early traders", "who named the river"),
        ("d", "the falls are twice the height of niagara", "twice", "how tall are the falls"),
    ];
    let data: String = rows
        .iter()
        .map(|(id, p, q, t)| {
            serde_json::json!({"id": id, "passage": p, "query": q, "target": t}).to_string() + "\n"
        })
        .collect();
    let train = dir.path().join("train.jsonl");
    fs::write(&train, data).unwrap();
    let config = dir.path().join("desk.json");
    fs::write(
        &config,
        r#"{"embed_dim": 8, "hidden": 8, "perspectives": 2, "batch_size": 2,
            "epochs_ce": 2, "epochs_rl": 1, "max_decode_len": 6, "vocab_min_count": 1}"#,
    )
    .unwrap();
    (dir, train, config)
}

#[test]
fn missing_embeddings_exit_2_and_name_the_path() {
    let (dir, train, config) = workspace();
    let missing = dir.path().join("glove-missing.txt");
    let out = dir.path().join("run");
    let o = qgen(&[
        "train",
        "--config",
        s(&config),
        "--train",
        s(&train),
        "--embeddings",
        s(&missing),
        "--out",
        s(&out),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains(s(&missing)), "{}", stderr(&o));
}

#[test]
fn usage_errors_exit_2() {
    let (dir, train, _) = workspace();
    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{"hiden": 8}"#).unwrap();
    let o = qgen(&["train", "--config", s(&bad), "--train", s(&train), "--out", s(dir.path())]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("hiden"));
    assert_eq!(qgen(&["train", "--out", s(dir.path())]).status.code(), Some(2));
    assert_eq!(qgen(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn train_is_reproducible_and_feeds_the_pipeline() {
    let (dir, train, config) = workspace();
    let run = |name: &str| {
        let out = dir.path().join(name);
        let o = qgen(&["train", "--config", s(&config), "--train", s(&train), "--dev", s(&train), "--out", s(&out)]);
        assert!(o.status.success(), "{}", stderr(&o));
        out
    };
    let r1 = run("r1");
    let r2 = run("r2");
    for f in ["best.ckpt", "last.ckpt", "metrics.jsonl"] {
        assert_eq!(fs::read(r1.join(f)).unwrap(), fs::read(r2.join(f)).unwrap(), "{f} differs");
    }
    let log = fs::read_to_string(r1.join("metrics.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 2);
    for line in log.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(v["loss"].as_f64().unwrap().is_finite());
        assert!(v["dev_metric"].is_number());
    }

    let ckpt = r1.join("best.ckpt");
    let preds = dir.path().join("preds.jsonl");
    let o = qgen(&["generate", "--checkpoint", s(&ckpt), "--input", s(&train), "--output", s(&preds)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let lines: Vec<serde_json::Value> = fs::read_to_string(&preds)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 4);
    assert_eq!(lines[0]["id"], "a");
    assert!(lines.iter().all(|v| v["output"].is_string()));

    let report = dir.path().join("report.json");
    let o = qgen(&["evaluate", "--predictions", s(&preds), "--references", s(&train), "--report", s(&report)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(v["metric"], "bleu4");
    assert_eq!(v["per_example"].as_array().unwrap().len(), 4);

    let tuned = dir.path().join("tuned");
    let o = qgen(&["finetune", "--checkpoint", s(&ckpt), "--train", s(&train), "--out", s(&tuned)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let log = fs::read_to_string(tuned.join("metrics.jsonl")).unwrap();
    let v: serde_json::Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
    assert!(v["reward_greedy"].is_number() && v["reward_sampled"].is_number());
    assert!(tuned.join("best.ckpt").exists());
}

#[test]
fn generate_on_empty_input_writes_empty_file() {
    let (dir, train, config) = workspace();
    let out = dir.path().join("run");
    let o = qgen(&["train", "--config", s(&config), "--train", s(&train), "--out", s(&out), "--epochs", "1"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let empty = dir.path().join("empty.jsonl");
    fs::write(&empty, "").unwrap();
    let preds = dir.path().join("preds.jsonl");
    let ckpt = out.join("last.ckpt");
    let o = qgen(&["generate", "--checkpoint", s(&ckpt), "--input", s(&empty), "--output", s(&preds)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(fs::read(&preds).unwrap(), b"");
}

#[test]
fn corrupt_checkpoint_exits_1() {
    let (dir, train, _) = workspace();
    let ckpt = dir.path().join("broken.ckpt");
    fs::write(&ckpt, b"not a checkpoint").unwrap();
    let preds = dir.path().join("p.jsonl");
    let o = qgen(&["generate", "--checkpoint", s(&ckpt), "--input", s(&train), "--output", s(&preds)]);
    assert_eq!(o.status.code(), Some(1));
    let o = qgen(&["finetune", "--checkpoint", s(&dir.path().join("absent.ckpt")), "--train", s(&train)]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn evaluate_identical_scores_one_and_missing_id_fails() {
    let dir = tempfile::tempdir().unwrap();
    let refs = dir.path().join("refs.jsonl");
    fs::write(
        &refs,
        "{\"id\":\"q1\",\"target\":\"where does the zambezi river flow\"}\n{\"id\":\"q2\",\"target\":\"who named the falls\"}\n",
    )
    .unwrap();
    let preds = dir.path().join("preds.jsonl");
    fs::write(
        &preds,
        "{\"id\":\"q2\",\"output\":\"who named the falls\"}\n{\"id\":\"q1\",\"output\":\"where does the zambezi river flow\"}\n",
    )
    .unwrap();
    for metric in ["bleu4", "rouge_l"] {
        let report = dir.path().join(format!("{metric}.json"));
        let o = qgen(&[
            "evaluate",
            "--predictions",
            s(&preds),
            "--references",
            s(&refs),
            "--metric",
            metric,
            "--report",
            s(&report),
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
        let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
        assert_eq!(v["mean"].as_f64().unwrap(), 1.0);
        assert_eq!(v["per_example"][0]["id"], "q1");
        assert!(stdout(&o).contains(&format!("{metric} mean 1.000000")));
    }

    fs::write(&preds, "{\"id\":\"q1\",\"output\":\"where does the zambezi river flow\"}\n").unwrap();
    let o = qgen(&["evaluate", "--predictions", s(&preds), "--references", s(&refs)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("q2"), "{}", stderr(&o));
}

#[test]
fn gradcheck_passes_and_detects_corruption() {
    let o = qgen(&["gradcheck", "--seed", "3"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    for block in ["encoder", "decoder_step", "ce_coverage", "rl"] {
        assert!(out.lines().any(|l| l.starts_with(block) && l.ends_with("ok")), "{out}");
    }
    let o = qgen(&["gradcheck", "--corrupt-backward"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("failed in block"), "{}", stderr(&o));
}

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn data(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/data").join(name)
}

fn cool(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cool")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn report(o: &Output) -> serde_json::Value {
    let line = stdout(o).lines().last().expect("report line").to_string();
    serde_json::from_str(&line).expect("report is JSON")
}

fn train_toy(out: &Path, extra: &[&str]) -> Output {
    let cfg = data("toy.cfg");
    let train = data("toy_span.jsonl");
    let mut args = vec![
        "train",
        "-c",
        cfg.to_str().unwrap(),
        "--train",
        train.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--set",
        "epochs=8",
    ];
    args.extend_from_slice(extra);
    cool(&args)
}

#[test]
fn gradcheck_passes() {
    let o = cool(&["gradcheck", "--seed", "7"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.contains("model_GlobalAndLocal"));
    assert!(!text.contains("FAIL"));
}

#[test]
fn gradcheck_json_lines() {
    let o = cool(&["gradcheck", "--seed", "3", "--json"]);
    assert_eq!(o.status.code(), Some(0));
    for line in stdout(&o).lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(v["pass"], true);
    }
}

#[test]
fn modes_give_distinct_hashes() {
    let dir = tempfile::tempdir().unwrap();
    let a = train_toy(&dir.path().join("a"), &["--set", "mode=GlobalToLocal"]);
    let b = train_toy(&dir.path().join("b"), &["--set", "mode=LocalToGlobal"]);
    assert_eq!(a.status.code(), Some(0), "{}", stderr(&a));
    assert_eq!(b.status.code(), Some(0), "{}", stderr(&b));
    let (ra, rb) = (report(&a), report(&b));
    assert_eq!(ra["task"], "span");
    assert_ne!(ra["config_hash"], rb["config_hash"]);
    for f in ["model.ckpt", "vocab.txt", "labels.txt", "loss.csv", "report.jsonl"] {
        assert!(dir.path().join("a").join(f).exists(), "{f}");
    }
    let csv = std::fs::read_to_string(dir.path().join("a/loss.csv")).unwrap();
    assert!(csv.starts_with("step,epoch,loss,lr_encoder,lr_other\n"));
}

#[test]
fn eval_and_predict_reuse_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let t = train_toy(&out, &["--seed", "4"]);
    assert_eq!(t.status.code(), Some(0), "{}", stderr(&t));
    let ckpt = out.join("model.ckpt");
    let set = data("toy_span.jsonl");
    let e = cool(&["eval", "--checkpoint", ckpt.to_str().unwrap(), "--data", set.to_str().unwrap()]);
    assert_eq!(e.status.code(), Some(0), "{}", stderr(&e));
    assert_eq!(report(&e), report(&t));
    assert_eq!(report(&e)["seed"], 4);

    let preds = dir.path().join("preds.jsonl");
    let p = cool(&[
        "predict",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--data",
        set.to_str().unwrap(),
        "--out",
        preds.to_str().unwrap(),
    ]);
    assert_eq!(p.status.code(), Some(0), "{}", stderr(&p));
    let text = std::fs::read_to_string(preds).unwrap();
    assert_eq!(text.lines().count(), 32);
    let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    assert_eq!(first["id"], "t00");
}

#[test]
fn periodic_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let o = train_toy(&out, &["--set", "checkpoint_every=4", "--set", "epochs=2"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(out.join("model-step4.ckpt").exists());
    assert!(out.join("model-step8.ckpt").exists());
}

#[test]
fn missing_dataset_is_named() {
    let o = cool(&["train", "--train", "/no/such/file.jsonl"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("/no/such/file.jsonl"));
}

#[test]
fn unknown_key_lists_valid_keys() {
    let dir = tempfile::tempdir().unwrap();
    let o = train_toy(dir.path(), &["--set", "colour=blue"]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert!(err.contains("colour") && err.contains("num_outlook_layers"), "{err}");
}

#[test]
fn bad_usage_is_a_validation_error() {
    assert_eq!(cool(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(cool(&["--help"]).status.code(), Some(0));
}

#[test]
fn divergence_exits_with_numeric_code() {
    let dir = tempfile::tempdir().unwrap();
    let o = train_toy(
        dir.path(),
        &["--set", "lr_encoder=1e300", "--set", "lr_other=1e300", "--set", "grad_clip=0"],
    );
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("step"));
}

#[test]
fn oracle_diff_pass_and_fail() {
    let ok = cool(&["oracle-diff", "--cases", "20"]);
    assert_eq!(ok.status.code(), Some(0));
    assert!(stdout(&ok).contains("outlook_flattened"));
    let strict = cool(&["oracle-diff", "--cases", "5", "--tol=-1"]);
    assert_eq!(strict.status.code(), Some(2));
}

#[test]
fn tagging_and_classification_run() {
    let dir = tempfile::tempdir().unwrap();
    let base = ["--set", "hidden=16", "--set", "heads=2", "--set", "epochs=3", "--set", "use_conv_block=false"];
    for (task, file, metric) in [
        ("token_tag", "toy.conll", "entity_f1"),
        ("seq_class", "toy.tsv", "accuracy"),
    ] {
        let set = data(file);
        let out = dir.path().join(task);
        let task_kv = format!("task={task}");
        let mut args = vec![
            "train",
            "--train",
            set.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            "--set",
            &task_kv,
        ];
        args.extend_from_slice(&base);
        let o = cool(&args);
        assert_eq!(o.status.code(), Some(0), "{task}: {}", stderr(&o));
        assert!(report(&o)["metrics"][metric].is_number(), "{task}");
    }
}

#[test]
fn format_must_match_task() {
    let set = data("toy.tsv");
    let o = cool(&["train", "--train", set.to_str().unwrap(), "--set", "task=span"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("tsv"));
}

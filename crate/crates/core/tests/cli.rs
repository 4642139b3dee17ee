use std::path::Path;
use std::process::{Command, Output};

fn slcvae(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_slcvae"))
        .args(args)
        .env("SLCVAE_LOG", "error")
        .output()
        .expect("binary runs")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn small_train(data: &Path, out: &Path, mode: &str) -> Output {
    slcvae(&[
        "train", "--data", p(data), "--out", p(out), "--mode", mode, "--seed", "4", "--epochs", "2", "--batch", "8", "--embed", "8",
        "--hidden", "8", "--latent", "2", "--lr", "0.001",
    ])
}

#[test]
fn synth_train_eval_generate() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data.jsonl");
    let out = slcvae(&["synth", "--out", p(&data), "--items", "20", "--targets-per-item", "2", "--seed", "1"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(std::fs::read_to_string(&data).unwrap().lines().count(), 20);

    let (a, b) = (dir.path().join("a.ck"), dir.path().join("b.ck"));
    for ck in [&a, &b] {
        let out = small_train(&data, ck, "slcvae");
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    assert!(std::fs::read(&a).unwrap() == std::fs::read(&b).unwrap(), "checkpoints differ");

    let (r1, r2) = (dir.path().join("r1.json"), dir.path().join("r2.json"));
    for r in [&r1, &r2] {
        let out = slcvae(&["eval", "--model", p(&a), "--data", p(&data), "--n", "3", "--decode", "greedy", "--seed", "2", "--report", p(r)]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    let text = std::fs::read_to_string(&r1).unwrap();
    assert_eq!(text, std::fs::read_to_string(&r2).unwrap());
    let report: serde_json::Value = serde_json::from_str(&text).unwrap();
    for key in ["bleu_precision", "bleu_recall", "distinct_1", "distinct_2", "mean_kl", "n", "sources", "decode_spec", "seed"] {
        assert!(report.get(key).is_some(), "missing {key}");
    }
    assert_eq!(report["sources"], 20);
    assert!(report["mean_kl"].as_f64().unwrap() >= 0.0);

    let lines = dir.path().join("hyps.txt");
    let out = slcvae(&["generate", "--model", p(&a), "--data", p(&data), "--n", "10", "--decode", "beam:10", "--out", p(&lines)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(std::fs::read_to_string(&lines).unwrap().lines().count(), 200);
}

#[test]
fn seq2seq_report_has_null_kl() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data.jsonl");
    assert!(slcvae(&["synth", "--out", p(&data), "--items", "6", "--targets-per-item", "2"]).status.success());
    let ck = dir.path().join("s.ck");
    assert!(small_train(&data, &ck, "seq2seq").status.success());
    let out = slcvae(&["eval", "--model", p(&ck), "--data", p(&data), "--n", "2", "--decode", "beam:2"]);
    assert!(out.status.success());
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(report["mean_kl"].is_null());
    assert_eq!(report["decode_spec"], "beam:2");
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(slcvae(&["train", "--bogus"]).status.code(), Some(1));
    assert_eq!(slcvae(&[]).status.code(), Some(1));
    assert_eq!(slcvae(&["eval", "--model", "m", "--data", "d", "--decode", "sideways"]).status.code(), Some(1));
    assert_eq!(slcvae(&["--help"]).status.code(), Some(0));
}

#[test]
fn runtime_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.jsonl");
    let out = slcvae(&["train", "--data", p(&missing), "--out", p(&dir.path().join("x.ck"))]);
    assert_eq!(out.status.code(), Some(2));
    let garbage = dir.path().join("garbage.ck");
    std::fs::write(&garbage, b"not a checkpoint").unwrap();
    let data = dir.path().join("data.jsonl");
    assert!(slcvae(&["synth", "--out", p(&data), "--items", "3"]).status.success());
    let out = slcvae(&["eval", "--model", p(&garbage), "--data", p(&data)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("checkpoint"));
}

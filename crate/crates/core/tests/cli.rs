use std::path::Path;
use std::process::{Command, Output};

fn nbss(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nbss"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap_or(-1)
}

const TINY: &str = "\
# small and fast
hidden1 = 8
hidden2 = 4
max_epochs = 2
utterances_per_batch = 2
scene_seconds = 1.0
rt60_max = 0.3
";

#[test]
fn simulate_train_separate_eval_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    std::fs::write(d.join("tiny.cfg"), TINY).unwrap();
    let cfg = ["--config", "tiny.cfg"];

    let o = nbss(d, &[&cfg[..], &["simulate", "--synthetic", "--n-scenes", "3", "--seed", "4", "--out", "data"]].concat());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let manifest = std::fs::read_to_string(d.join("data/manifest.jsonl")).unwrap();
    assert_eq!(manifest.lines().count(), 3);
    assert!(d.join("data/scene00002/spk2.wav").is_file());

    let o = nbss(d, &[&cfg[..], &["train", "data/manifest.jsonl", "--out", "run"]].concat());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let log = std::fs::read_to_string(d.join("run/train_log.csv")).unwrap();
    assert!(log.starts_with("epoch,train_loss,val_loss,lr\n"));
    assert_eq!(log.lines().count(), 3);
    assert!(d.join("run/epoch_1.ckpt").is_file() && d.join("run/epoch_2.ckpt").is_file());

    let o = nbss(d, &[&cfg[..], &["train", "data/manifest.jsonl", "--resume", "run/epoch_1.ckpt", "--out", "resumed"]].concat());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(
        std::fs::read(d.join("run/epoch_2.ckpt")).unwrap(),
        std::fs::read(d.join("resumed/epoch_2.ckpt")).unwrap()
    );

    for system in ["nbss", "nbss-corr"] {
        let est = format!("est_{system}");
        let o = nbss(d, &[&cfg[..], &["separate", "data/manifest.jsonl", "--checkpoint", "run/epoch_2.ckpt", "--system", system, "--out", &est]].concat());
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        assert!(d.join(&est).join("scene00000/est_spk1.wav").is_file());
        let out = format!("eval_{system}");
        let o = nbss(d, &[&cfg[..], &["eval", "data/manifest.jsonl", "--system", system, "--est-dir", &est, "--out", &out]].concat());
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        let csv = std::fs::read_to_string(d.join(&out).join("report.csv")).unwrap();
        assert_eq!(csv.lines().count(), 1 + 3 * 2);
        assert!(String::from_utf8_lossy(&o.stdout).contains(&format!("system: {system}")));
    }

    // single wav in, one file per speaker out
    let o = nbss(d, &[&cfg[..], &["separate", "data/scene00001/mix.wav", "--checkpoint", "run/epoch_2.ckpt", "--out", "one"]].concat());
    assert_eq!(code(&o), 0);
    assert!(d.join("one/est_spk1.wav").is_file() && d.join("one/est_spk2.wav").is_file());

    // a missing estimate is skipped with a warning, not fatal
    std::fs::remove_file(d.join("est_nbss/scene00001/est_spk2.wav")).unwrap();
    let o = nbss(d, &[&cfg[..], &["eval", "data/manifest.jsonl", "--system", "nbss", "--est-dir", "est_nbss", "--out", "partial"]].concat());
    assert_eq!(code(&o), 0);
    let csv = std::fs::read_to_string(d.join("partial/report.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 2 * 2);

    let o = nbss(d, &[&cfg[..], &["eval", "data/manifest.jsonl", "--system", "mvdr", "--out", "mvdr"]].concat());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(d.join("mvdr/summary.txt").is_file());
}

#[test]
fn simulate_is_reproducible_from_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    std::fs::write(d.join("tiny.cfg"), TINY).unwrap();
    for out in ["a", "b", "c"] {
        let seed = if out == "c" { "8" } else { "7" };
        let o = nbss(d, &["--config", "tiny.cfg", "simulate", "--synthetic", "--n-scenes", "2", "--seed", seed, "--out", out]);
        assert_eq!(code(&o), 0);
    }
    let read = |p: &str| std::fs::read(d.join(p)).unwrap();
    assert_eq!(read("a/manifest.jsonl"), read("b/manifest.jsonl"));
    assert_eq!(read("a/scene00001/mix.wav"), read("b/scene00001/mix.wav"));
    assert_ne!(read("a/scene00001/mix.wav"), read("c/scene00001/mix.wav"));
}

#[test]
fn user_errors_exit_with_one() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    std::fs::write(d.join("bad.cfg"), "hidden1 = 8\nlearning_rate = 3\n").unwrap();
    let o = nbss(d, &["--config", "bad.cfg", "simulate", "--synthetic"]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 2"));

    assert_eq!(code(&nbss(d, &["simulate", "--n-scenes", "2", "--out", "x"])), 1);
    assert_eq!(code(&nbss(d, &["eval", "missing.jsonl", "--system", "mvdr"])), 1);
    assert_eq!(code(&nbss(d, &["eval", "missing.jsonl", "--system", "beamformer"])), 1);
    assert_eq!(code(&nbss(d, &["frobnicate"])), 1);
    assert_eq!(code(&nbss(d, &["--help"])), 0);
}

#[test]
fn channel_mismatch_is_reported() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    std::fs::write(d.join("tiny.cfg"), TINY).unwrap();
    let cfg = ["--config", "tiny.cfg"];
    assert_eq!(code(&nbss(d, &[&cfg[..], &["simulate", "--synthetic", "--n-scenes", "2", "--out", "data"]].concat())), 0);
    assert_eq!(code(&nbss(d, &[&cfg[..], &["train", "data/manifest.jsonl", "--out", "run"]].concat())), 0);
    let stereo = nbss::MultichannelWaveform::zeros(16000, 2, 16000);
    stereo.write_wav(d.join("stereo.wav")).unwrap();
    let o = nbss(d, &[&cfg[..], &["separate", "stereo.wav", "--checkpoint", "run/epoch_2.ckpt", "--out", "o"]].concat());
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("M = 8"));
}

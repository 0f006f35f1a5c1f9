use std::path::Path;
use std::process::{Command, Output};

use spgm::data::read_wav;
use spgm::separator::{Dtype, ModelConfig, SeparatorModel};

fn spgm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_spgm"))
        .args(args)
        .env("SPGM_NUM_THREADS", "1")
        .output()
        .unwrap()
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(spgm(&[]).status.code(), Some(1));
    assert_eq!(spgm(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(spgm(&["synth-data", "--count", "2"]).status.code(), Some(1));
    assert_eq!(spgm(&["--help"]).status.code(), Some(0));
}

#[test]
fn bad_config_file_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[model]\nchanels = 3\n").unwrap();
    let out = spgm(&["--config", s(&cfg), "profile"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("chanels"));
}

#[test]
fn missing_inputs_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = spgm(&["evaluate", "--oracle", "--manifest", s(&dir.path().join("none.csv"))]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn synth_data_is_byte_reproducible_under_seed() {
    let dir = tempfile::tempdir().unwrap();
    for name in ["a", "b"] {
        let out = spgm(&["--seed", "5", "synth-data", "--out", s(&dir.path().join(name)), "--count", "3", "--duration", "0.2"]);
        assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    }
    for sub in ["manifest.csv", "mix/0.wav", "s1/2.wav", "s2/1.wav"] {
        let a = std::fs::read(dir.path().join("a").join(sub)).unwrap();
        let b = std::fs::read(dir.path().join("b").join(sub)).unwrap();
        assert_eq!(a, b, "{sub}");
    }
    let c = dir.path().join("c");
    spgm(&["--seed", "6", "synth-data", "--out", s(&c), "--count", "1", "--duration", "0.2"]);
    assert_ne!(std::fs::read(c.join("mix/0.wav")).unwrap(), std::fs::read(dir.path().join("a/mix/0.wav")).unwrap());
}

#[test]
fn separate_writes_one_wav_per_source() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert_eq!(spgm(&["synth-data", "--out", s(&data), "--count", "1", "--duration", "0.05"]).status.code(), Some(0));
    let ckpt = dir.path().join("model.ckpt");
    SeparatorModel::new(&ModelConfig::tiny(), 0)
        .unwrap()
        .save(&ckpt, Dtype::F32, serde_json::Value::Null)
        .unwrap();
    let out_dir = dir.path().join("out");
    let out = spgm(&["separate", "--model", s(&ckpt), "--in", s(&data.join("mix/0.wav")), "--out-dir", s(&out_dir)]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    for name in ["s1.wav", "s2.wav"] {
        let wav = read_wav(&out_dir.join(name)).unwrap();
        assert_eq!(wav.len(), 400);
        assert_eq!(wav.sample_rate, 8000);
    }

    // A mismatched sample rate is a data error.
    let other = dir.path().join("other");
    spgm(&["synth-data", "--out", s(&other), "--count", "1", "--duration", "0.05", "--sample-rate", "16000"]);
    let out = spgm(&["separate", "--model", s(&ckpt), "--in", s(&other.join("mix/0.wav")), "--out-dir", s(&out_dir)]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn oracle_evaluation_saturates_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    spgm(&["synth-data", "--out", s(&data), "--count", "3", "--duration", "0.1"]);
    let run = || spgm(&["--csv", "evaluate", "--oracle", "--manifest", s(&data)]);
    let (a, b) = (run(), run());
    assert_eq!(a.status.code(), Some(0));
    assert_eq!(stdout(&a), stdout(&b));
    let text = stdout(&a);
    let mean: f64 = text.lines().find_map(|l| l.strip_prefix("mean,")).unwrap().parse().unwrap();
    // Perfect estimates hit the 80 dB SI-SDR cap; the mixtures sit near 0 dB.
    assert!(mean > 60.0, "{text}");
    assert!(text.starts_with("utterance,sisdri_db\n"));
    assert_eq!(text.lines().count(), 1 + 3 + 2);
}

#[test]
fn evaluate_model_prints_mean_median_and_rows() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    spgm(&["synth-data", "--out", s(&data), "--count", "2", "--duration", "0.05"]);
    let ckpt = dir.path().join("m.ckpt");
    SeparatorModel::new(&ModelConfig::tiny(), 1)
        .unwrap()
        .save(&ckpt, Dtype::F64, serde_json::Value::Null)
        .unwrap();
    let out = spgm(&["evaluate", "--model", s(&ckpt), "--manifest", s(&data.join("manifest.csv"))]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let text = stdout(&out);
    assert!(text.starts_with("utterance,sisdri_db\n"));
    assert!(text.contains("mean SI-SDRi") && text.contains("median SI-SDRi"));
    assert_eq!(text.lines().count(), 1 + 2 + 2);
}

#[test]
fn profile_reports_spgm_blocks_and_convention() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/full.toml");
    let out = spgm(&["--config", s(&root), "profile", "--duration", "1"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let text = stdout(&out);
    assert!(text.lines().any(|l| l.contains("spgm_blocks") && l.contains("524288")), "{text}");
    assert!(text.contains("convention:"));

    let csv = stdout(&spgm(&["--config", s(&root), "--csv", "profile"]));
    assert!(csv.lines().any(|l| l.starts_with("spgm_blocks,") && l.ends_with(",524288")), "{csv}");
}

#[test]
fn train_then_resume_through_the_cli() {
    let dir = tempfile::tempdir().unwrap();
    let (train, valid) = (dir.path().join("train"), dir.path().join("valid"));
    spgm(&["synth-data", "--out", s(&train), "--count", "3", "--duration", "0.02"]);
    spgm(&["--seed", "1", "synth-data", "--out", s(&valid), "--count", "2", "--duration", "0.02"]);
    let cfg = dir.path().join("tiny.toml");
    std::fs::write(
        &cfg,
        "[model]\nchannels = 8\nffn = 16\nheads = 2\nchunk_size = 4\nnum_blocks = 1\nintra_layers = 1\n[train]\nlr0 = 1e-3\n",
    )
    .unwrap();
    let out_dir = dir.path().join("run");
    let args = |epochs: &'static str, resume: bool| {
        let mut a = vec!["--config", s(&cfg), "train", "--data", s(&train), "--valid", s(&valid), "--out", s(&out_dir), "--epochs", epochs];
        if resume {
            a.push("--resume");
        }
        a.iter().map(|x| x.to_string()).collect::<Vec<_>>()
    };
    let run = |a: Vec<String>| Command::new(env!("CARGO_BIN_EXE_spgm")).args(&a).output().unwrap();
    let first = run(args("1", false));
    assert_eq!(first.status.code(), Some(0), "{}", String::from_utf8_lossy(&first.stderr));
    let second = run(args("2", true));
    assert_eq!(second.status.code(), Some(0), "{}", String::from_utf8_lossy(&second.stderr));
    let history = std::fs::read_to_string(out_dir.join("history.csv")).unwrap();
    assert_eq!(history.lines().count(), 3);
    assert!(out_dir.join("best.ckpt").exists());
}

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const CONFIG: &str = r#"{
  "model": {"n_fft": 16, "hop": 8, "channels": [2, 3, 4], "ra_blocks": 2},
  "data": {"train": 4, "test": 3, "clip_samples": 1200, "snr_levels": [0, 5], "noises": ["white", "tonal"]},
  "train": {"epochs": 1, "batch_size": 2, "clip_samples": 1200, "log_every": 0},
  "manifest": "data"
}
"#;

fn snnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_snnet")).args(args).env("RUST_LOG", "warn").output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = snnet(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap())
        })
        .collect()
}

fn wav_len(p: &Path) -> usize {
    snnet_core::dsp::wav::read_pcm(p).unwrap().len()
}

/// A config file next to a synthesized dataset in `data/`.
fn workspace() -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("config.json");
    fs::write(&cfg, CONFIG).unwrap();
    ok(&["synth-data", "--config", s(&cfg), "--out", s(&dir.path().join("data"))]);
    (dir, cfg)
}

#[test]
fn synth_data_is_reproducible() {
    let (dir, cfg) = workspace();
    let again = dir.path().join("again");
    ok(&["synth-data", "--config", s(&cfg), "--out", s(&again)]);
    let first = snapshot(&dir.path().join("data"));
    assert_eq!(first.len(), 7 * 3 + 1);
    assert_eq!(first, snapshot(&again));
    let other = dir.path().join("other");
    ok(&["synth-data", "--config", s(&cfg), "--seed", "5", "--out", s(&other)]);
    assert_ne!(first, snapshot(&other));
}

#[test]
fn malformed_config_reports_position() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    fs::write(&cfg, "{\n  \"data\": {\"train\": 4,,}\n}\n").unwrap();
    let out = snnet(&["synth-data", "--config", s(&cfg), "--out", s(&dir.path().join("d"))]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("line 2 column"), "{err}");

    fs::write(&cfg, r#"{"train": {"learning_rate": 0.1}}"#).unwrap();
    let out = snnet(&["synth-data", "--config", s(&cfg), "--out", s(&dir.path().join("d"))]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rate"));
}

#[test]
fn stage2_without_init_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = snnet(&["train", "--stage", "2", "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--init"));
    let out = snnet(&["train", "--stage", "3", "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn train_enhance_evaluate_inspect() {
    let (dir, cfg) = workspace();
    let data = dir.path().join("data");
    let run1 = dir.path().join("run1");
    let stdout = ok(&["train", "--stage", "1", "--config", s(&cfg), "--out", s(&run1)]);
    assert!(stdout.contains("stage 1: 2 steps"), "{stdout}");
    for f in ["model.ckpt", "train_log.csv", "config.json"] {
        assert!(run1.join(f).is_file(), "{f}");
    }
    assert_eq!(fs::read_to_string(run1.join("train_log.csv")).unwrap().lines().count(), 3);

    let run2 = dir.path().join("run2");
    let init = run1.join("model.ckpt");
    ok(&["train", "--stage", "2", "--config", s(&cfg), "--init", s(&init), "--out", s(&run2)]);
    let ckpt = run2.join("model.ckpt");

    // Longer than one inference window, and not a multiple of the hop.
    let input = dir.path().join("long.wav");
    let samples: Vec<i16> = (0..40_003).map(|i| ((i as f64 * 0.05).sin() * 8000.0) as i16).collect();
    snnet_core::dsp::wav::write_pcm(&input, &samples).unwrap();
    let enhanced = dir.path().join("enh.wav");
    ok(&["enhance", "--ckpt", s(&ckpt), "--input", s(&input), "--output", s(&enhanced)]);
    assert_eq!(wav_len(&enhanced), samples.len());

    let report = dir.path().join("report.csv");
    let out = snnet(&["evaluate", "--ckpt", s(&ckpt), "--manifest", s(&data), "--out", s(&report)]);
    assert!(out.status.success());
    let csv = fs::read_to_string(&report).unwrap();
    assert_eq!(csv.lines().count(), 1 + 3);
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("si_sdri_db: mean") && err.contains("pesq: n/a"), "{err}");

    let dump = dir.path().join("dump");
    let clip = data.join("test_0000_noisy.wav");
    ok(&["inspect", "--ckpt", s(&ckpt), "--input", s(&clip), "--out", s(&dump)]);
    let files = snapshot(&dump);
    // Two blocks, each with 2 branches x 2 attention maps and 2 masks.
    assert_eq!(files.len(), 2 * (4 + 2));
    for (name, bytes) in &files {
        let text = String::from_utf8(bytes.clone()).unwrap();
        for line in text.lines() {
            let row: Vec<f64> = line.split(',').map(|v| v.parse().unwrap()).collect();
            if name.starts_with("sa_") {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6, "{name}");
            } else {
                assert!(row.iter().all(|v| *v > 0.0 && *v < 1.0), "{name}");
            }
        }
    }
    let frames = snnet_core::dsp::StftConfig { n_fft: 16, hop: 8 }.frames_for(1200);
    assert_eq!(files["sa_t_speech_0.csv"].iter().filter(|b| **b == b'\n').count(), frames);
}

#[test]
fn separate_writes_two_sources() {
    let (dir, cfg) = workspace();
    let run = dir.path().join("sep");
    let stdout = ok(&["train", "--stage", "sep", "--config", s(&cfg), "--out", s(&run)]);
    assert!(stdout.contains("permutations: identity"), "{stdout}");
    let input = dir.path().join("data").join("test_0001_noisy.wav");
    let (a, b) = (dir.path().join("a.wav"), dir.path().join("b.wav"));
    ok(&["separate", "--ckpt", s(&run.join("model.ckpt")), "--input", s(&input), "--out1", s(&a), "--out2", s(&b)]);
    assert_eq!(wav_len(&a), wav_len(&input));
    assert_eq!(wav_len(&b), wav_len(&input));
}

#[test]
fn missing_checkpoint_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.ckpt");
    let out = snnet(&["enhance", "--ckpt", s(&missing), "--input", "x.wav", "--output", "y.wav"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error: loading"));
}

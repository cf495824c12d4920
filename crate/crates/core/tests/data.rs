use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use snnet_core::data::{build_dataset, load_batch, DatasetConfig, Manifest, NoiseKind, Split, MANIFEST_FILE};
use snnet_core::dsp::snr_db;
use snnet_core::dsp::wav::{read_pcm, read_wav};

fn small_config(seed: u64) -> DatasetConfig {
    DatasetConfig {
        train: 6,
        test: 3,
        clip_samples: 2000,
        snr_levels: vec![0.0, 5.0, 10.0],
        noises: vec![NoiseKind::White, NoiseKind::Tonal],
        seed,
        ..DatasetConfig::default()
    }
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

#[test]
fn rebuilding_is_byte_identical() {
    let (a, b, c) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    build_dataset(&small_config(3), a.path()).unwrap();
    build_dataset(&small_config(3), b.path()).unwrap();
    let (sa, sb) = (snapshot(a.path()), snapshot(b.path()));
    assert_eq!(sa.len(), 9 * 3 + 1);
    assert_eq!(sa, sb);
    build_dataset(&small_config(4), c.path()).unwrap();
    let sc = snapshot(c.path());
    assert_ne!(sa["train_0000_noisy.wav"], sc["train_0000_noisy.wav"]);
}

#[test]
fn stored_clips_honour_the_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(5);
    let built = build_dataset(&cfg, dir.path()).unwrap();
    let m = Manifest::read(&dir.path().join(MANIFEST_FILE)).unwrap();
    assert_eq!(m.entries, built.entries);
    assert_eq!(m.split(Split::Train).len(), 6);
    assert_eq!(m.split(Split::Test).len(), 3);
    for (j, i) in m.split(Split::Train).into_iter().enumerate() {
        let e = &m.entries[i];
        assert_eq!(e.snr_db, cfg.snr_levels[j % 3]);
        let clean = read_pcm(&m.path(&e.clean)).unwrap();
        let noise = read_pcm(&m.path(&e.noise)).unwrap();
        let noisy = read_pcm(&m.path(&e.noisy)).unwrap();
        assert_eq!(clean.len(), cfg.clip_samples);
        for k in 0..clean.len() {
            assert_eq!(noisy[k] as i32, clean[k] as i32 + noise[k] as i32);
        }
        let peak = noisy.iter().map(|v| (*v as i32).abs()).max().unwrap() as f64 / 32768.0;
        assert!((peak - cfg.peak).abs() < 1e-3);
        let s = read_wav(&m.path(&e.clean)).unwrap();
        let n = read_wav(&m.path(&e.noise)).unwrap();
        let measured = snr_db(s.samples(), n.samples()).unwrap();
        assert!((measured - e.snr_db).abs() < 1e-6, "{}: {measured}", e.id);
    }
}

#[test]
fn batches_are_padded_to_length() {
    let dir = tempfile::tempdir().unwrap();
    let m = build_dataset(&small_config(6), dir.path()).unwrap();
    let b = load_batch::<f32>(&m, &[0, 2], 2500).unwrap();
    assert_eq!(b.ids, ["train_0000", "train_0002"]);
    assert_eq!(b.noisy.shape(), [2, 2500]);
    assert!(b.clean.data()[2000..2500].iter().all(|v| *v == 0.0));
}

#[test]
fn invalid_configs_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(0);
    cfg.snr_levels.clear();
    assert!(build_dataset(&cfg, dir.path()).is_err());
    assert!(serde_json::from_str::<DatasetConfig>(r#"{"noises": ["brown"]}"#).is_err());
}

mod common;

use common::{signal, tiny_config};
use snnet_core::model::SnNet;
use snnet_core::nn::ParamStore;
use snnet_core::train::{
    log_csv, train_separation, train_stage1, train_stage2, Checkpoint, Clips, Stage, TrainConfig, LOG_HEADER,
    MERGE_PREFIX,
};

const LEN: usize = 64;

fn clips() -> Clips<f64> {
    let waves: Vec<_> = (0..3)
        .map(|i| {
            let s = signal(LEN, 10 + i);
            let n: Vec<f64> = signal(LEN, 20 + i).iter().map(|v| 0.3 * v).collect();
            let x = s.iter().zip(&n).map(|(a, b)| a + b).collect();
            (format!("clip{i}"), x, s, n)
        })
        .collect();
    Clips::from_waves(LEN, &waves).unwrap()
}

fn config(steps: usize) -> TrainConfig {
    TrainConfig {
        epochs: 100,
        max_steps: Some(steps),
        batch_size: 2,
        clip_samples: LEN,
        log_every: 0,
        seed: 9,
        ..TrainConfig::default()
    }
}

fn stage1(steps: usize) -> (SnNet, ParamStore<f64>, Checkpoint<f64>, Vec<f64>) {
    let net = SnNet::enhancement(tiny_config()).unwrap();
    let init: ParamStore<f64> = net.init(2).unwrap();
    let out = train_stage1(&net, init.clone(), &clips(), &config(steps)).unwrap();
    let losses = out.records.iter().map(|r| r.loss).collect();
    (net, init, out.checkpoint, losses)
}

#[test]
fn stage1_is_deterministic() {
    let (_, _, a, la) = stage1(4);
    let (_, _, b, lb) = stage1(4);
    assert_eq!(la, lb);
    assert_eq!(a.to_bytes().unwrap(), b.to_bytes().unwrap());
    assert_eq!(a.meta.stage, Stage::One);
    assert_eq!(a.meta.step, 4);
}

#[test]
fn stage1_leaves_the_merge_stage_alone() {
    let (_, init, ck, losses) = stage1(6);
    assert_eq!(losses.len(), 6);
    let adam = ck.adam.as_ref().unwrap();
    assert_eq!(adam.step_count(), 6);
    assert!(adam.names().all(|n| !n.starts_with(MERGE_PREFIX)));
    assert!(adam.names().any(|n| n.starts_with("interact.")));
    for (name, t) in init.params().chain(init.buffers()) {
        let now = ck.store.get(name).or_else(|_| ck.store.buffer(name)).unwrap();
        if name.starts_with(MERGE_PREFIX) {
            assert_eq!(t, now, "{name}");
        }
    }
    assert_ne!(init.get("speech.enc.0.conv.weight").unwrap(), ck.store.get("speech.enc.0.conv.weight").unwrap());
}

#[test]
fn stage2_trains_only_the_merge_stage() {
    let (_, _, ck, _) = stage1(3);
    let before = ck.store.clone();
    let out = train_stage2(ck, &clips(), &config(5)).unwrap();
    let after = &out.checkpoint.store;
    let mut moved = 0;
    for (name, t) in before.params().chain(before.buffers()) {
        let now = after.get(name).or_else(|_| after.buffer(name)).unwrap();
        if name.starts_with(MERGE_PREFIX) {
            moved += (t != now) as usize;
        } else {
            assert_eq!(t.data(), now.data(), "{name} changed in stage 2");
        }
    }
    assert!(moved > 0);
    assert!(out.checkpoint.adam.as_ref().unwrap().names().all(|n| n.starts_with(MERGE_PREFIX)));
    assert!(out.records.iter().all(|r| r.merge == Some(r.loss)));
    assert_eq!(out.checkpoint.meta.stage, Stage::Two);
    assert!(after.trainable_names().len() == after.len());
}

#[test]
fn separation_counts_every_assignment() {
    let net = SnNet::separation(tiny_config()).unwrap();
    let store: ParamStore<f64> = net.init(4).unwrap();
    let out = train_separation(&net, store, &clips(), &config(3)).unwrap();
    let [keep, swap] = out.permutations.unwrap();
    // Batches of 2 over 3 clips: 2 + 1 + 2 examples.
    assert_eq!(keep + swap, 5);
    assert_eq!(out.checkpoint.meta.stage, Stage::Separation);
    assert!(train_stage2(out.checkpoint, &clips(), &config(1)).is_err());
    let enh = SnNet::enhancement(tiny_config()).unwrap();
    assert!(train_separation(&enh, enh.init(0).unwrap(), &clips(), &config(1)).is_err());
}

#[test]
fn log_has_one_row_per_step() {
    let net = SnNet::enhancement(tiny_config()).unwrap();
    let out = train_stage1(&net, net.init(1).unwrap(), &clips(), &config(2)).unwrap();
    let csv = log_csv(&out.records);
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], LOG_HEADER);
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("1,1,"));
    assert_eq!(lines[2].split(',').count(), LOG_HEADER.split(',').count());
}

#[test]
fn checkpoint_round_trip_keeps_training_state() {
    let (_, _, ck, _) = stage1(2);
    let bytes = ck.to_bytes().unwrap();
    let back = Checkpoint::<f64>::from_bytes(&bytes).unwrap();
    assert_eq!(back.to_bytes().unwrap(), bytes);
    assert_eq!(back.adam.as_ref().unwrap().step_count(), 2);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    ck.save(&path).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), bytes);
    assert_eq!(Checkpoint::<f64>::load(&path).unwrap().to_bytes().unwrap(), bytes);
}

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::checkpoint::{Checkpoint, CheckpointMeta};
use super::config::{Stage, TrainConfig};
use crate::data::{Manifest, Split};
use crate::dsp::wav::read_wav;
use crate::error::{Error, Result};
use crate::loss::{combined_loss, merge_loss, pit_loss_graph, project, LossWeights, Permutation, Targets};
use crate::model::{ForwardOptions, SnNet};
use crate::nn::{apply_bn_stats, clip_grad_norm, Adam, BnMode, Ctx, ParamStore};
use crate::tensor::norm::BnSaved;
use crate::tensor::{Scalar, Tensor};

/// Parameter prefixes owned by the two branches and their interaction.
pub const BRANCH_PREFIXES: [&str; 3] = ["speech.", "noise.", "interact."];
pub const MERGE_PREFIX: &str = "merge.";

/// Training clips held in memory at a fixed length.
#[derive(Debug, Clone)]
pub struct Clips<T> {
    pub ids: Vec<String>,
    pub samples: usize,
    noisy: Vec<T>,
    clean: Vec<T>,
    noise: Vec<T>,
}

fn fitted<T: Scalar>(x: &[f64], len: usize) -> impl Iterator<Item = T> + '_ {
    (0..len).map(move |i| T::c(x.get(i).copied().unwrap_or(0.0)))
}

impl<T: Scalar> Clips<T> {
    /// `(id, noisy, clean, noise)` waveforms, each padded or cut to `samples`.
    pub fn from_waves(samples: usize, clips: &[(String, Vec<f64>, Vec<f64>, Vec<f64>)]) -> Result<Self> {
        if clips.is_empty() || samples == 0 {
            return Err(Error::Invalid("training needs at least one non-empty clip".into()));
        }
        let mut out = Self { ids: Vec::new(), samples, noisy: Vec::new(), clean: Vec::new(), noise: Vec::new() };
        for (id, x, s, n) in clips {
            out.ids.push(id.clone());
            out.noisy.extend(fitted::<T>(x, samples));
            out.clean.extend(fitted::<T>(s, samples));
            out.noise.extend(fitted::<T>(n, samples));
        }
        Ok(out)
    }

    pub fn load(manifest: &Manifest, split: Split, samples: usize) -> Result<Self> {
        let mut waves = Vec::new();
        for i in manifest.split(split) {
            let e = &manifest.entries[i];
            let read = |rel: &str| read_wav(&manifest.path(rel)).map(|w| w.into_samples());
            waves.push((e.id.clone(), read(&e.noisy)?, read(&e.clean)?, read(&e.noise)?));
        }
        if waves.is_empty() {
            return Err(Error::Invalid(format!("manifest has no {} clips", split.name())));
        }
        Self::from_waves(samples, &waves)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    fn gather(&self, src: &[T], idx: &[usize]) -> Result<Tensor<T>> {
        let n = self.samples;
        let mut data = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            data.extend_from_slice(&src[i * n..(i + 1) * n]);
        }
        Tensor::new(&[idx.len(), n], data)
    }

    /// `(noisy, clean, noise)` tensors `[B, samples]` for the given clips.
    pub fn batch(&self, idx: &[usize]) -> Result<[Tensor<T>; 3]> {
        Ok([self.gather(&self.noisy, idx)?, self.gather(&self.clean, idx)?, self.gather(&self.noise, idx)?])
    }
}

/// One optimizer step as written to the training log.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    pub speech: Option<f64>,
    pub noise: Option<f64>,
    pub merge: Option<f64>,
    pub wall_ms: f64,
}

pub const LOG_HEADER: &str = "step,epoch,loss,term_speech,term_noise,term_merge,wall_ms";

pub fn log_csv(records: &[StepRecord]) -> String {
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut out = format!("{LOG_HEADER}\n");
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{},{},{:.3}\n",
            r.step,
            r.epoch,
            r.loss,
            opt(r.speech),
            opt(r.noise),
            opt(r.merge),
            r.wall_ms
        ));
    }
    out
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    pub checkpoint: Checkpoint<T>,
    pub records: Vec<StepRecord>,
    /// How often each assignment won, `[identity, swap]`; separation runs only.
    pub permutations: Option<[usize; 2]>,
}

struct StepResult<T> {
    grads: BTreeMap<String, Tensor<T>>,
    bn: Vec<(String, BnSaved<T>)>,
    loss: f64,
    speech: Option<f64>,
    noise: Option<f64>,
    merge: Option<f64>,
}

fn scalar<T: Scalar>(ctx: &Ctx<T>, v: crate::tensor::Var) -> f64 {
    ctx.value(v).data()[0].f64()
}

/// Epoch/batch loop shared by every stage: shuffle, step, clip, update,
/// fold batch-norm statistics, record.
fn run<T: Scalar, F>(
    store: &mut ParamStore<T>,
    adam: &mut Adam<T>,
    clips: usize,
    cfg: &TrainConfig,
    mut step: F,
) -> Result<(Vec<StepRecord>, usize)>
where
    F: FnMut(&ParamStore<T>, &[usize]) -> Result<StepResult<T>>,
{
    let mut records = Vec::new();
    let mut order: Vec<usize> = (0..clips).collect();
    let mut epochs_done = 0;
    'outer: for epoch in 0..cfg.epochs {
        if cfg.shuffle {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
            order.shuffle(&mut rng);
        }
        for chunk in order.chunks(cfg.batch_size) {
            if cfg.max_steps.is_some_and(|m| records.len() >= m) {
                break 'outer;
            }
            let t0 = Instant::now();
            let mut r = step(store, chunk)?;
            if !r.loss.is_finite() {
                return Err(Error::Degenerate(format!("non-finite loss at step {}", records.len() + 1)));
            }
            if let Some(c) = cfg.grad_clip {
                clip_grad_norm(&mut r.grads, c);
            }
            adam.step(store, &r.grads)?;
            apply_bn_stats(store, &r.bn)?;
            let rec = StepRecord {
                step: records.len() + 1,
                epoch: epoch + 1,
                loss: r.loss,
                speech: r.speech,
                noise: r.noise,
                merge: r.merge,
                wall_ms: t0.elapsed().as_secs_f64() * 1e3,
            };
            if cfg.log_every > 0 && rec.step % cfg.log_every == 0 {
                log::info!("step {} epoch {} loss {:.6}", rec.step, rec.epoch, rec.loss);
            }
            records.push(rec);
        }
        epochs_done = epoch + 1;
    }
    if records.is_empty() {
        return Err(Error::Config("training ran zero steps".into()));
    }
    Ok((records, epochs_done))
}

fn meta(net: &SnNet, stage: Stage, steps: usize, epochs: usize, seed: u64) -> CheckpointMeta {
    CheckpointMeta {
        model: net.cfg.clone(),
        merge: net.merge,
        stage,
        step: steps as u64,
        epoch: epochs as u64,
        seed,
        adam: None,
    }
}

fn starts_with_any(name: &str, prefixes: &[&str]) -> bool {
    prefixes.iter().any(|p| name.starts_with(p))
}

/// Replaces the running batch-norm statistics touched by `forward` with
/// their average over one pass through `clips` at the final weights.
fn recalibrate_bn<T: Scalar, F>(store: &mut ParamStore<T>, clips: &Clips<T>, batch: usize, forward: F) -> Result<()>
where
    F: Fn(&mut Ctx<T>, &[usize]) -> Result<()>,
{
    let mut sums: BTreeMap<String, (Vec<f64>, Vec<f64>, usize)> = BTreeMap::new();
    let all: Vec<usize> = (0..clips.len()).collect();
    for chunk in all.chunks(batch.max(1)) {
        let mut ctx = Ctx::new(store, false);
        ctx.bn_mode = BnMode::Train;
        forward(&mut ctx, chunk)?;
        for (prefix, saved) in ctx.bn_stats() {
            let e = sums
                .entry(prefix)
                .or_insert_with(|| (vec![0.0; saved.mean.len()], vec![0.0; saved.var.len()], 0));
            e.0.iter_mut().zip(&saved.mean).for_each(|(a, v)| *a += v.f64());
            e.1.iter_mut().zip(&saved.var).for_each(|(a, v)| *a += v.f64());
            e.2 += 1;
        }
    }
    for (prefix, (mean, var, n)) in sums {
        let avg = |v: Vec<f64>| Tensor::from_f64(&[v.len()], &v.iter().map(|x| x / n as f64).collect::<Vec<_>>());
        *store.buffer_mut(&format!("{prefix}.running_mean"))? = avg(mean)?;
        *store.buffer_mut(&format!("{prefix}.running_var"))? = avg(var)?;
    }
    Ok(())
}

/// Trains both branches and the interaction modules on
/// `L_speech + alpha L_noise`. Merge parameters, if any, are left untouched
/// and have no optimizer state.
pub fn train_stage1<T: Scalar>(
    net: &SnNet,
    mut store: ParamStore<T>,
    clips: &Clips<T>,
    cfg: &TrainConfig,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    let names: Vec<String> =
        store.trainable_names().into_iter().filter(|n| starts_with_any(n, &BRANCH_PREFIXES)).collect();
    let mut adam = Adam::new(cfg.adam, &store, &names)?;
    let branches = SnNet { cfg: net.cfg.clone(), merge: false };
    let stft = net.cfg.stft();
    let weights = LossWeights { alpha: cfg.weights.alpha, beta: 0.0 };
    let (records, epochs) = run(&mut store, &mut adam, clips.len(), cfg, |store, idx| {
        let [noisy, clean, noise] = clips.batch(idx)?;
        let mut ctx = Ctx::new(store, true);
        let x = ctx.input(noisy);
        let out = branches.forward(&mut ctx, x, &ForwardOptions::train())?;
        let targets = Targets::new(&mut ctx.g, clean, noise, stft)?;
        let terms = combined_loss(&mut ctx.g, out.speech.spec, out.noise.spec, None, &targets, weights, stft)?;
        let grads = ctx.g.backward(terms.total)?;
        Ok(StepResult {
            grads: ctx.param_grads(&grads),
            bn: ctx.bn_stats(),
            loss: scalar(&ctx, terms.total),
            speech: Some(scalar(&ctx, terms.speech)),
            noise: Some(scalar(&ctx, terms.noise)),
            merge: None,
        })
    })?;
    if cfg.recalibrate_bn {
        recalibrate_bn(&mut store, clips, cfg.batch_size, |ctx, idx| {
            let x = ctx.input(clips.batch(idx)?[0].clone());
            let opts = ForwardOptions::train();
            branches.forward(ctx, x, &opts).map(|_| ())
        })?;
    }
    let seed = store.seed();
    let checkpoint =
        Checkpoint { meta: meta(net, Stage::One, records.len(), epochs, seed), store, adam: Some(adam) };
    Ok(TrainOutcome { checkpoint, records, permutations: None })
}

/// Branch waveforms `[T * hop]` per clip from the frozen branches, with
/// batch norm on running statistics.
pub fn branch_outputs<T: Scalar>(
    net: &SnNet,
    store: &ParamStore<T>,
    clips: &Clips<T>,
    batch: usize,
) -> Result<Vec<[Vec<T>; 2]>> {
    let branches = SnNet { cfg: net.cfg.clone(), merge: false };
    let all: Vec<usize> = (0..clips.len()).collect();
    let mut out = Vec::with_capacity(clips.len());
    for chunk in all.chunks(batch.max(1)) {
        let [noisy, _, _] = clips.batch(chunk)?;
        let mut ctx = Ctx::new(store, false);
        let x = ctx.input(noisy);
        let o = branches.forward(&mut ctx, x, &ForwardOptions::infer())?;
        let (s, n) = (ctx.value(o.speech.wave), ctx.value(o.noise.wave));
        let w = s.shape()[1];
        for b in 0..chunk.len() {
            out.push([s.data()[b * w..(b + 1) * w].to_vec(), n.data()[b * w..(b + 1) * w].to_vec()]);
        }
    }
    Ok(out)
}

/// Trains only the merge stage on `L_merge`, starting from a stage-1
/// checkpoint. Branch and interaction parameters are frozen and their
/// outputs are computed once up front.
pub fn train_stage2<T: Scalar>(init: Checkpoint<T>, clips: &Clips<T>, cfg: &TrainConfig) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    if !init.meta.merge {
        return Err(Error::Config("stage 2 needs an enhancement checkpoint; this one has no merge stage".into()));
    }
    if init.meta.stage == Stage::Separation {
        return Err(Error::Config("stage 2 cannot start from a separation checkpoint".into()));
    }
    let net = init.net()?;
    let mut store = init.store;
    for p in BRANCH_PREFIXES {
        store.freeze_prefix(p);
    }
    let names = store.trainable_names();
    if names.iter().any(|n| !n.starts_with(MERGE_PREFIX)) {
        return Err(Error::Invalid("stage 2 would train parameters outside the merge stage".into()));
    }
    let mut adam = Adam::new(cfg.adam, &store, &names)?;
    let branch = branch_outputs(&net, &store, clips, cfg.batch_size)?;
    let stft = net.cfg.stft();
    let opts = ForwardOptions { branch_bn: BnMode::Infer, merge_bn: BnMode::Train, ..ForwardOptions::train() };
    let stack = |idx: &[usize], k: usize| -> Result<Tensor<T>> {
        let w = branch[0][k].len();
        let mut data = Vec::with_capacity(idx.len() * w);
        for &i in idx {
            data.extend_from_slice(&branch[i][k]);
        }
        Tensor::new(&[idx.len(), w], data)
    };
    let (records, epochs) = run(&mut store, &mut adam, clips.len(), cfg, |store, idx| {
        let [noisy, clean, noise] = clips.batch(idx)?;
        let mut ctx = Ctx::new(store, true);
        let s = ctx.input(stack(idx, 0)?);
        let n = ctx.input(stack(idx, 1)?);
        let x = ctx.input(noisy);
        let merged = net.merge_stage(&mut ctx, s, n, x, &opts)?;
        let targets = Targets::new(&mut ctx.g, clean, noise, stft)?;
        let loss = merge_loss(&mut ctx.g, merged.wave, &targets, stft)?;
        let grads = ctx.g.backward(loss)?;
        let value = scalar(&ctx, loss);
        Ok(StepResult {
            grads: ctx.param_grads(&grads),
            bn: ctx.bn_stats(),
            loss: value,
            speech: None,
            noise: None,
            merge: Some(value),
        })
    })?;
    if cfg.recalibrate_bn {
        recalibrate_bn(&mut store, clips, cfg.batch_size, |ctx, idx| {
            let s = ctx.input(stack(idx, 0)?);
            let n = ctx.input(stack(idx, 1)?);
            let x = ctx.input(clips.batch(idx)?[0].clone());
            net.merge_stage(ctx, s, n, x, &opts).map(|_| ())
        })?;
    }
    store.unfreeze_all();
    let seed = store.seed();
    let checkpoint =
        Checkpoint { meta: meta(&net, Stage::Two, records.len(), epochs, seed), store, adam: Some(adam) };
    Ok(TrainOutcome { checkpoint, records, permutations: None })
}

/// Trains the two-output network with the permutation-invariant loss; the
/// "clean" and "noise" references of each clip are the two sources.
pub fn train_separation<T: Scalar>(
    net: &SnNet,
    mut store: ParamStore<T>,
    clips: &Clips<T>,
    cfg: &TrainConfig,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    if net.merge {
        return Err(Error::Config("separation training needs the network without a merge stage".into()));
    }
    let names = store.trainable_names();
    let mut adam = Adam::new(cfg.adam, &store, &names)?;
    let stft = net.cfg.stft();
    let mut counts = [0usize; 2];
    let (records, epochs) = run(&mut store, &mut adam, clips.len(), cfg, |store, idx| {
        let [noisy, first, second] = clips.batch(idx)?;
        let mut ctx = Ctx::new(store, true);
        let x = ctx.input(noisy);
        let out = net.forward(&mut ctx, x, &ForwardOptions::train())?;
        let targets = Targets::new(&mut ctx.g, first, second, stft)?;
        let e1 = project(&mut ctx.g, out.speech.spec, stft)?;
        let e2 = project(&mut ctx.g, out.noise.spec, stft)?;
        let (loss, perms) = pit_loss_graph(&mut ctx.g, [e1, e2], [targets.clean_spec, targets.noise_spec])?;
        for p in perms {
            counts[(p == Permutation::Swap) as usize] += 1;
        }
        let grads = ctx.g.backward(loss)?;
        Ok(StepResult {
            grads: ctx.param_grads(&grads),
            bn: ctx.bn_stats(),
            loss: scalar(&ctx, loss),
            speech: None,
            noise: None,
            merge: None,
        })
    })?;
    if cfg.recalibrate_bn {
        recalibrate_bn(&mut store, clips, cfg.batch_size, |ctx, idx| {
            let x = ctx.input(clips.batch(idx)?[0].clone());
            net.forward(ctx, x, &ForwardOptions::train()).map(|_| ())
        })?;
    }
    log::info!("permutation counts: identity {} swap {}", counts[0], counts[1]);
    let seed = store.seed();
    let checkpoint =
        Checkpoint { meta: meta(net, Stage::Separation, records.len(), epochs, seed), store, adam: Some(adam) };
    Ok(TrainOutcome { checkpoint, records, permutations: Some(counts) })
}

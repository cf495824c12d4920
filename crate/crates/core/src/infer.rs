//! Running a trained checkpoint: windowed enhancement and separation,
//! test-set evaluation, and attention/interaction dumps.

use std::thread;

use crate::data::{Manifest, Split};
use crate::dsp::wav::read_wav;
use crate::dsp::Waveform;
use crate::error::{Error, Result};
use crate::metrics::{ClipMetrics, MetricReport};
use crate::model::{Branch, ForwardOptions, SnNet};
use crate::nn::{Ctx, ParamStore};
use crate::tensor::{Scalar, Tensor};
use crate::train::{Checkpoint, Stage};

/// Long inputs are processed in windows of this many samples...
pub const WINDOW_SAMPLES: usize = 32_000;
/// ...starting this far apart, with linear cross-fades over the overlap.
pub const WINDOW_HOP: usize = 16_000;

/// Window start offsets covering `len` samples. The last window is aligned
/// to the end of the signal so every window is full length.
pub fn window_starts(len: usize, window: usize, hop: usize) -> Vec<usize> {
    if len <= window {
        return vec![0];
    }
    let mut starts = Vec::new();
    let mut s = 0;
    while s + window < len {
        starts.push(s);
        s += hop;
    }
    starts.push(len - window);
    starts
}

/// Applies `f` to overlapping windows of `x` and cross-fades the results.
/// `f` maps a window to `outputs` signals of the same length.
pub fn windowed<F>(x: &[f64], outputs: usize, window: usize, hop: usize, mut f: F) -> Result<Vec<Vec<f64>>>
where
    F: FnMut(&[f64]) -> Result<Vec<Vec<f64>>>,
{
    let starts = window_starts(x.len(), window, hop);
    if starts.len() == 1 {
        return f(x);
    }
    let fade = window - hop;
    let mut acc = vec![vec![0.0; x.len()]; outputs];
    let mut norm = vec![0.0; x.len()];
    for (i, &s) in starts.iter().enumerate() {
        let ys = f(&x[s..s + window])?;
        for t in 0..window {
            let mut w = 1.0f64;
            if i > 0 && t < fade {
                w = w.min((t as f64 + 0.5) / fade as f64);
            }
            if i + 1 < starts.len() && t >= window - fade {
                w = w.min(((window - t) as f64 - 0.5) / fade as f64);
            }
            norm[s + t] += w;
            for (a, y) in acc.iter_mut().zip(&ys) {
                a[s + t] += w * y[t];
            }
        }
    }
    for a in &mut acc {
        for (v, n) in a.iter_mut().zip(&norm) {
            *v /= n;
        }
    }
    Ok(acc)
}

/// A network with its trained parameters, evaluated with batch norm on
/// running statistics.
#[derive(Debug, Clone)]
pub struct Model<T> {
    pub net: SnNet,
    pub store: ParamStore<T>,
    pub stage: Stage,
}

impl<T: Scalar> Model<T> {
    pub fn from_checkpoint(ck: Checkpoint<T>) -> Result<Self> {
        Ok(Self { net: ck.net()?, store: ck.store, stage: ck.meta.stage })
    }

    /// Whether the merge stage has been trained and produces the final output.
    pub fn uses_merge(&self) -> bool {
        self.net.merge && self.stage == Stage::Two
    }

    /// Network outputs for one window: the enhanced signal (merged when the
    /// merge stage is trained, otherwise the speech branch) followed by the
    /// noise-branch estimate, each the length of `x`.
    pub fn run_window(&self, x: &[f64]) -> Result<Vec<Vec<f64>>> {
        let len = x.len();
        let mut ctx = Ctx::new(&self.store, false);
        let input = ctx.input(Tensor::new(&[1, len], x.iter().map(|&v| T::c(v)).collect())?);
        let net = SnNet { cfg: self.net.cfg.clone(), merge: self.uses_merge() };
        let out = net.forward(&mut ctx, input, &ForwardOptions::infer())?;
        let take = |v| ctx.value(v).data()[..len].iter().map(|s: &T| s.f64()).collect::<Vec<f64>>();
        let first = match out.merged {
            Some(m) => take(m.wave),
            None => take(out.speech.wave),
        };
        Ok(vec![first, take(out.noise.wave)])
    }

    pub fn enhance(&self, noisy: &Waveform) -> Result<Waveform> {
        if noisy.len() == 0 {
            return Err(Error::Invalid("cannot enhance an empty signal".into()));
        }
        let mut ys = windowed(noisy.samples(), 2, WINDOW_SAMPLES, WINDOW_HOP, |w| self.run_window(w))?;
        Waveform::new(ys.swap_remove(0))
    }

    /// The two branch outputs of a separation network, in branch order.
    pub fn separate(&self, mixture: &Waveform) -> Result<[Waveform; 2]> {
        if self.net.merge {
            return Err(Error::Invalid("separation needs a checkpoint of the two-output network".into()));
        }
        if mixture.len() == 0 {
            return Err(Error::Invalid("cannot separate an empty signal".into()));
        }
        let ys = windowed(mixture.samples(), 2, WINDOW_SAMPLES, WINDOW_HOP, |w| self.run_window(w))?;
        let [a, b]: [Vec<f64>; 2] = ys.try_into().map_err(|_| Error::Invalid("expected two outputs".into()))?;
        Ok([Waveform::new(a)?, Waveform::new(b)?])
    }

    /// Metrics for one clip. For separation networks each reference is
    /// matched with its better-scoring estimate and the two scores averaged.
    pub fn score(&self, id: &str, noisy: &Waveform, clean: &Waveform, noise: &Waveform) -> Result<ClipMetrics> {
        if !self.net.merge {
            let [e1, e2] = self.separate(noisy)?;
            let (r1, r2) = (clean.samples(), noise.samples());
            let x = noisy.samples();
            let pair = |a: &Waveform, b: &Waveform| -> Result<[ClipMetrics; 2]> {
                Ok([ClipMetrics::compute(id, r1, a.samples(), x)?, ClipMetrics::compute(id, r2, b.samples(), x)?])
            };
            let keep = pair(&e1, &e2)?;
            let swap = pair(&e2, &e1)?;
            let sum = |m: &[ClipMetrics; 2]| m[0].si_sdr_db + m[1].si_sdr_db;
            let best = if sum(&swap) > sum(&keep) { swap } else { keep };
            let avg = |f: fn(&ClipMetrics) -> f64| 0.5 * (f(&best[0]) + f(&best[1]));
            return Ok(ClipMetrics {
                clip_id: id.to_string(),
                ssnr_db: avg(|m| m.ssnr_db),
                si_sdr_db: avg(|m| m.si_sdr_db),
                si_sdri_db: avg(|m| m.si_sdri_db),
            });
        }
        let est = self.enhance(noisy)?;
        ClipMetrics::compute(id, clean.samples(), est.samples(), noisy.samples())
    }

    /// Scores every clip of `split`, using up to `threads` workers. Rows
    /// keep manifest order regardless of the worker count.
    pub fn evaluate(&self, manifest: &Manifest, split: Split, threads: usize) -> Result<MetricReport> {
        let idx = manifest.split(split);
        if idx.is_empty() {
            return Err(Error::Invalid(format!("manifest has no {} clips", split.name())));
        }
        let one = |i: usize| -> Result<ClipMetrics> {
            let e = &manifest.entries[i];
            let noisy = read_wav(&manifest.path(&e.noisy))?;
            let clean = read_wav(&manifest.path(&e.clean))?;
            let noise = read_wav(&manifest.path(&e.noise))?;
            self.score(&e.id, &noisy, &clean, &noise)
        };
        let threads = threads.clamp(1, idx.len());
        let rows: Vec<Result<ClipMetrics>> = if threads == 1 {
            idx.iter().map(|&i| one(i)).collect()
        } else {
            let per = idx.len().div_ceil(threads);
            thread::scope(|s| {
                let handles: Vec<_> =
                    idx.chunks(per).map(|c| s.spawn(move || c.iter().map(|&i| one(i)).collect::<Vec<_>>())).collect();
                handles.into_iter().flat_map(|h| h.join().expect("evaluation worker panicked")).collect()
            })
        };
        Ok(MetricReport { rows: rows.into_iter().collect::<Result<_>>()? })
    }
}

/// A named matrix for inspection output.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for r in 0..self.rows {
            let line: Vec<String> = self.row(r).iter().map(|v| v.to_string()).collect();
            out.push_str(&line.join(","));
            out.push('\n');
        }
        out
    }
}

fn attention_matrix(name: String, t: &Tensor<f64>) -> Matrix {
    let (r, c) = (t.shape()[1], t.shape()[2]);
    Matrix { name, rows: r, cols: c, data: t.data()[..r * c].to_vec() }
}

/// Channel-averaged `[T, F]` map of a `[1, T, F, C]` mask.
fn mask_matrix(name: String, t: &Tensor<f64>) -> Matrix {
    let [_, rows, cols, ch] = [t.shape()[0], t.shape()[1], t.shape()[2], t.shape()[3]];
    let data = t.data()[..rows * cols * ch].chunks_exact(ch).map(|c| c.iter().sum::<f64>() / ch as f64).collect();
    Matrix { name, rows, cols, data }
}

impl Model<f64> {
    /// Temporal and frequency attention of every RA block in both branches
    /// and the interaction masks, for the first window of `x`. File-style
    /// names: `sa_t_<branch>_<block>`, `sa_f_<branch>_<block>`, and
    /// `interact_mask_<n2s|s2n>_<block>`.
    pub fn inspect(&self, x: &Waveform) -> Result<Vec<Matrix>> {
        if x.len() == 0 {
            return Err(Error::Invalid("cannot inspect an empty signal".into()));
        }
        let len = x.len().min(WINDOW_SAMPLES);
        let mut ctx = Ctx::new(&self.store, false);
        let input = ctx.input(Tensor::new(&[1, len], x.samples()[..len].to_vec())?);
        let net = SnNet { cfg: self.net.cfg.clone(), merge: false };
        let out = net.forward(&mut ctx, input, &ForwardOptions::infer())?;
        let mut mats = Vec::new();
        for (i, block) in out.blocks.iter().enumerate() {
            for (bi, b) in Branch::BOTH.iter().enumerate() {
                let ra = &block.ra[bi];
                mats.push(attention_matrix(format!("sa_t_{}_{i}", b.name()), ctx.value(ra.sa_time)));
                mats.push(attention_matrix(format!("sa_f_{}_{i}", b.name()), ctx.value(ra.sa_freq)));
            }
            if let Some(io) = &block.interaction {
                mats.push(mask_matrix(format!("interact_mask_n2s_{i}"), ctx.value(io.mask_n2s)));
                mats.push(mask_matrix(format!("interact_mask_s2n_{i}"), ctx.value(io.mask_s2n)));
            }
        }
        Ok(mats)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn window_layout() {
        assert_eq!(window_starts(100, 200, 100), vec![0]);
        assert_eq!(window_starts(200, 200, 100), vec![0]);
        assert_eq!(window_starts(350, 200, 100), vec![0, 100, 150]);
    }

    #[test]
    fn cross_fade_reconstructs_identity() {
        let x: Vec<f64> = (0..1234).map(|i| (i as f64 * 0.37).sin()).collect();
        let y = windowed(&x, 1, 400, 200, |w| Ok(vec![w.to_vec()])).unwrap();
        for (a, b) in x.iter().zip(&y[0]) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_fade_is_linear_in_the_overlap() {
        let x = vec![0.0; 600];
        let mut k = 0.0;
        let y = windowed(&x, 1, 400, 200, |w| {
            k += 1.0;
            Ok(vec![vec![k; w.len()]])
        })
        .unwrap();
        // Windows at 0 and 200 carry constants 1 and 2.
        assert_eq!(y[0][0], 1.0);
        assert_eq!(y[0][599], 2.0);
        let mid = y[0][300];
        assert!((mid - 1.5).abs() < 0.01, "{mid}");
        assert!(y[0][200..400].windows(2).all(|w| w[1] >= w[0]));
    }
}

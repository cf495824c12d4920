//! Training objectives on power-law compressed spectra.

use serde::{Deserialize, Serialize};

use crate::dsp::{ComplexSpectrogram, StftConfig, Waveform};
use crate::error::{Error, Result};
use crate::tensor::{Graph, Scalar, Tensor, Var};

/// Compression exponent applied to spectral magnitudes.
pub const COMPRESS_POWER: f64 = 0.3;
/// Added to `|z|^2` before compression so the gradient stays finite at zero.
pub const COMPRESS_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { alpha: 1.0, beta: 0.0 }
    }
}

/// `stft(istft(S))` for `[B, T, bins, 2]` spectra.
pub fn project<T: Scalar>(g: &mut Graph<T>, spec: Var, cfg: StftConfig) -> Result<Var> {
    let wave = g.istft(spec, cfg)?;
    g.stft(wave, cfg)
}

fn compress<T: Scalar>(g: &mut Graph<T>, spec: Var) -> Result<Var> {
    g.power_compress(spec, T::c(COMPRESS_POWER), T::c(COMPRESS_EPS))
}

/// Per-example mean over bins of `|c(est) - c(ref)|^2`, shape `[B]`.
pub fn compressed_mse_per_example<T: Scalar>(g: &mut Graph<T>, est: Var, reference: Var) -> Result<Var> {
    if g.value(est).shape() != g.value(reference).shape() {
        return Err(Error::Shape(format!(
            "loss operands differ: {:?} vs {:?}",
            g.value(est).shape(),
            g.value(reference).shape()
        )));
    }
    let ce = compress(g, est)?;
    let cr = compress(g, reference)?;
    let d = g.sub(ce, cr)?;
    let sq = g.mul(d, d)?;
    let m = g.mean_per_batch(sq)?;
    // Each bin holds two squared components; the mean is per bin.
    Ok(g.affine(m, T::c(2.0), T::zero()))
}

/// Mean over all bins of `|c(est) - c(ref)|^2`.
pub fn compressed_mse<T: Scalar>(g: &mut Graph<T>, est: Var, reference: Var) -> Result<Var> {
    let per = compressed_mse_per_example(g, est, reference)?;
    Ok(g.mean(per))
}

/// Scalar loss nodes of the combined objective.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub total: Var,
    pub speech: Var,
    pub noise: Var,
    pub merge: Option<Var>,
}

/// References for the combined objective as graph constants.
#[derive(Debug, Clone, Copy)]
pub struct Targets {
    /// Clean speech waveform `[B, N]`.
    pub clean: Var,
    /// Clean speech spectrum `[B, T, bins, 2]`.
    pub clean_spec: Var,
    /// Noise spectrum `[B, T, bins, 2]`.
    pub noise_spec: Var,
}

impl Targets {
    pub fn new<T: Scalar>(g: &mut Graph<T>, clean: Tensor<T>, noise: Tensor<T>, cfg: StftConfig) -> Result<Self> {
        let clean = g.constant(clean);
        let noise = g.constant(noise);
        let clean_spec = g.stft(clean, cfg)?;
        let noise_spec = g.stft(noise, cfg)?;
        Ok(Self { clean, clean_spec, noise_spec })
    }
}

/// `L_speech + alpha L_noise + beta L_merge`. Branch estimates are projected
/// onto consistent spectra first; the merge term compares the STFT of the
/// merged waveform with the STFT of the clean reference. With `beta == 0`
/// the merge term is not built.
pub fn combined_loss<T: Scalar>(
    g: &mut Graph<T>,
    speech_spec: Var,
    noise_spec: Var,
    merged_wave: Option<Var>,
    targets: &Targets,
    weights: LossWeights,
    cfg: StftConfig,
) -> Result<LossTerms> {
    let ps = project(g, speech_spec, cfg)?;
    let pn = project(g, noise_spec, cfg)?;
    let speech = compressed_mse(g, ps, targets.clean_spec)?;
    let noise = compressed_mse(g, pn, targets.noise_spec)?;
    let weighted_noise = g.affine(noise, T::c(weights.alpha), T::zero());
    let mut total = g.add(speech, weighted_noise)?;
    let mut merge = None;
    if weights.beta != 0.0 {
        let wave = merged_wave.ok_or_else(|| Error::Invalid("merge weight set but no merged waveform".into()))?;
        let m = merge_loss(g, wave, targets, cfg)?;
        let weighted = g.affine(m, T::c(weights.beta), T::zero());
        total = g.add(total, weighted)?;
        merge = Some(m);
    }
    Ok(LossTerms { total, speech, noise, merge })
}

/// Compressed spectral MSE between the merged waveform and the clean reference.
pub fn merge_loss<T: Scalar>(g: &mut Graph<T>, merged_wave: Var, targets: &Targets, cfg: StftConfig) -> Result<Var> {
    let est = g.stft(merged_wave, cfg)?;
    compressed_mse(g, est, targets.clean_spec)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Permutation {
    Identity,
    Swap,
}

/// Permutation-invariant loss over two estimates and two references, chosen
/// per example. Returns the batch-mean loss and each example's assignment;
/// ties go to the identity.
pub fn pit_loss_graph<T: Scalar>(
    g: &mut Graph<T>,
    est: [Var; 2],
    refs: [Var; 2],
) -> Result<(Var, Vec<Permutation>)> {
    let a = compressed_mse_per_example(g, est[0], refs[0])?;
    let b = compressed_mse_per_example(g, est[1], refs[1])?;
    let c = compressed_mse_per_example(g, est[0], refs[1])?;
    let d = compressed_mse_per_example(g, est[1], refs[0])?;
    let identity = g.add(a, b)?;
    let swap = g.add(c, d)?;
    let (li, ls) = (g.value(identity).data().to_vec(), g.value(swap).data().to_vec());
    let perms: Vec<Permutation> = li
        .iter()
        .zip(&ls)
        .map(|(i, s)| if s < i { Permutation::Swap } else { Permutation::Identity })
        .collect();
    let pick: Vec<T> = perms.iter().map(|p| if *p == Permutation::Swap { T::one() } else { T::zero() }).collect();
    let keep: Vec<T> = pick.iter().map(|&v| T::one() - v).collect();
    let n = perms.len();
    let pick = g.constant(Tensor::new(&[n], pick)?);
    let keep = g.constant(Tensor::new(&[n], keep)?);
    let chosen_i = g.mul(identity, keep)?;
    let chosen_s = g.mul(swap, pick)?;
    let chosen = g.add(chosen_i, chosen_s)?;
    Ok((g.mean(chosen), perms))
}

fn spec_tensor(s: &ComplexSpectrogram) -> Result<Tensor<f64>> {
    Tensor::new(&[1, s.frames(), s.bins(), 2], s.data().to_vec())
}

fn wave_tensor(w: &Waveform) -> Result<Tensor<f64>> {
    Tensor::new(&[1, w.len()], w.samples().to_vec())
}

fn spectrogram(t: &Tensor<f64>) -> Result<ComplexSpectrogram> {
    ComplexSpectrogram::new(t.shape()[1], t.shape()[2], t.data().to_vec())
}

/// Projects a spectrogram onto the set of consistent spectrograms.
pub fn consistency_project(s: &ComplexSpectrogram, cfg: StftConfig) -> Result<ComplexSpectrogram> {
    let mut g = Graph::new();
    let v = g.constant(spec_tensor(s)?);
    let p = project(&mut g, v, cfg)?;
    spectrogram(g.value(p))
}

/// Compressed spectral MSE between two spectrograms.
pub fn spectral_loss(est: &ComplexSpectrogram, reference: &ComplexSpectrogram) -> Result<f64> {
    let mut g = Graph::new();
    let e = g.constant(spec_tensor(est)?);
    let r = g.constant(spec_tensor(reference)?);
    let l = compressed_mse(&mut g, e, r)?;
    Ok(g.value(l).data()[0])
}

/// Values of the combined objective's terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossValues {
    pub total: f64,
    pub speech: f64,
    pub noise: f64,
    pub merge: f64,
}

/// The combined objective on concrete signals.
pub fn combined_loss_value(
    speech_est: &ComplexSpectrogram,
    noise_est: &ComplexSpectrogram,
    merged: &Waveform,
    clean: &Waveform,
    noise: &Waveform,
    weights: LossWeights,
    cfg: StftConfig,
) -> Result<LossValues> {
    let mut g = Graph::new();
    let s = g.constant(spec_tensor(speech_est)?);
    let n = g.constant(spec_tensor(noise_est)?);
    let m = g.constant(wave_tensor(merged)?);
    let targets = Targets::new(&mut g, wave_tensor(clean)?, wave_tensor(noise)?, cfg)?;
    let terms = combined_loss(&mut g, s, n, Some(m), &targets, weights, cfg)?;
    let merge = match terms.merge {
        Some(v) => g.value(v).data()[0],
        None => {
            let v = merge_loss(&mut g, m, &targets, cfg)?;
            g.value(v).data()[0]
        }
    };
    Ok(LossValues {
        total: g.value(terms.total).data()[0],
        speech: g.value(terms.speech).data()[0],
        noise: g.value(terms.noise).data()[0],
        merge,
    })
}

/// Permutation-invariant spectral loss for one example.
pub fn pit_loss(
    est1: &ComplexSpectrogram,
    est2: &ComplexSpectrogram,
    ref1: &ComplexSpectrogram,
    ref2: &ComplexSpectrogram,
) -> Result<(f64, Permutation)> {
    let mut g = Graph::new();
    let e = [g.constant(spec_tensor(est1)?), g.constant(spec_tensor(est2)?)];
    let r = [g.constant(spec_tensor(ref1)?), g.constant(spec_tensor(ref2)?)];
    let (l, perms) = pit_loss_graph(&mut g, e, r)?;
    Ok((g.value(l).data()[0], perms[0]))
}

//! Linear time-frequency operators and their adjoints over flat buffers.
//!
//! Spectra are laid out `[frames, bins, 2]` with the real part first. Every
//! operator here is linear, so the adjoints double as reverse-mode gradients.

use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::tensor::Scalar;

/// Analysis/synthesis geometry: window and DFT length `n_fft`, frame advance `hop`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct StftConfig {
    pub n_fft: usize,
    pub hop: usize,
}

impl Default for StftConfig {
    fn default() -> Self {
        Self { n_fft: 320, hop: 160 }
    }
}

impl StftConfig {
    pub fn bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    pub fn frames_for(&self, len: usize) -> usize {
        len.div_ceil(self.hop)
    }

    pub fn padded_len(&self, frames: usize) -> usize {
        frames * self.hop
    }
}

/// Fraction of the mean window-square coverage below which
/// [`StftPlan::synthesis_taper`] fades the signal out.
pub const SYNTHESIS_FLOOR: f64 = 0.25;

/// Periodic Hann window `0.5 (1 - cos(2 pi k / n))`.
pub fn hann<T: Scalar>(n: usize) -> Vec<T> {
    (0..n)
        .map(|k| {
            let phase = 2.0 * std::f64::consts::PI * k as f64 / n as f64;
            T::c(0.5 * (1.0 - phase.cos()))
        })
        .collect()
}

pub struct StftPlan<T: Scalar> {
    pub cfg: StftConfig,
    window: Vec<T>,
    fwd: Arc<dyn Fft<T>>,
    inv: Arc<dyn Fft<T>>,
}

impl<T: Scalar> StftPlan<T> {
    pub fn new(cfg: StftConfig) -> Self {
        assert!(cfg.n_fft >= 2 && cfg.n_fft % 2 == 0, "n_fft must be even");
        assert!(cfg.hop >= 1 && cfg.hop <= cfg.n_fft, "hop must lie in 1..=n_fft");
        let mut planner = FftPlanner::new();
        Self {
            cfg,
            window: hann(cfg.n_fft),
            fwd: planner.plan_fft_forward(cfg.n_fft),
            inv: planner.plan_fft_inverse(cfg.n_fft),
        }
    }

    pub fn window(&self) -> &[T] {
        &self.window
    }

    fn spec_len(&self, frames: usize) -> usize {
        frames * self.cfg.bins() * 2
    }

    /// Windowed one-sided DFT of every frame; `x` is zero-extended past its end.
    pub fn analyze(&self, x: &[T], frames: usize, out: &mut [T]) {
        let (n, hop, bins) = (self.cfg.n_fft, self.cfg.hop, self.cfg.bins());
        assert_eq!(out.len(), self.spec_len(frames));
        let mut buf = vec![Complex::new(T::zero(), T::zero()); n];
        for t in 0..frames {
            for (k, b) in buf.iter_mut().enumerate() {
                let v = x.get(t * hop + k).copied().unwrap_or(T::zero());
                *b = Complex::new(v * self.window[k], T::zero());
            }
            self.fwd.process(&mut buf);
            let dst = &mut out[t * bins * 2..(t + 1) * bins * 2];
            for k in 0..bins {
                dst[2 * k] = buf[k].re;
                dst[2 * k + 1] = buf[k].im;
            }
        }
    }

    /// Adjoint of [`analyze`](Self::analyze); accumulates into `dx`.
    pub fn analyze_adjoint(&self, dspec: &[T], frames: usize, dx: &mut [T]) {
        let (n, hop, bins) = (self.cfg.n_fft, self.cfg.hop, self.cfg.bins());
        assert_eq!(dspec.len(), self.spec_len(frames));
        let mut buf = vec![Complex::new(T::zero(), T::zero()); n];
        for t in 0..frames {
            let src = &dspec[t * bins * 2..(t + 1) * bins * 2];
            for (k, b) in buf.iter_mut().enumerate() {
                *b = if k < bins {
                    Complex::new(src[2 * k], src[2 * k + 1])
                } else {
                    Complex::new(T::zero(), T::zero())
                };
            }
            // Unnormalized inverse DFT: sum_k Z_k e^{+i 2 pi k n / N}.
            self.inv.process(&mut buf);
            for k in 0..n {
                if let Some(d) = dx.get_mut(t * hop + k) {
                    *d += self.window[k] * buf[k].re;
                }
            }
        }
    }

    /// Per-sample weighted-overlap-add normalizer `sum_t w^2[p - t*hop]`.
    pub fn synthesis_norm(&self, frames: usize) -> Vec<T> {
        let (n, hop) = (self.cfg.n_fft, self.cfg.hop);
        let len = frames * hop;
        let mut norm = vec![T::zero(); len];
        for t in 0..frames {
            for k in 0..n {
                if let Some(d) = norm.get_mut(t * hop + k) {
                    *d += self.window[k] * self.window[k];
                }
            }
        }
        norm
    }

    /// Per-sample factor `d / max(d, floor)` with `d` the synthesis normalizer
    /// and `floor` [`SYNTHESIS_FLOOR`] times its mean over a full overlap.
    /// Multiplying an inverse STFT by it turns the division by `d` into a
    /// division by `max(d, floor)`. It is 1 except on the leading samples that
    /// only the rising edge of the first window covers, where `1 / d` would
    /// amplify any inconsistency in the spectrum without bound.
    pub fn synthesis_taper(&self, frames: usize) -> Vec<T> {
        let energy = self.window.iter().fold(T::zero(), |a, &w| a + w * w);
        let floor = T::c(SYNTHESIS_FLOOR) * energy / T::c(self.cfg.hop as f64);
        self.synthesis_norm(frames).into_iter().map(|d| d / d.max(floor)).collect()
    }

    /// Inverse STFT by windowed overlap-add with `sum w^2` normalization.
    /// Output length is `frames * hop`; samples with zero window coverage are zero.
    pub fn synthesize(&self, spec: &[T], frames: usize, out: &mut [T]) {
        let (n, hop, bins) = (self.cfg.n_fft, self.cfg.hop, self.cfg.bins());
        assert_eq!(spec.len(), self.spec_len(frames));
        assert_eq!(out.len(), frames * hop);
        out.fill(T::zero());
        let scale = T::one() / T::c(n as f64);
        let mut buf = vec![Complex::new(T::zero(), T::zero()); n];
        for t in 0..frames {
            let src = &spec[t * bins * 2..(t + 1) * bins * 2];
            hermitian_fill(src, bins, &mut buf);
            self.inv.process(&mut buf);
            for k in 0..n {
                if let Some(o) = out.get_mut(t * hop + k) {
                    *o += self.window[k] * buf[k].re * scale;
                }
            }
        }
        for (o, &d) in out.iter_mut().zip(&self.synthesis_norm(frames)) {
            *o = if d > T::zero() { *o / d } else { T::zero() };
        }
    }

    /// Adjoint of [`synthesize`](Self::synthesize); accumulates into `dspec`.
    pub fn synthesize_adjoint(&self, dout: &[T], frames: usize, dspec: &mut [T]) {
        let (n, hop, bins) = (self.cfg.n_fft, self.cfg.hop, self.cfg.bins());
        assert_eq!(dout.len(), frames * hop);
        let norm = self.synthesis_norm(frames);
        let g: Vec<T> = dout
            .iter()
            .zip(&norm)
            .map(|(&d, &s)| if s > T::zero() { d / s } else { T::zero() })
            .collect();
        let inv_n = T::one() / T::c(n as f64);
        let mut buf = vec![Complex::new(T::zero(), T::zero()); n];
        for t in 0..frames {
            for (k, b) in buf.iter_mut().enumerate() {
                let v = g.get(t * hop + k).copied().unwrap_or(T::zero());
                *b = Complex::new(self.window[k] * v, T::zero());
            }
            self.fwd.process(&mut buf);
            let dst = &mut dspec[t * bins * 2..(t + 1) * bins * 2];
            for k in 0..bins {
                let edge = k == 0 || k == bins - 1;
                let c = if edge { inv_n } else { T::c(2.0) * inv_n };
                dst[2 * k] += c * buf[k].re;
                if !edge {
                    dst[2 * k + 1] += c * buf[k].im;
                }
            }
        }
    }
}

/// Expands a one-sided spectrum to a full Hermitian one. The imaginary parts
/// of the DC and Nyquist bins are ignored.
fn hermitian_fill<T: Scalar>(src: &[T], bins: usize, buf: &mut [Complex<T>]) {
    let n = buf.len();
    for k in 0..bins {
        let edge = k == 0 || k == bins - 1;
        let im = if edge { T::zero() } else { src[2 * k + 1] };
        buf[k] = Complex::new(src[2 * k], im);
        if !edge {
            buf[n - k] = Complex::new(src[2 * k], -im);
        }
    }
}

/// Rectangular framing: frame `t` holds `x[t*hop .. t*hop + n_fft]`, zero-extended.
pub fn frame<T: Scalar>(cfg: StftConfig, x: &[T], frames: usize, out: &mut [T]) {
    let k_len = cfg.n_fft;
    assert_eq!(out.len(), frames * k_len);
    for t in 0..frames {
        for k in 0..k_len {
            out[t * k_len + k] = x.get(t * cfg.hop + k).copied().unwrap_or(T::zero());
        }
    }
}

pub fn frame_adjoint<T: Scalar>(cfg: StftConfig, dframes: &[T], frames: usize, dx: &mut [T]) {
    let k_len = cfg.n_fft;
    for t in 0..frames {
        for k in 0..k_len {
            if let Some(d) = dx.get_mut(t * cfg.hop + k) {
                *d += dframes[t * k_len + k];
            }
        }
    }
}

/// Per-(frame, offset) overlap-add weights: `w[k] / sum w` at each output
/// sample, falling back to a plain average where the window sum vanishes.
pub fn overlap_add_weights<T: Scalar>(cfg: StftConfig, frames: usize) -> Vec<T> {
    let (n, hop) = (cfg.n_fft, cfg.hop);
    let len = frames * hop;
    let window = hann::<T>(n);
    let mut wsum = vec![T::zero(); len];
    let mut count = vec![0usize; len];
    for t in 0..frames {
        for k in 0..n {
            let p = t * hop + k;
            if p < len {
                wsum[p] += window[k];
                count[p] += 1;
            }
        }
    }
    let mut coef = vec![T::zero(); frames * n];
    for t in 0..frames {
        for k in 0..n {
            let p = t * hop + k;
            if p < len {
                coef[t * n + k] = if wsum[p] > T::zero() {
                    window[k] / wsum[p]
                } else {
                    T::one() / T::c(count[p] as f64)
                };
            }
        }
    }
    coef
}

pub fn overlap_add<T: Scalar>(cfg: StftConfig, frames_data: &[T], frames: usize, coef: &[T], out: &mut [T]) {
    let (n, hop) = (cfg.n_fft, cfg.hop);
    assert_eq!(out.len(), frames * hop);
    out.fill(T::zero());
    for t in 0..frames {
        for k in 0..n {
            if let Some(o) = out.get_mut(t * hop + k) {
                *o += coef[t * n + k] * frames_data[t * n + k];
            }
        }
    }
}

pub fn overlap_add_adjoint<T: Scalar>(cfg: StftConfig, dout: &[T], frames: usize, coef: &[T], dframes: &mut [T]) {
    let (n, hop) = (cfg.n_fft, cfg.hop);
    for t in 0..frames {
        for k in 0..n {
            if let Some(&d) = dout.get(t * hop + k) {
                dframes[t * n + k] += coef[t * n + k] * d;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn noise(n: usize, seed: u64) -> Vec<f64> {
        let mut s = seed;
        (0..n)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 11) as f64 / (1u64 << 53) as f64) - 0.5
            })
            .collect()
    }

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    /// <A x, y> = <x, A^T y> for each linear operator.
    #[test]
    fn adjoints_are_consistent() {
        let cfg = StftConfig { n_fft: 16, hop: 8 };
        let plan = StftPlan::<f64>::new(cfg);
        let frames = 5;
        let bins = cfg.bins();
        let x = noise(frames * cfg.hop, 1);
        let s = noise(frames * bins * 2, 2);

        let mut ax = vec![0.0; frames * bins * 2];
        plan.analyze(&x, frames, &mut ax);
        let mut aty = vec![0.0; x.len()];
        plan.analyze_adjoint(&s, frames, &mut aty);
        assert!((dot(&ax, &s) - dot(&x, &aty)).abs() < 1e-12);

        let mut sy = vec![0.0; frames * cfg.hop];
        plan.synthesize(&s, frames, &mut sy);
        let mut sty = vec![0.0; s.len()];
        plan.synthesize_adjoint(&x, frames, &mut sty);
        assert!((dot(&sy, &x) - dot(&s, &sty)).abs() < 1e-12);

        let fr = noise(frames * cfg.n_fft, 3);
        let mut fx = vec![0.0; fr.len()];
        frame(cfg, &x, frames, &mut fx);
        let mut fty = vec![0.0; x.len()];
        frame_adjoint(cfg, &fr, frames, &mut fty);
        assert!((dot(&fx, &fr) - dot(&x, &fty)).abs() < 1e-12);

        let coef = overlap_add_weights::<f64>(cfg, frames);
        let mut ox = vec![0.0; x.len()];
        overlap_add(cfg, &fr, frames, &coef, &mut ox);
        let mut oty = vec![0.0; fr.len()];
        overlap_add_adjoint(cfg, &x, frames, &coef, &mut oty);
        assert!((dot(&ox, &x) - dot(&fr, &oty)).abs() < 1e-12);
    }
}

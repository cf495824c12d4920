//! Deterministic synthetic signals: a speech-like harmonic complex and
//! several noise types.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::dsp::{Waveform, SAMPLE_RATE};
use crate::error::{Error, Result};

pub const DEFAULT_CLIP_SAMPLES: usize = 32_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SynthKind {
    /// Harmonic complex on `f0` with `harmonics` partials, amplitude-modulated
    /// by a raised cosine at `envelope_hz`.
    Harmonic { f0: f64, harmonics: usize, envelope_hz: f64 },
    White,
    /// White noise shaped by `1 / sqrt(f)` in the frequency domain.
    Pink,
    Tonal { freq: f64 },
    /// Linear sweep from `f_start` to `f_end` over the clip.
    Chirp { f_start: f64, f_end: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub source: SynthKind,
    pub samples: usize,
    /// Peak absolute value of the generated clip, at most 1.
    pub amplitude: f64,
    pub seed: u64,
}

impl SynthSpec {
    pub fn new(kind: SynthKind, seed: u64) -> Self {
        Self { source: kind, samples: DEFAULT_CLIP_SAMPLES, amplitude: 1.0, seed }
    }
}

fn time(i: usize) -> f64 {
    i as f64 / SAMPLE_RATE as f64
}

fn nyquist() -> f64 {
    SAMPLE_RATE as f64 / 2.0
}

fn white(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

fn pink(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut buf: Vec<Complex<f64>> = white(n, rng).into_iter().map(|v| Complex::new(v, 0.0)).collect();
    let mut planner = FftPlanner::new();
    planner.plan_fft_forward(n).process(&mut buf);
    for (k, z) in buf.iter_mut().enumerate() {
        let f = k.min(n - k);
        *z = if f == 0 { Complex::new(0.0, 0.0) } else { *z / (f as f64).sqrt() };
    }
    planner.plan_fft_inverse(n).process(&mut buf);
    buf.into_iter().map(|z| z.re / n as f64).collect()
}

/// Generates the clip described by `spec`, scaled so its peak equals `amplitude`.
pub fn synth_clip(spec: &SynthSpec) -> Result<Waveform> {
    if spec.samples == 0 {
        return Err(Error::Invalid("clip length must be positive".into()));
    }
    if !(spec.amplitude > 0.0 && spec.amplitude <= 1.0) {
        return Err(Error::Invalid(format!("amplitude {} outside (0, 1]", spec.amplitude)));
    }
    let n = spec.samples;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let x: Vec<f64> = match spec.source {
        SynthKind::Harmonic { f0, harmonics, envelope_hz } => {
            if f0 <= 0.0 || harmonics == 0 {
                return Err(Error::Invalid("harmonic clip needs f0 > 0 and at least one partial".into()));
            }
            let partials: Vec<(f64, f64, f64)> = (1..=harmonics)
                .map(|h| (h as f64 * f0, rng.random_range(0.5..1.0) / h as f64, rng.random_range(0.0..2.0 * PI)))
                .filter(|(f, _, _)| *f < nyquist())
                .collect();
            let env_phase = rng.random_range(0.0..2.0 * PI);
            (0..n)
                .map(|i| {
                    let t = time(i);
                    let env = 0.5 * (1.0 - (2.0 * PI * envelope_hz * t + env_phase).cos());
                    env * partials.iter().map(|(f, a, p)| a * (2.0 * PI * f * t + p).sin()).sum::<f64>()
                })
                .collect()
        }
        SynthKind::White => white(n, &mut rng),
        SynthKind::Pink => pink(n, &mut rng),
        SynthKind::Tonal { freq } => {
            if freq <= 0.0 || freq >= nyquist() {
                return Err(Error::Invalid(format!("tone frequency {freq} Hz outside (0, Nyquist)")));
            }
            let phase = rng.random_range(0.0..2.0 * PI);
            (0..n).map(|i| (2.0 * PI * freq * time(i) + phase).sin()).collect()
        }
        SynthKind::Chirp { f_start, f_end } => {
            let dur = n as f64 / SAMPLE_RATE as f64;
            let rate = (f_end - f_start) / dur;
            (0..n)
                .map(|i| {
                    let t = time(i);
                    (2.0 * PI * (f_start * t + 0.5 * rate * t * t)).sin()
                })
                .collect()
        }
    };
    let peak = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak == 0.0 {
        return Err(Error::Degenerate("synthesized clip is silent".into()));
    }
    let k = spec.amplitude / peak;
    Waveform::new(x.into_iter().map(|v| v * k).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chirp_and_tone_are_normalized() {
        let spec = SynthSpec::new(SynthKind::Chirp { f_start: 200.0, f_end: 4000.0 }, 1);
        let w = synth_clip(&spec).unwrap();
        assert_eq!(w.len(), DEFAULT_CLIP_SAMPLES);
        assert!((w.peak() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn unknown_kind_is_rejected() {
        let bad = r#"{"source": {"kind": "brown"}, "samples": 10, "amplitude": 1.0, "seed": 0}"#;
        assert!(serde_json::from_str::<SynthSpec>(bad).is_err());
        let good = r#"{"source": {"kind": "tonal", "freq": 440.0}, "samples": 10, "amplitude": 0.5, "seed": 0}"#;
        let spec: SynthSpec = serde_json::from_str(good).unwrap();
        assert_eq!(spec.source, SynthKind::Tonal { freq: 440.0 });
    }

    #[test]
    fn rejects_bad_parameters() {
        let mut s = SynthSpec::new(SynthKind::Tonal { freq: 9000.0 }, 0);
        assert!(synth_clip(&s).is_err());
        s.source = SynthKind::White;
        s.amplitude = 1.5;
        assert!(synth_clip(&s).is_err());
    }
}

//! Waveforms, complex spectrograms, and the time-frequency transforms between them.

pub mod kernels;
pub mod wav;

pub use kernels::{hann, StftConfig, StftPlan};

use crate::error::{Error, Result};

pub const SAMPLE_RATE: u32 = 16_000;

/// Mono audio at [`SAMPLE_RATE`].
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    samples: Vec<f64>,
}

impl Waveform {
    pub fn new(samples: Vec<f64>) -> Result<Self> {
        if let Some(i) = samples.iter().position(|v| !v.is_finite()) {
            return Err(Error::Invalid(format!("non-finite sample at index {i}")));
        }
        Ok(Self { samples })
    }

    pub fn zeros(len: usize) -> Self {
        Self { samples: vec![0.0; len] }
    }

    pub fn sample_rate(&self) -> u32 {
        SAMPLE_RATE
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn peak(&self) -> f64 {
        self.samples.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Zero-pads or truncates to exactly `len` samples.
    pub fn fit_to(&self, len: usize) -> Self {
        let mut s = self.samples.clone();
        s.resize(len, 0.0);
        Self { samples: s }
    }
}

/// One-sided spectrogram stored as `[frames, bins, 2]` (real, imaginary).
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexSpectrogram {
    frames: usize,
    bins: usize,
    data: Vec<f64>,
}

impl ComplexSpectrogram {
    pub fn new(frames: usize, bins: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != frames * bins * 2 {
            return Err(Error::Shape(format!(
                "spectrogram data length {} != {frames} x {bins} x 2",
                data.len()
            )));
        }
        Ok(Self { frames, bins, data })
    }

    pub fn zeros(frames: usize, bins: usize) -> Self {
        Self { frames, bins, data: vec![0.0; frames * bins * 2] }
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, t: usize, f: usize) -> (f64, f64) {
        let i = (t * self.bins + f) * 2;
        (self.data[i], self.data[i + 1])
    }

    pub fn set(&mut self, t: usize, f: usize, z: (f64, f64)) {
        let i = (t * self.bins + f) * 2;
        self.data[i] = z.0;
        self.data[i + 1] = z.1;
    }

    /// Drops the highest bin (the Nyquist bin for an even DFT length).
    pub fn without_last_bin(&self) -> Self {
        let bins = self.bins - 1;
        let mut data = Vec::with_capacity(self.frames * bins * 2);
        for row in self.data.chunks_exact(self.bins * 2) {
            data.extend_from_slice(&row[..bins * 2]);
        }
        Self { frames: self.frames, bins, data }
    }

    /// Appends a zero bin at the top of every frame.
    pub fn with_zero_bin(&self) -> Self {
        let bins = self.bins + 1;
        let mut data = Vec::with_capacity(self.frames * bins * 2);
        for row in self.data.chunks_exact(self.bins * 2) {
            data.extend_from_slice(row);
            data.extend([0.0, 0.0]);
        }
        Self { frames: self.frames, bins, data }
    }
}

/// `[frames, n_fft]` rectangular frames of a waveform.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameMatrix {
    pub frames: usize,
    pub frame_len: usize,
    pub data: Vec<f64>,
}

/// Periodic Hann window of length `n`.
pub fn hann_window(n: usize) -> Vec<f64> {
    hann(n)
}

pub fn stft(x: &Waveform) -> Result<ComplexSpectrogram> {
    stft_with(x, StftConfig::default())
}

/// Windowed one-sided STFT without center padding; frame `t` covers
/// `[t*hop, t*hop + n_fft)` and the signal is zero-extended at the end.
pub fn stft_with(x: &Waveform, cfg: StftConfig) -> Result<ComplexSpectrogram> {
    if x.is_empty() {
        return Err(Error::Invalid("cannot analyze an empty waveform".into()));
    }
    let frames = cfg.frames_for(x.len());
    let mut data = vec![0.0; frames * cfg.bins() * 2];
    StftPlan::new(cfg).analyze(x.samples(), frames, &mut data);
    Ok(ComplexSpectrogram { frames, bins: cfg.bins(), data })
}

pub fn istft(s: &ComplexSpectrogram) -> Result<Waveform> {
    istft_with(s, StftConfig::default())
}

/// Weighted overlap-add inverse normalized by the summed squared window.
/// Returns `frames * hop` samples.
pub fn istft_with(s: &ComplexSpectrogram, cfg: StftConfig) -> Result<Waveform> {
    if s.bins != cfg.bins() {
        return Err(Error::Shape(format!("expected {} frequency bins, got {}", cfg.bins(), s.bins)));
    }
    let mut out = vec![0.0; s.frames * cfg.hop];
    StftPlan::new(cfg).synthesize(&s.data, s.frames, &mut out);
    Ok(Waveform { samples: out })
}

pub fn frame_signal(x: &Waveform, cfg: StftConfig) -> FrameMatrix {
    let frames = cfg.frames_for(x.len());
    let mut data = vec![0.0; frames * cfg.n_fft];
    kernels::frame(cfg, x.samples(), frames, &mut data);
    FrameMatrix { frames, frame_len: cfg.n_fft, data }
}

/// Hann-weighted overlap-add normalized so that `overlap_add(frame_signal(x)) == x`.
pub fn overlap_add(m: &FrameMatrix, cfg: StftConfig) -> Result<Waveform> {
    if m.frame_len != cfg.n_fft || m.data.len() != m.frames * m.frame_len {
        return Err(Error::Shape(format!(
            "frame matrix {}x{} does not match frame length {}",
            m.frames, m.frame_len, cfg.n_fft
        )));
    }
    let coef = kernels::overlap_add_weights(cfg, m.frames);
    let mut out = vec![0.0; m.frames * cfg.hop];
    kernels::overlap_add(cfg, &m.data, m.frames, &coef, &mut out);
    Ok(Waveform { samples: out })
}

/// `|z|^p * z / |z|` per bin, with `0 -> 0`.
pub fn power_law_compress(s: &ComplexSpectrogram, p: f64) -> ComplexSpectrogram {
    let mut data = Vec::with_capacity(s.data.len());
    for z in s.data.chunks_exact(2) {
        let mag = z[0].hypot(z[1]);
        if mag == 0.0 {
            data.extend([0.0, 0.0]);
        } else {
            let k = mag.powf(p - 1.0);
            data.extend([z[0] * k, z[1] * k]);
        }
    }
    ComplexSpectrogram { frames: s.frames, bins: s.bins, data }
}

/// Mean power over the samples that are not exactly zero; 0 for an all-zero signal.
pub fn active_power(x: &[f64]) -> f64 {
    let (sum, count) = x
        .iter()
        .filter(|v| **v != 0.0)
        .fold((0.0, 0usize), |(s, c), v| (s + v * v, c + 1));
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}

/// SNR in dB between a signal and a noise, using [`active_power`].
pub fn snr_db(signal: &[f64], noise: &[f64]) -> Result<f64> {
    let (ps, pn) = (active_power(signal), active_power(noise));
    if ps == 0.0 || pn == 0.0 {
        return Err(Error::Degenerate("SNR undefined for a silent signal or noise".into()));
    }
    Ok(10.0 * (ps / pn).log10())
}

/// Gain applied to `n` so that `s` over the scaled noise sits at `snr_db`.
pub fn snr_gain(s: &[f64], n: &[f64], snr_db: f64) -> Result<f64> {
    let pn = active_power(n);
    if pn == 0.0 {
        return Err(Error::Degenerate("noise is silent".into()));
    }
    let ps = active_power(s);
    Ok((ps / (pn * 10f64.powf(snr_db / 10.0))).sqrt())
}

/// Returns `(s + g*n, g*n)` with `g` from [`snr_gain`]. `n` is zero-padded or
/// truncated to the length of `s`.
pub fn mix_at_snr(s: &Waveform, n: &Waveform, snr_db: f64) -> Result<(Waveform, Waveform)> {
    let n = n.fit_to(s.len());
    let g = snr_gain(s.samples(), n.samples(), snr_db)?;
    let scaled: Vec<f64> = n.samples().iter().map(|v| g * v).collect();
    let noisy = s.samples().iter().zip(&scaled).map(|(a, b)| a + b).collect();
    Ok((Waveform { samples: noisy }, Waveform { samples: scaled }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nyquist_bin_round_trip() {
        let mut s = ComplexSpectrogram::zeros(2, 3);
        s.set(1, 1, (2.0, -1.0));
        s.set(0, 2, (5.0, 5.0));
        let d = s.without_last_bin();
        assert_eq!(d.bins(), 2);
        assert_eq!(d.get(1, 1), (2.0, -1.0));
        let back = d.with_zero_bin();
        assert_eq!(back.get(0, 2), (0.0, 0.0));
        assert_eq!(back.get(1, 1), (2.0, -1.0));
    }

    #[test]
    fn active_power_ignores_zero_samples() {
        assert_eq!(active_power(&[0.0, 2.0, 0.0, -2.0]), 4.0);
        assert_eq!(active_power(&[0.0; 4]), 0.0);
    }

    #[test]
    fn rejects_non_finite_samples() {
        assert!(Waveform::new(vec![0.0, f64::NAN]).is_err());
    }
}

//! Synthetic dataset builder, JSON-lines manifest, and batch loading.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::synth::{synth_clip, SynthKind, SynthSpec, DEFAULT_CLIP_SAMPLES};
use crate::dsp::wav::{dequantize, quantize, read_wav, write_pcm};
use crate::dsp::{active_power, snr_db, snr_gain, Waveform};
use crate::error::{Error, Result};
use crate::io::{read_to_string, write_atomic};
use crate::tensor::{Scalar, Tensor};

pub const MANIFEST_FILE: &str = "manifest.jsonl";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    White,
    Pink,
    Tonal,
    Chirp,
    /// A second harmonic complex, for two-source separation.
    Harmonic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub train: usize,
    pub test: usize,
    pub clip_samples: usize,
    pub snr_levels: Vec<f64>,
    pub noises: Vec<NoiseKind>,
    pub f0_range: [f64; 2],
    pub harmonics: [usize; 2],
    pub envelope_hz: f64,
    /// Peak level of each noisy mixture before quantization.
    pub peak: f64,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            train: 200,
            test: 20,
            clip_samples: DEFAULT_CLIP_SAMPLES,
            snr_levels: vec![-5.0, 0.0, 5.0, 10.0, 15.0],
            noises: vec![NoiseKind::White, NoiseKind::Pink, NoiseKind::Tonal, NoiseKind::Chirp],
            f0_range: [100.0, 300.0],
            harmonics: [5, 10],
            envelope_hz: 4.0,
            peak: 0.9,
            seed: 0,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.snr_levels.is_empty() || self.noises.is_empty() {
            return Err(Error::Config("snr_levels and noises must be non-empty".into()));
        }
        if self.clip_samples == 0 {
            return Err(Error::Config("clip_samples must be positive".into()));
        }
        if !(self.f0_range[0] > 0.0 && self.f0_range[0] <= self.f0_range[1]) {
            return Err(Error::Config(format!("bad f0_range {:?}", self.f0_range)));
        }
        if self.harmonics[0] == 0 || self.harmonics[0] > self.harmonics[1] {
            return Err(Error::Config(format!("bad harmonics range {:?}", self.harmonics)));
        }
        if !(self.peak > 0.0 && self.peak < 1.0) {
            return Err(Error::Config(format!("peak {} outside (0, 1)", self.peak)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// One clean/noise/noisy triple. Paths are relative to the manifest directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub split: Split,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clean_spec: Option<SynthSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise_spec: Option<SynthSpec>,
    pub snr_db: f64,
    pub seed: u64,
    pub clean: String,
    pub noise: String,
    pub noisy: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for e in &self.entries {
            let line = serde_json::to_string(e)
                .map_err(|source| Error::Json { context: format!("serializing entry {}", e.id), source })?;
            out.push_str(&line);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = read_to_string(path)?;
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let e: ManifestEntry = serde_json::from_str(line)
                .map_err(|source| Error::Json { context: format!("{} line {}", path.display(), i + 1), source })?;
            entries.push(e);
        }
        if entries.is_empty() {
            return Err(Error::Invalid(format!("{}: manifest has no entries", path.display())));
        }
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Self { root, entries })
    }

    pub fn write(&self) -> Result<()> {
        write_atomic(&self.root.join(MANIFEST_FILE), self.to_jsonl()?.as_bytes())
    }

    pub fn split(&self, split: Split) -> Vec<usize> {
        (0..self.entries.len()).filter(|&i| self.entries[i].split == split).collect()
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }
}

fn entry_seed(seed: u64, index: usize, stream: u64) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ ((index as u64) << 2 | stream).wrapping_mul(0xbf58_476d_1ce4_e5b9)
}

fn clean_spec(cfg: &DatasetConfig, seed: u64) -> SynthSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let f0 = rng.random_range(cfg.f0_range[0]..=cfg.f0_range[1]);
    let harmonics = rng.random_range(cfg.harmonics[0]..=cfg.harmonics[1]);
    let mut s = SynthSpec::new(SynthKind::Harmonic { f0, harmonics, envelope_hz: cfg.envelope_hz }, seed);
    s.samples = cfg.clip_samples;
    s
}

fn noise_spec(cfg: &DatasetConfig, kind: NoiseKind, seed: u64) -> SynthSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let source = match kind {
        NoiseKind::White => SynthKind::White,
        NoiseKind::Pink => SynthKind::Pink,
        NoiseKind::Tonal => SynthKind::Tonal { freq: rng.random_range(300.0..3000.0) },
        NoiseKind::Chirp => {
            SynthKind::Chirp { f_start: rng.random_range(100.0..1000.0), f_end: rng.random_range(2000.0..6000.0) }
        }
        NoiseKind::Harmonic => return clean_spec(cfg, seed),
    };
    let mut s = SynthSpec::new(source, seed);
    s.samples = cfg.clip_samples;
    s
}

/// Quantized `(clean, noise, noisy)` with `noisy = clean + noise` exactly in
/// the integer domain. The mixture is scaled to `peak`, and the noise gain is
/// refined after quantization so that the stored pair sits at `snr_db`.
pub fn mix_quantized(clean: &[f64], noise: &[f64], snr: f64, peak: f64) -> Result<[Vec<i16>; 3]> {
    let g = snr_gain(clean, noise, snr)?;
    let mix_peak = clean.iter().zip(noise).fold(0.0f64, |m, (s, n)| m.max((s + g * n).abs()));
    if mix_peak == 0.0 {
        return Err(Error::Degenerate("mixture is silent".into()));
    }
    let k = peak / mix_peak;
    let clean_q: Vec<i16> = clean.iter().map(|&v| quantize(k * v)).collect();
    let clean_d: Vec<f64> = clean_q.iter().map(|&v| dequantize(v)).collect();
    if active_power(&clean_d) == 0.0 {
        return Err(Error::Degenerate("clean signal quantizes to silence".into()));
    }
    let noise_at = |h: f64| -> Vec<i16> { noise.iter().map(|&v| quantize(h * v)).collect() };
    let err_at = |q: &[i16]| -> f64 {
        let d: Vec<f64> = q.iter().map(|&v| dequantize(v)).collect();
        snr_db(&clean_d, &d).map(|v| v - snr).unwrap_or(f64::INFINITY)
    };
    // The measured SNR falls as the noise gain grows; bisect on the gain.
    let h0 = k * g;
    let (mut lo, mut hi) = (h0 * 0.5, h0 * 2.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid == lo || mid == hi {
            break;
        }
        if err_at(&noise_at(mid)) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let (ql, qh) = (noise_at(lo), noise_at(hi));
    let noise_q = if err_at(&ql).abs() <= err_at(&qh).abs() { ql } else { qh };
    let mut noisy_q = Vec::with_capacity(clean_q.len());
    for (&s, &n) in clean_q.iter().zip(&noise_q) {
        let v = i16::try_from(s as i32 + n as i32)
            .map_err(|_| Error::Degenerate("mixture overflows 16-bit range".into()))?;
        noisy_q.push(v);
    }
    Ok([clean_q, noise_q, noisy_q])
}

/// Synthesizes `train + test` triples under `out_dir` and writes the manifest.
/// SNR levels and noise types are assigned round-robin within each split.
pub fn build_dataset(cfg: &DatasetConfig, out_dir: &Path) -> Result<Manifest> {
    cfg.validate()?;
    let mut entries = Vec::with_capacity(cfg.train + cfg.test);
    let mut index = 0usize;
    for (split, count) in [(Split::Train, cfg.train), (Split::Test, cfg.test)] {
        for j in 0..count {
            let levels = cfg.snr_levels.len();
            let snr = cfg.snr_levels[j % levels];
            let kind = cfg.noises[(j / levels) % cfg.noises.len()];
            let seed = entry_seed(cfg.seed, index, 0);
            let cs = clean_spec(cfg, seed);
            let ns = noise_spec(cfg, kind, entry_seed(cfg.seed, index, 1));
            let clean = synth_clip(&cs)?;
            let noise = synth_clip(&ns)?;
            let [cq, nq, xq] = mix_quantized(clean.samples(), noise.samples(), snr, cfg.peak)?;
            let id = format!("{}_{j:04}", split.name());
            let e = ManifestEntry {
                clean: format!("{id}_clean.wav"),
                noise: format!("{id}_noise.wav"),
                noisy: format!("{id}_noisy.wav"),
                id,
                split,
                clean_spec: Some(cs),
                noise_spec: Some(ns),
                snr_db: snr,
                seed,
            };
            write_pcm(&out_dir.join(&e.clean), &cq)?;
            write_pcm(&out_dir.join(&e.noise), &nq)?;
            write_pcm(&out_dir.join(&e.noisy), &xq)?;
            entries.push(e);
            index += 1;
        }
    }
    let manifest = Manifest { root: out_dir.to_path_buf(), entries };
    manifest.write()?;
    Ok(manifest)
}

/// Waveform triples stacked as `[B, N]` tensors.
#[derive(Debug, Clone)]
pub struct Batch<T> {
    pub ids: Vec<String>,
    pub noisy: Tensor<T>,
    pub clean: Tensor<T>,
    pub noise: Tensor<T>,
}

pub fn stack<T: Scalar>(waves: &[Waveform], len: usize) -> Result<Tensor<T>> {
    let mut data = Vec::with_capacity(waves.len() * len);
    for w in waves {
        data.extend(w.fit_to(len).samples().iter().map(|&v| T::c(v)));
    }
    Tensor::new(&[waves.len(), len], data)
}

/// Loads the given entries in order, zero-padding or truncating each clip to `len`.
pub fn load_batch<T: Scalar>(manifest: &Manifest, indices: &[usize], len: usize) -> Result<Batch<T>> {
    let mut ids = Vec::with_capacity(indices.len());
    let (mut noisy, mut clean, mut noise) = (Vec::new(), Vec::new(), Vec::new());
    for &i in indices {
        let e = manifest
            .entries
            .get(i)
            .ok_or_else(|| Error::Invalid(format!("manifest index {i} out of range")))?;
        ids.push(e.id.clone());
        noisy.push(read_wav(&manifest.path(&e.noisy))?);
        clean.push(read_wav(&manifest.path(&e.clean))?);
        noise.push(read_wav(&manifest.path(&e.noise))?);
    }
    Ok(Batch { ids, noisy: stack(&noisy, len)?, clean: stack(&clean, len)?, noise: stack(&noise, len)? })
}

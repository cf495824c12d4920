//! Objective quality measures: segmental SNR and scale-invariant SDR.

use serde::Serialize;

use crate::error::{Error, Result};

pub const SSNR_SEGMENT: usize = 512;
pub const SSNR_MIN_DB: f64 = -10.0;
pub const SSNR_MAX_DB: f64 = 35.0;
/// Segments whose reference energy is below this are treated as silence.
pub const SSNR_SILENCE: f64 = 1e-10;
/// SI-SDR saturates at +/- this many dB for exact or orthogonal estimates.
pub const SI_SDR_CAP_DB: f64 = 100.0;
const SI_SDR_RESIDUAL_FLOOR: f64 = 1e-12;

fn same_len(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("signal lengths differ: {} vs {}", a.len(), b.len())));
    }
    Ok(())
}

/// Mean of per-segment SNRs over non-overlapping 512-sample segments, each
/// clamped to [-10, 35] dB. Silent reference segments are skipped; a trailing
/// partial segment is included.
pub fn ssnr(reference: &[f64], est: &[f64]) -> Result<f64> {
    same_len(reference, est)?;
    let mut sum = 0.0;
    let mut count = 0usize;
    for (r, e) in reference.chunks(SSNR_SEGMENT).zip(est.chunks(SSNR_SEGMENT)) {
        let sig: f64 = r.iter().map(|v| v * v).sum();
        if sig < SSNR_SILENCE {
            continue;
        }
        let err: f64 = r.iter().zip(e).map(|(a, b)| (a - b) * (a - b)).sum();
        let db = if err == 0.0 { SSNR_MAX_DB } else { 10.0 * (sig / err).log10() };
        sum += db.clamp(SSNR_MIN_DB, SSNR_MAX_DB);
        count += 1;
    }
    if count == 0 {
        return Err(Error::Degenerate("reference has no non-silent segment".into()));
    }
    Ok(sum / count as f64)
}

fn zero_mean(x: &[f64]) -> Vec<f64> {
    let m = x.iter().sum::<f64>() / x.len().max(1) as f64;
    x.iter().map(|v| v - m).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Scale-invariant SDR in dB, with both signals made zero-mean first.
pub fn si_sdr(reference: &[f64], est: &[f64]) -> Result<f64> {
    same_len(reference, est)?;
    let r = zero_mean(reference);
    let e = zero_mean(est);
    let rr = dot(&r, &r);
    if rr == 0.0 {
        return Err(Error::Degenerate("reference is silent".into()));
    }
    let k = dot(&e, &r) / rr;
    let target: Vec<f64> = r.iter().map(|v| k * v).collect();
    let t2 = dot(&target, &target);
    let resid: f64 = e.iter().zip(&target).map(|(a, b)| (a - b) * (a - b)).sum();
    if resid < SI_SDR_RESIDUAL_FLOOR {
        return Ok(SI_SDR_CAP_DB);
    }
    if t2 == 0.0 {
        return Ok(-SI_SDR_CAP_DB);
    }
    Ok((10.0 * (t2 / resid).log10()).clamp(-SI_SDR_CAP_DB, SI_SDR_CAP_DB))
}

/// SI-SDR of the estimate minus SI-SDR of the unprocessed mixture.
pub fn si_sdri(reference: &[f64], est: &[f64], noisy: &[f64]) -> Result<f64> {
    Ok(si_sdr(reference, est)? - si_sdr(reference, noisy)?)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClipMetrics {
    pub clip_id: String,
    pub ssnr_db: f64,
    pub si_sdr_db: f64,
    pub si_sdri_db: f64,
}

impl ClipMetrics {
    pub fn compute(clip_id: &str, reference: &[f64], est: &[f64], noisy: &[f64]) -> Result<Self> {
        let si_sdr_db = si_sdr(reference, est)?;
        Ok(Self {
            clip_id: clip_id.to_string(),
            ssnr_db: ssnr(reference, est)?,
            si_sdr_db,
            si_sdri_db: si_sdr_db - si_sdr(reference, noisy)?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Summary {
    pub mean: f64,
    pub median: f64,
}

pub fn summarize(values: &[f64]) -> Option<Summary> {
    if values.is_empty() {
        return None;
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    Some(Summary { mean, median: median(values) })
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Per-clip rows plus mean/median of each metric.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub rows: Vec<ClipMetrics>,
}

impl MetricReport {
    pub fn ssnr(&self) -> Option<Summary> {
        summarize(&self.rows.iter().map(|r| r.ssnr_db).collect::<Vec<_>>())
    }

    pub fn si_sdr(&self) -> Option<Summary> {
        summarize(&self.rows.iter().map(|r| r.si_sdr_db).collect::<Vec<_>>())
    }

    pub fn si_sdri(&self) -> Option<Summary> {
        summarize(&self.rows.iter().map(|r| r.si_sdri_db).collect::<Vec<_>>())
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("clip_id,ssnr_db,si_sdr_db,si_sdri_db\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{},{}\n", r.clip_id, r.ssnr_db, r.si_sdr_db, r.si_sdri_db));
        }
        out
    }
}

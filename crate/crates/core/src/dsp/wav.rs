//! RIFF/WAVE reader and writer restricted to 16-bit PCM, mono, 16 kHz.

use std::fs;
use std::path::Path;

use super::{Waveform, SAMPLE_RATE};
use crate::error::{Error, Result};

const PCM: u16 = 1;
const FULL_SCALE: f64 = 32768.0;

/// Converts a sample in [-1, 1) to 16-bit PCM with rounding and clipping.
pub fn quantize(v: f64) -> i16 {
    (v * FULL_SCALE).round().clamp(i16::MIN as f64, i16::MAX as f64) as i16
}

pub fn dequantize(v: i16) -> f64 {
    v as f64 / FULL_SCALE
}

pub fn encode(samples: &[i16]) -> Vec<u8> {
    let data_len = (samples.len() * 2) as u32;
    let mut out = Vec::with_capacity(44 + samples.len() * 2);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&PCM.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&SAMPLE_RATE.to_le_bytes());
    out.extend_from_slice(&(SAMPLE_RATE * 2).to_le_bytes());
    out.extend_from_slice(&2u16.to_le_bytes());
    out.extend_from_slice(&16u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_len.to_le_bytes());
    for s in samples {
        out.extend_from_slice(&s.to_le_bytes());
    }
    out
}

fn u16_at(b: &[u8], i: usize) -> u16 {
    u16::from_le_bytes([b[i], b[i + 1]])
}

fn u32_at(b: &[u8], i: usize) -> u32 {
    u32::from_le_bytes([b[i], b[i + 1], b[i + 2], b[i + 3]])
}

/// Parses a WAV byte stream into raw 16-bit samples. Unknown chunks are skipped.
pub fn decode(bytes: &[u8]) -> Result<Vec<i16>> {
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(Error::WavFormat("missing RIFF/WAVE header".into()));
    }
    let mut pos = 12;
    let mut fmt_seen = false;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = u32_at(bytes, pos + 4) as usize;
        let body = pos + 8;
        let end = body.checked_add(size).filter(|&e| e <= bytes.len());
        match id {
            b"fmt " => {
                let end = end.ok_or_else(|| Error::WavFormat("truncated fmt chunk".into()))?;
                if end - body < 16 {
                    return Err(Error::WavFormat("fmt chunk too short".into()));
                }
                let format = u16_at(bytes, body);
                let channels = u16_at(bytes, body + 2);
                let rate = u32_at(bytes, body + 4);
                let bits = u16_at(bytes, body + 14);
                if format != PCM {
                    return Err(Error::WavFormat(format!("format tag {format}, only PCM (1) is supported")));
                }
                if channels != 1 {
                    return Err(Error::WavFormat(format!("{channels} channels, only mono is supported")));
                }
                if rate != SAMPLE_RATE {
                    return Err(Error::WavFormat(format!("{rate} Hz, only {SAMPLE_RATE} Hz is supported")));
                }
                if bits != 16 {
                    return Err(Error::WavFormat(format!("{bits}-bit samples, only 16-bit is supported")));
                }
                fmt_seen = true;
            }
            b"data" => {
                if !fmt_seen {
                    return Err(Error::WavFormat("data chunk before fmt chunk".into()));
                }
                let end = end.ok_or_else(|| Error::WavFormat("truncated data chunk".into()))?;
                return Ok(bytes[body..end]
                    .chunks_exact(2)
                    .map(|c| i16::from_le_bytes([c[0], c[1]]))
                    .collect());
            }
            _ => {}
        }
        // Chunks are padded to even length.
        pos = body + size + (size & 1);
    }
    Err(Error::WavFormat("no data chunk".into()))
}

pub fn read_pcm(path: &Path) -> Result<Vec<i16>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|e| match e {
        Error::WavFormat(m) => Error::WavFormat(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn read_wav(path: &Path) -> Result<Waveform> {
    Waveform::new(read_pcm(path)?.into_iter().map(dequantize).collect())
}

/// Writes through a temporary file and renames it into place.
pub fn write_pcm(path: &Path, samples: &[i16]) -> Result<()> {
    crate::io::write_atomic(path, &encode(samples))
}

pub fn write_wav(path: &Path, w: &Waveform) -> Result<()> {
    let pcm: Vec<i16> = w.samples().iter().map(|&v| quantize(v)).collect();
    write_pcm(path, &pcm)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn encode_decode_round_trip() {
        let s: Vec<i16> = vec![0, 1, -1, i16::MAX, i16::MIN, 1234];
        assert_eq!(decode(&encode(&s)).unwrap(), s);
    }

    #[test]
    fn header_layout() {
        let b = encode(&[0, 0]);
        assert_eq!(b.len(), 48);
        assert_eq!(u32_at(&b, 4), 40);
        assert_eq!(u32_at(&b, 24), 16_000);
        assert_eq!(u32_at(&b, 40), 4);
    }

    #[test]
    fn skips_unknown_chunks() {
        let mut b = encode(&[7, -7]);
        let mut extra = b"LIST".to_vec();
        extra.extend_from_slice(&3u32.to_le_bytes());
        extra.extend_from_slice(&[1, 2, 3, 0]);
        b.splice(36..36, extra);
        assert_eq!(decode(&b).unwrap(), vec![7, -7]);
    }

    #[test]
    fn rejects_stereo_and_other_rates() {
        let mut b = encode(&[0, 0]);
        b[22] = 2;
        assert!(matches!(decode(&b), Err(Error::WavFormat(m)) if m.contains("mono")));
        let mut b = encode(&[0, 0]);
        b[24..28].copy_from_slice(&44_100u32.to_le_bytes());
        assert!(matches!(decode(&b), Err(Error::WavFormat(m)) if m.contains("44100")));
    }

    #[test]
    fn quantize_clips_and_rounds() {
        assert_eq!(quantize(1.0), i16::MAX);
        assert_eq!(quantize(-1.0), i16::MIN);
        assert_eq!(quantize(0.5 / 32768.0), 1);
        assert_eq!(quantize(dequantize(-321)), -321);
    }
}

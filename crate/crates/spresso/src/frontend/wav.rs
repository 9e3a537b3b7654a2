//! Minimal RIFF/WAVE reader and writer: 16-bit PCM, mono, little-endian.

use crate::error::{Error, Result};
use crate::frontend::Waveform;
use std::fs;
use std::path::Path;

pub fn wav_write(path: &Path, w: &Waveform) -> Result<()> {
    let n = w.samples.len();
    let data_len = (n * 2) as u32;
    let mut buf = Vec::with_capacity(44 + n * 2);
    buf.extend_from_slice(b"RIFF");
    buf.extend_from_slice(&(36 + data_len).to_le_bytes());
    buf.extend_from_slice(b"WAVE");
    buf.extend_from_slice(b"fmt ");
    buf.extend_from_slice(&16u32.to_le_bytes());
    buf.extend_from_slice(&1u16.to_le_bytes()); // PCM
    buf.extend_from_slice(&1u16.to_le_bytes()); // mono
    buf.extend_from_slice(&w.sample_rate.to_le_bytes());
    buf.extend_from_slice(&(w.sample_rate * 2).to_le_bytes()); // byte rate
    buf.extend_from_slice(&2u16.to_le_bytes()); // block align
    buf.extend_from_slice(&16u16.to_le_bytes()); // bits per sample
    buf.extend_from_slice(b"data");
    buf.extend_from_slice(&data_len.to_le_bytes());
    for &s in &w.samples {
        let q = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        buf.extend_from_slice(&q.to_le_bytes());
    }
    fs::write(path, buf)?;
    Ok(())
}

pub fn wav_read(path: &Path) -> Result<Waveform> {
    let data = fs::read(path)?;
    let fail = |msg: &str| Error::Format(format!("{}: {msg}", path.display()));
    if data.len() < 12 || &data[0..4] != b"RIFF" || &data[8..12] != b"WAVE" {
        return Err(fail("malformed RIFF/WAVE header"));
    }
    let mut pos = 12usize;
    let mut fmt: Option<(u16, u16, u32, u16)> = None;
    let mut samples: Option<Vec<f64>> = None;
    while pos + 8 <= data.len() {
        let id = &data[pos..pos + 4];
        let size = u32::from_le_bytes(data[pos + 4..pos + 8].try_into().unwrap()) as usize;
        let body = pos + 8;
        if body + size > data.len() {
            return Err(fail("chunk overruns file"));
        }
        match id {
            b"fmt " => {
                if size < 16 {
                    return Err(fail("fmt chunk too short"));
                }
                let audio_format = u16::from_le_bytes(data[body..body + 2].try_into().unwrap());
                let channels = u16::from_le_bytes(data[body + 2..body + 4].try_into().unwrap());
                let sample_rate = u32::from_le_bytes(data[body + 4..body + 8].try_into().unwrap());
                let bits = u16::from_le_bytes(data[body + 14..body + 16].try_into().unwrap());
                fmt = Some((audio_format, channels, sample_rate, bits));
            }
            b"data" => {
                let (audio_format, channels, _, bits) =
                    fmt.ok_or_else(|| fail("data chunk before fmt chunk"))?;
                if audio_format != 1 {
                    return Err(fail("unsupported encoding: not PCM"));
                }
                if channels != 1 {
                    return Err(fail("unsupported encoding: expected mono"));
                }
                if bits != 16 {
                    return Err(fail("unsupported encoding: expected 16-bit"));
                }
                if size % 2 != 0 {
                    return Err(fail("odd data chunk length"));
                }
                samples = Some(
                    data[body..body + size]
                        .chunks_exact(2)
                        .map(|c| i16::from_le_bytes(c.try_into().unwrap()) as f64 / 32767.0)
                        .collect(),
                );
            }
            _ => {}
        }
        pos = body + size + (size % 2);
    }
    let (_, _, sample_rate, _) = fmt.ok_or_else(|| fail("missing fmt chunk"))?;
    let samples = samples.ok_or_else(|| fail("missing data chunk"))?;
    if samples.is_empty() {
        return Err(fail("empty data chunk"));
    }
    Waveform::new(samples, sample_rate)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frontend::synth::{synth_clip, ClipKind};
    use tempfile::tempdir;

    #[test]
    fn round_trip_within_quantization_bound() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("a.wav");
        let w = synth_clip(ClipKind::Impact, 1.0, 7).unwrap();
        wav_write(&path, &w).unwrap();
        let back = wav_read(&path).unwrap();
        assert_eq!(back.sample_rate, w.sample_rate);
        assert_eq!(back.len(), w.len());
        let bound = 2.0f64.powi(-15);
        for (a, b) in w.samples.iter().zip(&back.samples) {
            assert!((a - b).abs() <= bound);
        }
    }

    #[test]
    fn empty_file_is_format_error() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("empty.wav");
        fs::write(&path, b"").unwrap();
        assert!(matches!(wav_read(&path), Err(Error::Format(_))));
    }

    #[test]
    fn stereo_file_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("stereo.wav");
        // hand-build a 2-channel header with a tiny payload
        let mut buf = Vec::new();
        buf.extend_from_slice(b"RIFF");
        buf.extend_from_slice(&(36u32 + 4).to_le_bytes());
        buf.extend_from_slice(b"WAVE");
        buf.extend_from_slice(b"fmt ");
        buf.extend_from_slice(&16u32.to_le_bytes());
        buf.extend_from_slice(&1u16.to_le_bytes());
        buf.extend_from_slice(&2u16.to_le_bytes()); // stereo
        buf.extend_from_slice(&12800u32.to_le_bytes());
        buf.extend_from_slice(&51200u32.to_le_bytes());
        buf.extend_from_slice(&4u16.to_le_bytes());
        buf.extend_from_slice(&16u16.to_le_bytes());
        buf.extend_from_slice(b"data");
        buf.extend_from_slice(&4u32.to_le_bytes());
        buf.extend_from_slice(&[0u8; 4]);
        fs::write(&path, buf).unwrap();
        let err = wav_read(&path).unwrap_err();
        assert!(err.to_string().contains("mono"));
    }
}

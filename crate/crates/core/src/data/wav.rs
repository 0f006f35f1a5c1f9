//! RIFF/WAVE PCM 16-bit mono codec.

use std::fs;
use std::path::Path;

use super::AudioBuffer;
use crate::error::{Error, Result};

pub const PCM_SCALE: f64 = 32767.0;
const HEADER_LEN: usize = 44;

/// Sample to 16-bit code: clamp to [-1, 1], scale by 32767, round half away
/// from zero.
pub fn quantize(v: f64) -> i16 {
    (v.clamp(-1.0, 1.0) * PCM_SCALE).round() as i16
}

/// Canonical 44-byte header followed by little-endian PCM16 samples.
pub fn encode_wav(buf: &AudioBuffer) -> Vec<u8> {
    let data_len = (buf.samples.len() * 2) as u32;
    let mut out = Vec::with_capacity(HEADER_LEN + data_len as usize);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes()); // PCM
    out.extend_from_slice(&1u16.to_le_bytes()); // mono
    out.extend_from_slice(&buf.sample_rate.to_le_bytes());
    out.extend_from_slice(&(buf.sample_rate * 2).to_le_bytes()); // byte rate
    out.extend_from_slice(&2u16.to_le_bytes()); // block align
    out.extend_from_slice(&16u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_len.to_le_bytes());
    for &v in &buf.samples {
        out.extend_from_slice(&quantize(v).to_le_bytes());
    }
    out
}

pub fn write_wav(path: &Path, buf: &AudioBuffer) -> Result<()> {
    fs::write(path, encode_wav(buf))?;
    Ok(())
}

fn u16_at(b: &[u8], i: usize) -> u16 {
    u16::from_le_bytes([b[i], b[i + 1]])
}

fn u32_at(b: &[u8], i: usize) -> u32 {
    u32::from_le_bytes([b[i], b[i + 1], b[i + 2], b[i + 3]])
}

/// Parses a PCM16 mono WAV image; unknown chunks are skipped.
pub fn decode_wav(bytes: &[u8], path: &Path) -> Result<AudioBuffer> {
    let bad = |msg: &str| Error::format(path, msg);
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(bad("not a RIFF/WAVE file"));
    }
    let mut pos = 12;
    let mut format: Option<(u32, u16)> = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = u32_at(bytes, pos + 4) as usize;
        let body = pos + 8;
        match id {
            b"fmt " => {
                if size < 16 || body + 16 > bytes.len() {
                    return Err(bad("truncated fmt chunk"));
                }
                let codec = u16_at(bytes, body);
                let channels = u16_at(bytes, body + 2);
                let rate = u32_at(bytes, body + 4);
                let bits = u16_at(bytes, body + 14);
                if codec != 1 {
                    return Err(bad(&format!("unsupported codec {codec:#06x}; only PCM (1) is supported")));
                }
                if channels != 1 {
                    return Err(bad(&format!("{channels} channels; only mono is supported")));
                }
                if bits != 16 {
                    return Err(bad(&format!("{bits}-bit samples; only 16-bit is supported")));
                }
                if rate == 0 {
                    return Err(bad("sample rate is zero"));
                }
                format = Some((rate, channels));
            }
            b"data" => {
                let (rate, _) = format.ok_or_else(|| bad("data chunk before fmt chunk"))?;
                let end = body.checked_add(size).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated data chunk"))?;
                if !size.is_multiple_of(2) {
                    return Err(bad("data chunk holds a partial sample"));
                }
                let samples = bytes[body..end]
                    .chunks_exact(2)
                    .map(|b| i16::from_le_bytes([b[0], b[1]]) as f64 / PCM_SCALE)
                    .collect();
                return AudioBuffer::new(samples, rate);
            }
            _ => {}
        }
        // Chunks are word aligned.
        pos = body + size + (size & 1);
    }
    Err(bad(if format.is_some() { "missing data chunk" } else { "missing fmt chunk" }))
}

pub fn read_wav(path: &Path) -> Result<AudioBuffer> {
    decode_wav(&fs::read(path)?, path)
}

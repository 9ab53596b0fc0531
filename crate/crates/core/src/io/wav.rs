//! Mono RIFF/WAVE reading and writing: 16-bit PCM and 32-bit IEEE float.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::signal::Waveform;

const FORMAT_PCM: u16 = 1;
const FORMAT_FLOAT: u16 = 3;
const FORMAT_EXTENSIBLE: u16 = 0xfffe;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BitDepth {
    Pcm16,
    Float32,
}

impl BitDepth {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "16" | "pcm16" => Ok(BitDepth::Pcm16),
            "32f" | "float32" => Ok(BitDepth::Float32),
            _ => Err(Error::InvalidConfig(format!("bit depth must be 'pcm16' or 'float32', got '{s}'"))),
        }
    }
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::CorruptFile(msg.into())
}

fn u16_at(b: &[u8], at: usize) -> Result<u16> {
    b.get(at..at + 2)
        .map(|s| u16::from_le_bytes([s[0], s[1]]))
        .ok_or_else(|| corrupt("truncated header"))
}

fn u32_at(b: &[u8], at: usize) -> Result<u32> {
    b.get(at..at + 4)
        .map(|s| u32::from_le_bytes([s[0], s[1], s[2], s[3]]))
        .ok_or_else(|| corrupt("truncated header"))
}

/// `x · 32768` rounded half away from zero and saturated to 16 bits.
pub fn quantize_pcm16(x: f64) -> i16 {
    (x * 32768.0).round().clamp(-32768.0, 32767.0) as i16
}

pub fn decode_wav(bytes: &[u8]) -> Result<Waveform> {
    if bytes.len() < 12 {
        return Err(corrupt("file shorter than the RIFF header"));
    }
    if &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(Error::UnsupportedFormat("not a RIFF/WAVE file".into()));
    }
    let mut pos = 12;
    let mut fmt: Option<(u16, u16, u32, u16)> = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = u32_at(bytes, pos + 4)? as usize;
        let body = pos + 8;
        let end = body.checked_add(size).ok_or_else(|| corrupt("chunk size overflow"))?;
        if end > bytes.len() {
            return Err(corrupt(format!(
                "chunk '{}' claims {size} bytes, {} remain",
                String::from_utf8_lossy(id),
                bytes.len() - body
            )));
        }
        match id {
            b"fmt " => {
                if size < 16 {
                    return Err(corrupt("fmt chunk too short"));
                }
                let mut tag = u16_at(bytes, body)?;
                let channels = u16_at(bytes, body + 2)?;
                let rate = u32_at(bytes, body + 4)?;
                let bits = u16_at(bytes, body + 14)?;
                if tag == FORMAT_EXTENSIBLE {
                    if size < 40 {
                        return Err(corrupt("extensible fmt chunk too short"));
                    }
                    tag = u16_at(bytes, body + 24)?;
                }
                fmt = Some((tag, channels, rate, bits));
            }
            b"data" => {
                let (tag, channels, rate, bits) = fmt.ok_or_else(|| corrupt("data chunk before fmt chunk"))?;
                if channels != 1 {
                    return Err(Error::UnsupportedFormat(format!("{channels} channels; only mono is supported")));
                }
                let data = &bytes[body..end];
                let samples: Vec<f64> = match (tag, bits) {
                    (FORMAT_PCM, 16) => {
                        if data.len() % 2 != 0 {
                            return Err(corrupt("odd byte count in 16-bit data"));
                        }
                        data.chunks_exact(2)
                            .map(|c| i16::from_le_bytes([c[0], c[1]]) as f64 / 32768.0)
                            .collect()
                    }
                    (FORMAT_FLOAT, 32) => {
                        if data.len() % 4 != 0 {
                            return Err(corrupt("data length not a multiple of 4"));
                        }
                        data.chunks_exact(4)
                            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                            .collect()
                    }
                    _ => {
                        return Err(Error::UnsupportedFormat(format!(
                            "format tag {tag} with {bits} bits; expected 16-bit PCM or 32-bit float"
                        )))
                    }
                };
                return Waveform::new(samples, rate).map_err(|e| corrupt(e.to_string()));
            }
            _ => {}
        }
        // chunks are padded to even length
        pos = end + (size & 1);
    }
    Err(corrupt("no data chunk"))
}

pub fn encode_wav(w: &Waveform, depth: BitDepth) -> Vec<u8> {
    let (tag, bits) = match depth {
        BitDepth::Pcm16 => (FORMAT_PCM, 16u16),
        BitDepth::Float32 => (FORMAT_FLOAT, 32u16),
    };
    let block = bits / 8;
    let data_len = w.samples.len() * block as usize;
    let mut out = Vec::with_capacity(44 + data_len);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&((36 + data_len) as u32).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&tag.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&w.sample_rate.to_le_bytes());
    out.extend_from_slice(&(w.sample_rate * block as u32).to_le_bytes());
    out.extend_from_slice(&block.to_le_bytes());
    out.extend_from_slice(&bits.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&(data_len as u32).to_le_bytes());
    for &x in &w.samples {
        match depth {
            BitDepth::Pcm16 => out.extend_from_slice(&quantize_pcm16(x).to_le_bytes()),
            BitDepth::Float32 => out.extend_from_slice(&(x as f32).to_le_bytes()),
        }
    }
    out
}

pub fn read_wav(path: impl AsRef<Path>) -> Result<Waveform> {
    decode_wav(&fs::read(path)?)
}

pub fn write_wav(path: impl AsRef<Path>, w: &Waveform, depth: BitDepth) -> Result<()> {
    fs::write(path, encode_wav(w, depth))?;
    Ok(())
}

//! Binary mel feature files.
//!
//! Layout, all little-endian: `"MELF"`, then u32 version (1), n_frames,
//! n_mels, sample_rate, hop, win, a u8 normalized flag, the per-channel
//! mean and std vectors (f64) when normalized, and the row-major f64
//! payload.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::mel::{MelSpectrogram, NormStats};
use crate::signal::StftConfig;

pub const MAGIC: &[u8; 4] = b"MELF";
pub const VERSION: u32 = 1;
/// Bytes before the optional statistics block.
pub const FIXED_HEADER_LEN: usize = 4 + 6 * 4 + 1;

pub fn header_len(normalized: bool, n_mels: usize) -> usize {
    FIXED_HEADER_LEN + if normalized { 2 * n_mels * 8 } else { 0 }
}

fn to_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::InvalidInput(format!("{what} {v} does not fit in 32 bits")))
}

pub fn encode_mel(m: &MelSpectrogram) -> Result<Vec<u8>> {
    let (frames, mels) = m.values.shape();
    let mut out = Vec::with_capacity(header_len(m.normalized, mels) + frames * mels * 8);
    out.extend_from_slice(MAGIC);
    for v in [
        VERSION,
        to_u32(frames, "frame count")?,
        to_u32(mels, "channel count")?,
        m.sample_rate,
        to_u32(m.stft.hop_length, "hop")?,
        to_u32(m.stft.win_length, "window")?,
    ] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.push(m.normalized as u8);
    if m.normalized {
        let stats = m
            .stats
            .as_ref()
            .ok_or_else(|| Error::InvalidInput("normalized mel without stats".into()))?;
        for v in stats.mean.iter().chain(&stats.std) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    for v in m.values.as_slice() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::CorruptFile(format!(
                "need {n} bytes at offset {}, file has {}",
                self.pos,
                self.bytes.len()
            ))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let s = self.take(4)?;
        Ok(u32::from_le_bytes([s[0], s[1], s[2], s[3]]))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let len = n.checked_mul(8).ok_or_else(|| Error::CorruptFile("size overflow".into()))?;
        Ok(self
            .take(len)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect())
    }
}

pub fn decode_mel(bytes: &[u8]) -> Result<MelSpectrogram> {
    if bytes.len() < 8 {
        return Err(Error::Format("file too short for a mel header".into()));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::Format("bad magic, expected MELF".into()));
    }
    let mut r = Reader { bytes, pos: 4 };
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported mel file version {version}")));
    }
    let frames = r.u32()? as usize;
    let mels = r.u32()? as usize;
    let sample_rate = r.u32()?;
    let hop = r.u32()? as usize;
    let win = r.u32()? as usize;
    let normalized = match r.take(1)?[0] {
        0 => false,
        1 => true,
        f => return Err(Error::Format(format!("normalized flag must be 0 or 1, got {f}"))),
    };
    let stats = if normalized {
        let mean = r.f64s(mels)?;
        let std = r.f64s(mels)?;
        Some(NormStats::new(mean, std)?)
    } else {
        None
    };
    let expected = frames
        .checked_mul(mels)
        .and_then(|n| n.checked_mul(8))
        .ok_or_else(|| Error::CorruptFile("payload size overflow".into()))?;
    let remaining = bytes.len() - r.pos;
    if remaining != expected {
        return Err(Error::CorruptFile(format!(
            "payload has {remaining} bytes, header implies {expected}"
        )));
    }
    let values = Matrix::from_vec(frames, mels, r.f64s(frames * mels)?)?;
    let stft = StftConfig {
        win_length: win,
        hop_length: hop,
        fft_size: win.max(2).next_power_of_two(),
        ..StftConfig::default()
    };
    MelSpectrogram::from_parts(values, normalized, stats, sample_rate, stft)
}

pub fn read_mel(path: impl AsRef<Path>) -> Result<MelSpectrogram> {
    decode_mel(&fs::read(path)?)
}

pub fn write_mel(path: impl AsRef<Path>, m: &MelSpectrogram) -> Result<()> {
    fs::write(path, encode_mel(m)?)?;
    Ok(())
}

//! Training checkpoints as tag-length-value sections.
//!
//! File = `"TFCK"`, u32 version, then sections of a 4-byte tag, a u64
//! payload length and the payload. Sections:
//!
//! * `CONF`: the run configuration as `key = value` text
//! * `META`: `step=<n>` and `adam_t=<n>` lines
//! * `TENS`: one tensor; u32 name length, UTF-8 name, u32 rows, u32 cols,
//!   row-major f64 data. Names are `param/<p>`, `adam.m/<p>`, `adam.v/<p>`,
//!   `norm/mean` and `norm/std`.
//!
//! All integers and floats are little-endian.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::io::config::RunConfig;
use crate::matrix::Matrix;
use crate::mel::NormStats;
use crate::model::{ModelParams, Param};
use crate::optim::AdamState;

pub const MAGIC: &[u8; 4] = b"TFCK";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    /// Completed training steps.
    pub step: usize,
    pub params: ModelParams,
    pub adam: AdamState,
    pub stats: NormStats,
}

fn section(out: &mut Vec<u8>, tag: &[u8; 4], payload: &[u8]) {
    out.extend_from_slice(tag);
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(payload);
}

fn tensor_payload(name: &str, rows: usize, cols: usize, data: &[f64]) -> Vec<u8> {
    let mut p = Vec::with_capacity(12 + name.len() + data.len() * 8);
    p.extend_from_slice(&(name.len() as u32).to_le_bytes());
    p.extend_from_slice(name.as_bytes());
    p.extend_from_slice(&(rows as u32).to_le_bytes());
    p.extend_from_slice(&(cols as u32).to_le_bytes());
    for v in data {
        p.extend_from_slice(&v.to_le_bytes());
    }
    p
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    section(&mut out, b"CONF", ck.config.to_text().as_bytes());
    section(
        &mut out,
        b"META",
        format!("step={}\nadam_t={}\n", ck.step, ck.adam.t).as_bytes(),
    );
    for (prefix, set) in [("param", &ck.params.tensors), ("adam.m", &ck.adam.m), ("adam.v", &ck.adam.v)] {
        for (p, t) in Param::ALL.iter().zip(set) {
            let name = format!("{prefix}/{}", p.name());
            section(&mut out, b"TENS", &tensor_payload(&name, t.rows(), t.cols(), t.as_slice()));
        }
    }
    let n = ck.stats.channels();
    section(&mut out, b"TENS", &tensor_payload("norm/mean", 1, n, &ck.stats.mean));
    section(&mut out, b"TENS", &tensor_payload("norm/std", 1, n, &ck.stats.std));
    out
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::CorruptFile(msg.into())
}

fn u32_le(b: &[u8], at: usize) -> Result<u32> {
    b.get(at..at + 4)
        .map(|s| u32::from_le_bytes([s[0], s[1], s[2], s[3]]))
        .ok_or_else(|| corrupt("truncated tensor header"))
}

fn parse_tensor(p: &[u8]) -> Result<(String, Matrix<f64>)> {
    let name_len = u32_le(p, 0)? as usize;
    let name_end = 4usize.checked_add(name_len).ok_or_else(|| corrupt("tensor name overflow"))?;
    let name = p
        .get(4..name_end)
        .ok_or_else(|| corrupt("truncated tensor name"))
        .and_then(|b| String::from_utf8(b.to_vec()).map_err(|_| corrupt("tensor name is not UTF-8")))?;
    let rows = u32_le(p, name_end)? as usize;
    let cols = u32_le(p, name_end + 4)? as usize;
    let data = &p[name_end + 8..];
    if Some(data.len()) != rows.checked_mul(cols).and_then(|n| n.checked_mul(8)) {
        return Err(corrupt(format!("tensor '{name}' is {rows}x{cols} but carries {} bytes", data.len())));
    }
    let values = data
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Ok((name, Matrix::from_vec(rows, cols, values)?))
}

fn meta_value(meta: &str, key: &str) -> Result<u64> {
    meta.lines()
        .find_map(|l| l.strip_prefix(key).and_then(|r| r.strip_prefix('=')))
        .ok_or_else(|| corrupt(format!("META section lacks '{key}'")))?
        .trim()
        .parse()
        .map_err(|_| corrupt(format!("META '{key}' is not an integer")))
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 8 || &bytes[..4] != MAGIC {
        return Err(Error::Format("not a checkpoint file (bad magic)".into()));
    }
    let version = u32_le(bytes, 4)?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let mut pos = 8;
    let mut conf = None;
    let mut meta = None;
    let mut tensors: HashMap<String, Matrix<f64>> = HashMap::new();
    while pos < bytes.len() {
        if pos + 12 > bytes.len() {
            return Err(corrupt("truncated section header"));
        }
        let tag = &bytes[pos..pos + 4];
        let len = u64::from_le_bytes(bytes[pos + 4..pos + 12].try_into().expect("8 bytes"));
        let start = pos + 12;
        let end = usize::try_from(len)
            .ok()
            .and_then(|l| start.checked_add(l))
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| corrupt(format!("section claims {len} bytes, {} remain", bytes.len() - start)))?;
        let payload = &bytes[start..end];
        match tag {
            b"CONF" => conf = Some(String::from_utf8(payload.to_vec()).map_err(|_| corrupt("CONF is not UTF-8"))?),
            b"META" => meta = Some(String::from_utf8(payload.to_vec()).map_err(|_| corrupt("META is not UTF-8"))?),
            b"TENS" => {
                let (name, m) = parse_tensor(payload)?;
                if tensors.insert(name.clone(), m).is_some() {
                    return Err(corrupt(format!("duplicate tensor '{name}'")));
                }
            }
            other => {
                return Err(Error::Format(format!(
                    "unknown section tag '{}'",
                    String::from_utf8_lossy(other)
                )))
            }
        }
        pos = end;
    }
    let config = RunConfig::parse(&conf.ok_or_else(|| corrupt("missing CONF section"))?)?;
    let meta = meta.ok_or_else(|| corrupt("missing META section"))?;
    let step = meta_value(&meta, "step")? as usize;
    let adam_t = meta_value(&meta, "adam_t")?;

    let mut take = |name: String| tensors.remove(&name).ok_or_else(|| corrupt(format!("missing tensor '{name}'")));
    let mut group = |prefix: &str| -> Result<Vec<Matrix<f64>>> {
        Param::ALL.iter().map(|p| take(format!("{prefix}/{}", p.name()))).collect()
    };
    let params = ModelParams::from_tensors(config.dims(), group("param")?)?;
    let m = group("adam.m")?;
    let v = group("adam.v")?;
    for (set, what) in [(&m, "adam.m"), (&v, "adam.v")] {
        if set.iter().zip(&params.tensors).any(|(a, b)| a.shape() != b.shape()) {
            return Err(corrupt(format!("{what} shapes do not match the parameters")));
        }
    }
    let mean = take("norm/mean".into())?.as_slice().to_vec();
    let std = take("norm/std".into())?.as_slice().to_vec();
    let stats = NormStats::new(mean, std)?;
    if stats.channels() != config.n_mels {
        return Err(corrupt("normalization stats do not match n_mels"));
    }
    if let Some(extra) = tensors.keys().next() {
        return Err(corrupt(format!("unexpected tensor '{extra}'")));
    }
    Ok(Checkpoint {
        config,
        step,
        params,
        adam: AdamState { m, v, t: adam_t },
        stats,
    })
}

pub fn save_checkpoint(path: impl AsRef<Path>, ck: &Checkpoint) -> Result<()> {
    fs::write(path, encode_checkpoint(ck))?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    decode_checkpoint(&fs::read(path)?)
}

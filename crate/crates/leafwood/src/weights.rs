//! Versioned binary weights file.
//!
//! Layout (little-endian): magic `LWWEIGHT`, `u32` version, 32-byte SHA-256
//! digest of the network configuration, `u32` block count, then per block
//! `u32` name length, UTF-8 name, `u32` rank, `rank × u32` shape and the
//! f32 values.

use std::fs;
use std::path::Path;

use leafwood_core::model::{Model, ModelWeights, NetworkConfig};
use leafwood_core::ndiff::{ParamSet, Tensor};

use crate::config::{digest_bytes, to_hex};
use crate::error::{format_err, io_err, Error, Result};

pub const MAGIC: &[u8; 8] = b"LWWEIGHT";
pub const VERSION: u32 = 1;

pub fn config_digest(cfg: &NetworkConfig) -> Result<[u8; 32]> {
    let text = toml::to_string(cfg).map_err(|e| Error::Config(e.to_string()))?;
    Ok(digest_bytes(text.as_bytes()))
}

pub fn encode_weights(cfg: &NetworkConfig, weights: &ModelWeights) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&config_digest(cfg)?);
    out.extend_from_slice(&(weights.len() as u32).to_le_bytes());
    for e in weights.entries() {
        out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
        out.extend_from_slice(e.name.as_bytes());
        out.extend_from_slice(&(e.value.shape().len() as u32).to_le_bytes());
        for &d in e.value.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in e.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

/// Named tensors and the configuration digest stored in a weights file.
pub struct RawWeights {
    pub digest: [u8; 32],
    pub blocks: Vec<(String, Tensor<f32>)>,
}

pub fn decode_weights(bytes: &[u8]) -> std::result::Result<RawWeights, String> {
    let mut at = 0usize;
    let mut take = |n: usize| -> std::result::Result<&[u8], String> {
        let s = bytes.get(at..at + n).ok_or("file is truncated")?;
        at += n;
        Ok(s)
    };
    if take(8)? != MAGIC {
        return Err("not a weights file (bad magic)".into());
    }
    let u32_at = |b: &[u8]| u32::from_le_bytes(b.try_into().unwrap());
    let version = u32_at(take(4)?);
    if version != VERSION {
        return Err(format!("unsupported weights version {version}"));
    }
    let digest: [u8; 32] = take(32)?.try_into().unwrap();
    let count = u32_at(take(4)?) as usize;
    let mut blocks = Vec::with_capacity(count);
    for _ in 0..count {
        let len = u32_at(take(4)?) as usize;
        let name = String::from_utf8(take(len)?.to_vec()).map_err(|_| "parameter name is not UTF-8")?;
        let rank = u32_at(take(4)?) as usize;
        let shape: Vec<usize> = (0..rank).map(|_| take(4).map(|b| u32_at(b) as usize)).collect::<std::result::Result<_, _>>()?;
        let n: usize = shape.iter().product();
        let data: Vec<f32> = take(n * 4)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| e.to_string())?;
        blocks.push((name, t));
    }
    if at != bytes.len() {
        return Err(format!("{} trailing bytes", bytes.len() - at));
    }
    Ok(RawWeights { digest, blocks })
}

pub fn save_weights(path: &Path, cfg: &NetworkConfig, weights: &ModelWeights) -> Result<()> {
    let bytes = encode_weights(cfg, weights)?;
    fs::write(path, bytes).map_err(io_err(path))
}

/// Load weights for `cfg`; the stored digest, names and shapes must all match.
pub fn load_model(path: &Path, cfg: &NetworkConfig) -> Result<Model<f32>> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let raw = decode_weights(&bytes).map_err(|m| format_err(path, m))?;
    let want = config_digest(cfg)?;
    if raw.digest != want {
        return Err(leafwood_core::Error::WeightsMismatch(format!(
            "{} was trained with configuration {}, not {}",
            path.display(),
            to_hex(&raw.digest),
            to_hex(&want)
        ))
        .into());
    }
    let mut set = ParamSet::new();
    for (name, t) in raw.blocks {
        set.insert(name, t, true)?;
    }
    Ok(Model::from_weights(cfg.clone(), set)?)
}

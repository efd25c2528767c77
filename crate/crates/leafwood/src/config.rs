//! TOML configuration files. Every section is optional and falls back to
//! the defaults; command-line flags override file values.

use std::fs;
use std::path::Path;

use leafwood_core::infer::ConsolidationConfig;
use leafwood_core::model::NetworkConfig;
use leafwood_core::preprocess::PreprocessConfig;
use leafwood_core::synth::PlotSpec;
use leafwood_core::train::{AugmentConfig, LossConfig, TrainConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{format_err, io_err, Error, Result};

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub plot: PlotSpec,
    pub preprocess: PreprocessConfig,
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub loss: LossConfig,
    pub augment: AugmentConfig,
    pub consolidation: ConsolidationConfig,
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        toml::from_str(&text).map_err(|e| format_err(path, e.to_string()))
    }

    pub fn load_or_default(path: Option<&Path>) -> Result<Self> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }
}

/// Read a single TOML value such as a bare `NetworkConfig`.
pub fn load_toml<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    toml::from_str(&text).map_err(|e| format_err(path, e.to_string()))
}

pub fn save_toml<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = toml::to_string(value).map_err(|e| Error::Config(e.to_string()))?;
    fs::write(path, text).map_err(io_err(path))
}

pub fn digest_bytes(bytes: &[u8]) -> [u8; 32] {
    Sha256::digest(bytes).into()
}

pub fn to_hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Hex SHA-256 of a value's TOML form.
pub fn digest<T: Serialize>(value: &T) -> Result<String> {
    let text = toml::to_string(value).map_err(|e| Error::Config(e.to_string()))?;
    Ok(to_hex(&digest_bytes(text.as_bytes())))
}

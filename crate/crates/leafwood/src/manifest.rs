//! Run manifests written beside every command output.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::config::{save_toml, PipelineConfig};
use crate::error::Result;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: String,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub subcommand: String,
    pub argv: Vec<String>,
    pub seed: u64,
    pub threads: usize,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    /// SHA-256 of each configuration section used.
    pub config_digests: BTreeMap<String, String>,
    pub timings: Vec<StageTiming>,
    /// The effective configuration after flag overrides.
    pub config: PipelineConfig,
}

impl RunManifest {
    pub fn new(subcommand: &str, argv: &[String], seed: u64, threads: usize, config: PipelineConfig) -> Self {
        RunManifest {
            tool: env!("CARGO_PKG_NAME").to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            subcommand: subcommand.to_string(),
            argv: argv.to_vec(),
            seed,
            threads,
            inputs: Vec::new(),
            outputs: Vec::new(),
            config_digests: BTreeMap::new(),
            timings: Vec::new(),
            config,
        }
    }

    pub fn input(&mut self, p: &Path) {
        self.inputs.push(p.display().to_string());
    }

    pub fn output(&mut self, p: &Path) {
        self.outputs.push(p.display().to_string());
    }

    pub fn digest(&mut self, name: &str, digest: String) {
        self.config_digests.insert(name.to_string(), digest);
    }

    /// Time `f` as one stage.
    pub fn time<R>(&mut self, stage: &str, f: impl FnOnce() -> R) -> R {
        let start = Instant::now();
        let r = f();
        self.timings.push(StageTiming {
            stage: stage.to_string(),
            seconds: start.elapsed().as_secs_f64(),
        });
        r
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        save_toml(path, self)
    }
}

/// `out.ply` → `out.ply.manifest.toml`; a directory gets `run_manifest.toml` inside.
pub fn manifest_path(output: &Path) -> PathBuf {
    if output.is_dir() {
        output.join("run_manifest.toml")
    } else {
        let mut s = output.as_os_str().to_owned();
        s.push(".manifest.toml");
        PathBuf::from(s)
    }
}

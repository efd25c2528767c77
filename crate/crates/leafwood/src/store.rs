//! On-disk sample store: one directory holding `samples.bin` (binary
//! records, little-endian) and `manifest.toml` listing every record.
//!
//! Record layout: `scale: u8, count: u32, key: 3 × i32`, then `count` rows of
//! `3 × f32 position, f32 reflectance, u32 source index, u8 label` with
//! label 255 for unlabeled samples.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use leafwood_core::preprocess::{Sample, Scale};
use leafwood_core::spatial::VoxelKey;
use leafwood_core::ClassLabel;
use serde::{Deserialize, Serialize};

use crate::error::{format_err, io_err, Error, Result};

pub const MANIFEST: &str = "manifest.toml";
pub const DATA: &str = "samples.bin";
const HEADER: usize = 1 + 4 + 12;
const ROW: usize = 12 + 4 + 4 + 1;
const UNLABELED: u8 = 255;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordEntry {
    pub scale: Scale,
    pub key: [i32; 3],
    pub count: u32,
    /// Byte offset of the record in the data file.
    pub offset: u64,
    pub labeled: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoreManifest {
    pub version: u32,
    pub data: String,
    /// Point file the samples were cut from.
    pub source: String,
    pub seed: u64,
    /// SHA-256 of the preprocessing configuration.
    pub config_digest: String,
    pub records: Vec<RecordEntry>,
}

pub fn encode_sample(s: &Sample, out: &mut Vec<u8>) -> leafwood_core::Result<()> {
    if s.reflectance.len() != s.len() || s.source_indices.len() != s.len() {
        return Err(leafwood_core::Error::Shape {
            op: "encode_sample",
            detail: "column lengths differ".into(),
        });
    }
    if let Some(l) = &s.labels {
        if l.len() != s.len() {
            return Err(leafwood_core::Error::Shape {
                op: "encode_sample",
                detail: "label count differs".into(),
            });
        }
    }
    out.push(s.scale as u8);
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    for v in [s.key.i, s.key.j, s.key.k] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for i in 0..s.len() {
        for v in s.positions[i] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&s.reflectance[i].to_le_bytes());
        out.extend_from_slice(&s.source_indices[i].to_le_bytes());
        out.push(s.labels.as_ref().map_or(UNLABELED, |l| l[i].as_u8()));
    }
    Ok(())
}

/// Decode one record; returns the sample and the bytes consumed.
pub fn decode_sample(bytes: &[u8]) -> std::result::Result<(Sample, usize), String> {
    if bytes.len() < HEADER {
        return Err("truncated record header".into());
    }
    let scale = Scale::from_u8(bytes[0]).ok_or_else(|| format!("unknown scale {}", bytes[0]))?;
    let word = |at: usize| <[u8; 4]>::try_from(&bytes[at..at + 4]).unwrap();
    let count = u32::from_le_bytes(word(1)) as usize;
    let key = VoxelKey::new(
        i32::from_le_bytes(word(5)),
        i32::from_le_bytes(word(9)),
        i32::from_le_bytes(word(13)),
    );
    let len = HEADER + count * ROW;
    if bytes.len() < len {
        return Err(format!("record of {count} points is truncated"));
    }
    let mut s = Sample {
        scale,
        key,
        positions: Vec::with_capacity(count),
        reflectance: Vec::with_capacity(count),
        source_indices: Vec::with_capacity(count),
        labels: None,
    };
    let mut labels = Vec::with_capacity(count);
    let mut unlabeled = 0usize;
    for row in bytes[HEADER..len].chunks_exact(ROW) {
        let f = |at: usize| f32::from_le_bytes(row[at..at + 4].try_into().unwrap());
        s.positions.push([f(0), f(4), f(8)]);
        s.reflectance.push(f(12));
        s.source_indices.push(u32::from_le_bytes(row[16..20].try_into().unwrap()));
        match row[20] {
            UNLABELED => unlabeled += 1,
            v => labels.push(ClassLabel::from_u8(v).ok_or_else(|| format!("label {v} is not 0, 1 or 255"))?),
        }
    }
    if unlabeled == 0 {
        s.labels = Some(labels);
    } else if unlabeled != count {
        return Err("record mixes labeled and unlabeled points".into());
    }
    Ok((s, len))
}

/// Write `samples` into `dir`, creating it when needed.
pub fn write_sample_store(dir: &Path, samples: &[Sample], source: &str, seed: u64, config_digest: &str) -> Result<StoreManifest> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut data = Vec::new();
    let mut records = Vec::with_capacity(samples.len());
    for s in samples {
        let offset = data.len() as u64;
        encode_sample(s, &mut data)?;
        records.push(RecordEntry {
            scale: s.scale,
            key: [s.key.i, s.key.j, s.key.k],
            count: s.len() as u32,
            offset,
            labeled: s.labels.is_some(),
        });
    }
    let manifest = StoreManifest {
        version: 1,
        data: DATA.to_string(),
        source: source.to_string(),
        seed,
        config_digest: config_digest.to_string(),
        records,
    };
    let data_path = dir.join(DATA);
    fs::File::create(&data_path)
        .and_then(|mut f| f.write_all(&data))
        .map_err(io_err(&data_path))?;
    let text = toml::to_string(&manifest).map_err(|e| Error::Config(e.to_string()))?;
    let mpath = dir.join(MANIFEST);
    fs::write(&mpath, text).map_err(io_err(&mpath))?;
    Ok(manifest)
}

pub fn read_store_manifest(dir: &Path) -> Result<StoreManifest> {
    let mpath = dir.join(MANIFEST);
    let text = fs::read_to_string(&mpath).map_err(io_err(&mpath))?;
    let m: StoreManifest = toml::from_str(&text).map_err(|e| format_err(&mpath, e.to_string()))?;
    if m.version != 1 {
        return Err(format_err(&mpath, format!("unsupported store version {}", m.version)));
    }
    Ok(m)
}

/// Load every sample listed in the manifest, checking each record against
/// its entry.
pub fn read_sample_store(dir: &Path) -> Result<(Vec<Sample>, StoreManifest)> {
    let manifest = read_store_manifest(dir)?;
    let data_path: PathBuf = dir.join(&manifest.data);
    let bytes = fs::read(&data_path).map_err(io_err(&data_path))?;
    let mut samples = Vec::with_capacity(manifest.records.len());
    for (n, r) in manifest.records.iter().enumerate() {
        let at = r.offset as usize;
        let bad = |msg: String| format_err(&data_path, format!("record {n}: {msg}"));
        let (s, _) = decode_sample(bytes.get(at..).unwrap_or(&[])).map_err(bad)?;
        if s.scale != r.scale || [s.key.i, s.key.j, s.key.k] != r.key || s.len() != r.count as usize || s.labels.is_some() != r.labeled {
            return Err(bad("does not match its manifest entry".into()));
        }
        samples.push(s);
    }
    Ok((samples, manifest))
}

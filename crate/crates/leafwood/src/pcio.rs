//! PLY (ascii and binary little-endian) and headered CSV point files.
//!
//! Recognised columns: `x, y, z, reflectance, deviation, label, p_wood,
//! tree_id, ground`. Positions are written as doubles, the other scalars as
//! floats, labels and ground flags as bytes and tree ids as 32-bit integers.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use leafwood_core::{ClassLabel, PointCloud};

use crate::error::{format_err, io_err, Error, Result};

const NORMALIZED_COMMENT: &str = "leafwood reflectance normalized";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PointFormat {
    Ply,
    Csv,
}

impl PointFormat {
    pub fn from_path(path: &Path) -> Result<Self> {
        match path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase())
            .as_deref()
        {
            Some("ply") => Ok(PointFormat::Ply),
            Some("csv") => Ok(PointFormat::Csv),
            _ => Err(format_err(path, "unknown point file extension (expected .ply or .csv)")),
        }
    }
}

/// Encoding used when writing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum WriteFormat {
    #[default]
    PlyBinary,
    PlyAscii,
    Csv,
}

impl WriteFormat {
    pub fn from_path(path: &Path) -> Result<Self> {
        Ok(match PointFormat::from_path(path)? {
            PointFormat::Ply => WriteFormat::PlyBinary,
            PointFormat::Csv => WriteFormat::Csv,
        })
    }
}

/// A cloud and the names of columns that were skipped.
#[derive(Debug, Clone)]
pub struct LoadedCloud {
    pub cloud: PointCloud,
    pub ignored_columns: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Column {
    X,
    Y,
    Z,
    Reflectance,
    Deviation,
    Label,
    Probability,
    TreeId,
    Ground,
    Unknown,
}

impl Column {
    fn from_name(name: &str) -> Self {
        match name {
            "x" => Column::X,
            "y" => Column::Y,
            "z" => Column::Z,
            "reflectance" => Column::Reflectance,
            "deviation" => Column::Deviation,
            "label" => Column::Label,
            "p_wood" => Column::Probability,
            "tree_id" => Column::TreeId,
            "ground" => Column::Ground,
            _ => Column::Unknown,
        }
    }
}

/// Column-wise accumulator shared by the readers.
struct Builder<'p> {
    path: &'p Path,
    names: Vec<String>,
    kinds: Vec<Column>,
    cloud: PointCloud,
    pos: [Option<usize>; 3],
}

impl<'p> Builder<'p> {
    fn new(path: &'p Path, names: Vec<String>, rows: usize) -> Result<Self> {
        let kinds: Vec<Column> = names.iter().map(|n| Column::from_name(n)).collect();
        for (i, k) in kinds.iter().enumerate() {
            if *k != Column::Unknown && kinds[..i].contains(k) {
                return Err(format_err(path, format!("column `{}` appears twice", names[i])));
            }
        }
        let find = |c| kinds.iter().position(|k| *k == c);
        let pos = [find(Column::X), find(Column::Y), find(Column::Z)];
        if pos.iter().any(Option::is_none) {
            return Err(format_err(path, "x, y and z columns are required"));
        }
        let has = |c| kinds.contains(&c);
        let cloud = PointCloud {
            positions: Vec::with_capacity(rows),
            reflectance: has(Column::Reflectance).then(|| Vec::with_capacity(rows)),
            reflectance_normalized: false,
            deviation: has(Column::Deviation).then(|| Vec::with_capacity(rows)),
            labels: has(Column::Label).then(|| Vec::with_capacity(rows)),
            wood_probability: has(Column::Probability).then(|| Vec::with_capacity(rows)),
            tree_id: has(Column::TreeId).then(|| Vec::with_capacity(rows)),
            ground: has(Column::Ground).then(|| Vec::with_capacity(rows)),
        };
        Ok(Builder {
            path,
            names,
            kinds,
            cloud,
            pos,
        })
    }

    fn ignored(&self) -> Vec<String> {
        self.names
            .iter()
            .zip(&self.kinds)
            .filter(|(_, k)| **k == Column::Unknown)
            .map(|(n, _)| n.clone())
            .collect()
    }

    fn err(&self, location: &str, col: usize, msg: impl Into<String>) -> Error {
        Error::Parse {
            path: self.path.to_path_buf(),
            location: location.to_string(),
            column: self.names[col].clone(),
            msg: msg.into(),
        }
    }

    fn flag(&self, location: &str, col: usize, v: f64) -> Result<u8> {
        if v == 0.0 || v == 1.0 {
            Ok(v as u8)
        } else {
            Err(self.err(location, col, format!("{v} is not 0 or 1")))
        }
    }

    /// Push one row given a cell reader. `cell(col)` returns the cell as
    /// f64 (for positions, ids and flags) and `cell32(col)` as f32.
    fn push(
        &mut self,
        location: &str,
        cell: &mut dyn FnMut(usize) -> Result<f64>,
        cell32: &mut dyn FnMut(usize) -> Result<f32>,
    ) -> Result<()> {
        let mut p = [0.0; 3];
        for a in 0..3 {
            let col = self.pos[a].unwrap();
            p[a] = cell(col)?;
            if !p[a].is_finite() {
                return Err(self.err(location, col, "coordinate is not finite"));
            }
        }
        self.cloud.positions.push(p);
        for col in 0..self.kinds.len() {
            match self.kinds[col] {
                Column::X | Column::Y | Column::Z | Column::Unknown => {}
                Column::Reflectance => {
                    let v = cell32(col)?;
                    self.cloud.reflectance.as_mut().unwrap().push(v);
                }
                Column::Deviation => {
                    let v = cell32(col)?;
                    self.cloud.deviation.as_mut().unwrap().push(v);
                }
                Column::Probability => {
                    let v = cell32(col)?;
                    if !(0.0..=1.0).contains(&v) {
                        return Err(self.err(location, col, format!("probability {v} outside [0, 1]")));
                    }
                    self.cloud.wood_probability.as_mut().unwrap().push(v);
                }
                Column::Label => {
                    let v = self.flag(location, col, cell(col)?)?;
                    self.cloud.labels.as_mut().unwrap().push(ClassLabel::from_u8(v).unwrap());
                }
                Column::Ground => {
                    let v = self.flag(location, col, cell(col)?)?;
                    self.cloud.ground.as_mut().unwrap().push(v == 1);
                }
                Column::TreeId => {
                    let v = cell(col)?;
                    if !(v >= 0.0 && v <= u32::MAX as f64 && v.fract() == 0.0) {
                        return Err(self.err(location, col, format!("{v} is not a tree id")));
                    }
                    self.cloud.tree_id.as_mut().unwrap().push(v as u32);
                }
            }
        }
        Ok(())
    }
}

/// Read a PLY or CSV file, chosen by extension.
pub fn read_point_file(path: &Path) -> Result<LoadedCloud> {
    read_point_file_as(path, PointFormat::from_path(path)?)
}

pub fn read_point_file_as(path: &Path, format: PointFormat) -> Result<LoadedCloud> {
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(io_err(path))?;
    let loaded = match format {
        PointFormat::Ply => read_ply(path, &bytes)?,
        PointFormat::Csv => read_csv(path, &bytes)?,
    };
    for name in &loaded.ignored_columns {
        log::warn!("{}: ignoring unrecognised column `{name}`", path.display());
    }
    loaded.cloud.validate()?;
    Ok(loaded)
}

fn read_csv(path: &Path, bytes: &[u8]) -> Result<LoadedCloud> {
    let text = std::str::from_utf8(bytes).map_err(|e| format_err(path, format!("not UTF-8: {e}")))?;
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines.next().ok_or_else(|| format_err(path, "missing header row"))?;
    let names: Vec<String> = header.split(',').map(|s| s.trim().to_string()).collect();
    let mut b = Builder::new(path, names, 0)?;
    let width = b.names.len();
    for (no, line) in lines {
        let location = format!("line {}", no + 1);
        let cells: Vec<&str> = line.split(',').map(str::trim).collect();
        if cells.len() != width {
            return Err(format_err(
                path,
                format!("{location}: {} cells, header has {width}", cells.len()),
            ));
        }
        let names = b.names.clone();
        let bad = |col: usize, e: &dyn std::fmt::Display| Error::Parse {
            path: path.to_path_buf(),
            location: location.clone(),
            column: names[col].clone(),
            msg: format!("`{}`: {e}", cells[col]),
        };
        let mut cell = |col: usize| cells[col].parse::<f64>().map_err(|e| bad(col, &e));
        let mut cell32 = |col: usize| cells[col].parse::<f32>().map_err(|e| bad(col, &e));
        b.push(&location, &mut cell, &mut cell32)?;
    }
    Ok(LoadedCloud {
        ignored_columns: b.ignored(),
        cloud: b.cloud,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum PlyType {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl PlyType {
    fn parse(name: &str) -> Option<Self> {
        Some(match name {
            "char" | "int8" => PlyType::I8,
            "uchar" | "uint8" => PlyType::U8,
            "short" | "int16" => PlyType::I16,
            "ushort" | "uint16" => PlyType::U16,
            "int" | "int32" => PlyType::I32,
            "uint" | "uint32" => PlyType::U32,
            "float" | "float32" => PlyType::F32,
            "double" | "float64" => PlyType::F64,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            PlyType::I8 | PlyType::U8 => 1,
            PlyType::I16 | PlyType::U16 => 2,
            PlyType::I32 | PlyType::U32 | PlyType::F32 => 4,
            PlyType::F64 => 8,
        }
    }

    fn read(self, b: &[u8]) -> f64 {
        match self {
            PlyType::I8 => b[0] as i8 as f64,
            PlyType::U8 => b[0] as f64,
            PlyType::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            PlyType::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
            PlyType::I32 => i32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            PlyType::U32 => u32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            PlyType::F32 => f32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            PlyType::F64 => f64::from_le_bytes(b[..8].try_into().unwrap()),
        }
    }

    fn read32(self, b: &[u8]) -> f32 {
        match self {
            PlyType::F32 => f32::from_le_bytes(b[..4].try_into().unwrap()),
            _ => self.read(b) as f32,
        }
    }
}

struct PlyHeader {
    binary: bool,
    normalized: bool,
    vertices: usize,
    names: Vec<String>,
    types: Vec<PlyType>,
    body: usize,
}

fn parse_ply_header(path: &Path, bytes: &[u8]) -> Result<PlyHeader> {
    let end = bytes
        .windows(11)
        .position(|w| w == b"end_header\n")
        .ok_or_else(|| format_err(path, "PLY header has no end_header line"))?;
    let header = std::str::from_utf8(&bytes[..end]).map_err(|_| format_err(path, "PLY header is not text"))?;
    let mut lines = header.lines().map(str::trim);
    if lines.next() != Some("ply") {
        return Err(format_err(path, "missing `ply` magic line"));
    }
    let mut h = PlyHeader {
        binary: false,
        normalized: false,
        vertices: 0,
        names: Vec::new(),
        types: Vec::new(),
        body: end + 11,
    };
    let mut format_seen = false;
    let mut element: Option<String> = None;
    let mut elements_before_vertex = false;
    for line in lines {
        let words: Vec<&str> = line.split_whitespace().collect();
        match words.as_slice() {
            [] => {}
            ["format", "ascii", "1.0"] => format_seen = true,
            ["format", "binary_little_endian", "1.0"] => {
                h.binary = true;
                format_seen = true;
            }
            ["format", other, ..] => return Err(format_err(path, format!("unsupported PLY format `{other}`"))),
            ["comment", ..] => {
                if line.trim_start_matches("comment").trim() == NORMALIZED_COMMENT {
                    h.normalized = true;
                }
            }
            ["obj_info", ..] => {}
            ["element", name, count] => {
                let count: usize = count
                    .parse()
                    .map_err(|_| format_err(path, format!("bad element count `{count}`")))?;
                if *name == "vertex" {
                    h.vertices = count;
                } else if element.is_none() && count > 0 {
                    elements_before_vertex = true;
                }
                element = Some(name.to_string());
            }
            ["property", "list", ..] if element.as_deref() == Some("vertex") => {
                return Err(format_err(path, "list properties on vertices are not supported"));
            }
            ["property", "list", ..] => {}
            ["property", ty, name] if element.as_deref() == Some("vertex") => {
                let t = PlyType::parse(ty).ok_or_else(|| format_err(path, format!("unknown PLY type `{ty}`")))?;
                h.names.push(name.to_string());
                h.types.push(t);
            }
            ["property", ..] => {}
            _ => return Err(format_err(path, format!("unexpected header line `{line}`"))),
        }
    }
    if !format_seen {
        return Err(format_err(path, "missing format line"));
    }
    if elements_before_vertex {
        return Err(format_err(path, "the vertex element must come first"));
    }
    Ok(h)
}

fn read_ply(path: &Path, bytes: &[u8]) -> Result<LoadedCloud> {
    let h = parse_ply_header(path, bytes)?;
    let mut b = Builder::new(path, h.names.clone(), h.vertices)?;
    b.cloud.reflectance_normalized = h.normalized && b.cloud.reflectance.is_some();
    let body = &bytes[h.body..];
    if h.binary {
        let offsets: Vec<usize> = h
            .types
            .iter()
            .scan(0, |o, t| {
                let at = *o;
                *o += t.size();
                Some(at)
            })
            .collect();
        let stride: usize = h.types.iter().map(|t| t.size()).sum();
        if body.len() < stride * h.vertices {
            return Err(format_err(
                path,
                format!("binary body holds {} bytes, {} vertices need {}", body.len(), h.vertices, stride * h.vertices),
            ));
        }
        for (v, rec) in body.chunks_exact(stride).take(h.vertices).enumerate() {
            let location = format!("vertex {}", v + 1);
            let mut cell = |c: usize| Ok(h.types[c].read(&rec[offsets[c]..]));
            let mut cell32 = |c: usize| Ok(h.types[c].read32(&rec[offsets[c]..]));
            b.push(&location, &mut cell, &mut cell32)?;
        }
    } else {
        let text = std::str::from_utf8(body).map_err(|_| format_err(path, "ASCII body is not text"))?;
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        for v in 0..h.vertices {
            let location = format!("vertex {}", v + 1);
            let line = lines
                .next()
                .ok_or_else(|| format_err(path, format!("file ends before {location}")))?;
            let cells: Vec<&str> = line.split_whitespace().collect();
            if cells.len() < h.names.len() {
                return Err(format_err(path, format!("{location}: too few values")));
            }
            let names = &h.names;
            let bad = |col: usize, e: &dyn std::fmt::Display| Error::Parse {
                path: path.to_path_buf(),
                location: location.clone(),
                column: names[col].clone(),
                msg: format!("`{}`: {e}", cells[col]),
            };
            let mut cell = |col: usize| cells[col].parse::<f64>().map_err(|e| bad(col, &e));
            let mut cell32 = |col: usize| cells[col].parse::<f32>().map_err(|e| bad(col, &e));
            b.push(&location, &mut cell, &mut cell32)?;
        }
    }
    Ok(LoadedCloud {
        ignored_columns: b.ignored(),
        cloud: b.cloud,
    })
}

/// Write `cloud`; fails without creating the file when the cloud is empty
/// or inconsistent.
pub fn write_point_file(cloud: &PointCloud, path: &Path, format: WriteFormat) -> Result<()> {
    if cloud.is_empty() {
        return Err(format_err(path, "refusing to write an empty cloud"));
    }
    cloud.validate()?;
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    match format {
        WriteFormat::Csv => write_csv(cloud, &mut w),
        WriteFormat::PlyAscii => write_ply(cloud, &mut w, false),
        WriteFormat::PlyBinary => write_ply(cloud, &mut w, true),
    }
    .and_then(|_| w.flush())
    .map_err(io_err(path))
}

/// Present columns in file order, with their PLY type.
fn columns(cloud: &PointCloud) -> Vec<(&'static str, &'static str)> {
    let mut cols = vec![("x", "double"), ("y", "double"), ("z", "double")];
    if cloud.reflectance.is_some() {
        cols.push(("reflectance", "float"));
    }
    if cloud.deviation.is_some() {
        cols.push(("deviation", "float"));
    }
    if cloud.labels.is_some() {
        cols.push(("label", "uchar"));
    }
    if cloud.wood_probability.is_some() {
        cols.push(("p_wood", "float"));
    }
    if cloud.tree_id.is_some() {
        cols.push(("tree_id", "uint"));
    }
    if cloud.ground.is_some() {
        cols.push(("ground", "uchar"));
    }
    cols
}

/// Row `i` as text cells, shortest round-trip representations.
fn text_row(cloud: &PointCloud, i: usize, out: &mut Vec<String>) {
    out.clear();
    out.extend(cloud.positions[i].iter().map(|v| v.to_string()));
    if let Some(c) = &cloud.reflectance {
        out.push(c[i].to_string());
    }
    if let Some(c) = &cloud.deviation {
        out.push(c[i].to_string());
    }
    if let Some(c) = &cloud.labels {
        out.push(c[i].as_u8().to_string());
    }
    if let Some(c) = &cloud.wood_probability {
        out.push(c[i].to_string());
    }
    if let Some(c) = &cloud.tree_id {
        out.push(c[i].to_string());
    }
    if let Some(c) = &cloud.ground {
        out.push((c[i] as u8).to_string());
    }
}

fn write_csv(cloud: &PointCloud, w: &mut impl Write) -> std::io::Result<()> {
    let names: Vec<&str> = columns(cloud).into_iter().map(|(n, _)| n).collect();
    writeln!(w, "{}", names.join(","))?;
    let mut cells = Vec::new();
    for i in 0..cloud.len() {
        text_row(cloud, i, &mut cells);
        writeln!(w, "{}", cells.join(","))?;
    }
    Ok(())
}

fn write_ply(cloud: &PointCloud, w: &mut impl Write, binary: bool) -> std::io::Result<()> {
    writeln!(w, "ply")?;
    writeln!(w, "format {} 1.0", if binary { "binary_little_endian" } else { "ascii" })?;
    if cloud.reflectance_normalized && cloud.reflectance.is_some() {
        writeln!(w, "comment {NORMALIZED_COMMENT}")?;
    }
    writeln!(w, "element vertex {}", cloud.len())?;
    for (name, ty) in columns(cloud) {
        writeln!(w, "property {ty} {name}")?;
    }
    writeln!(w, "end_header")?;
    if !binary {
        let mut cells = Vec::new();
        for i in 0..cloud.len() {
            text_row(cloud, i, &mut cells);
            writeln!(w, "{}", cells.join(" "))?;
        }
        return Ok(());
    }
    let mut rec = Vec::with_capacity(64);
    for i in 0..cloud.len() {
        rec.clear();
        for v in cloud.positions[i] {
            rec.extend_from_slice(&v.to_le_bytes());
        }
        if let Some(c) = &cloud.reflectance {
            rec.extend_from_slice(&c[i].to_le_bytes());
        }
        if let Some(c) = &cloud.deviation {
            rec.extend_from_slice(&c[i].to_le_bytes());
        }
        if let Some(c) = &cloud.labels {
            rec.push(c[i].as_u8());
        }
        if let Some(c) = &cloud.wood_probability {
            rec.extend_from_slice(&c[i].to_le_bytes());
        }
        if let Some(c) = &cloud.tree_id {
            rec.extend_from_slice(&c[i].to_le_bytes());
        }
        if let Some(c) = &cloud.ground {
            rec.push(c[i] as u8);
        }
        w.write_all(&rec)?;
    }
    Ok(())
}

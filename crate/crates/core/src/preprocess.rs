//! Cloud preparation: noise filtering, ground removal, reflectance
//! normalisation and two-scale voxel tiling into model-ready samples.

use alloc::collections::VecDeque;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::cloud::{ClassLabel, PointCloud};
use crate::error::{invalid, Error, Result};
use crate::rng::{derive_seed, rng_from_seed};
use crate::spatial::{group_by_voxel, VoxelKey};

/// Added to `reflectance + 1` so that the lowest-ranked point keeps a
/// positive sampling weight.
pub const SAMPLING_EPS: f64 = 1e-3;

/// Tiling resolution of a sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
#[repr(u8)]
pub enum Scale {
    Fine = 0,
    Coarse = 1,
}

impl Scale {
    pub const ALL: [Scale; 2] = [Scale::Fine, Scale::Coarse];

    pub fn from_u8(v: u8) -> Option<Self> {
        match v {
            0 => Some(Scale::Fine),
            1 => Some(Scale::Coarse),
            _ => None,
        }
    }
}

/// Cloth simulation parameters for ground removal.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClothConfig {
    /// Spacing of the cloth particles (m).
    pub resolution: f64,
    /// Constraint passes per iteration, 1 (soft) to 3 (stiff).
    pub rigidness: u8,
    /// Points closer than this to the settled cloth are ground (m).
    pub threshold: f64,
    pub iterations: usize,
    pub time_step: f64,
}

impl Default for ClothConfig {
    fn default() -> Self {
        ClothConfig {
            resolution: 0.5,
            rigidness: 2,
            threshold: 0.3,
            iterations: 500,
            time_step: 0.65,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessConfig {
    pub deviation_max: f64,
    pub reflectance_min: f64,
    pub fine_voxel: f64,
    pub coarse_voxel: f64,
    pub max_points: usize,
    pub ground_removal: bool,
    pub cloth: ClothConfig,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            deviation_max: 15.0,
            reflectance_min: -20.0,
            fine_voxel: 2.0,
            coarse_voxel: 4.0,
            max_points: 16_384,
            ground_removal: false,
            cloth: ClothConfig::default(),
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.fine_voxel > 0.0 && self.fine_voxel < self.coarse_voxel) {
            return Err(invalid(format!(
                "voxel sizes must satisfy 0 < fine ({}) < coarse ({})",
                self.fine_voxel, self.coarse_voxel
            )));
        }
        if self.max_points == 0 {
            return Err(invalid("max_points must be positive"));
        }
        Ok(())
    }

    pub fn voxel_size(&self, scale: Scale) -> f64 {
        match scale {
            Scale::Fine => self.fine_voxel,
            Scale::Coarse => self.coarse_voxel,
        }
    }
}

/// One mean-centred voxel tile.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub scale: Scale,
    pub key: VoxelKey,
    pub positions: Vec<[f32; 3]>,
    /// Normalised reflectance, zeros when the source had none.
    pub reflectance: Vec<f32>,
    pub source_indices: Vec<u32>,
    pub labels: Option<Vec<ClassLabel>>,
}

impl Sample {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

/// Indices of points passing the deviation and raw reflectance bounds.
/// Boundary values are kept.
pub fn filter_indices(cloud: &PointCloud, cfg: &PreprocessConfig) -> Vec<usize> {
    let refl = cloud.reflectance.as_ref().filter(|_| !cloud.reflectance_normalized);
    (0..cloud.len())
        .filter(|&i| {
            let dev_ok = cloud
                .deviation
                .as_ref()
                .map_or(true, |d| !(d[i] as f64 > cfg.deviation_max));
            let refl_ok = refl.map_or(true, |r| !((r[i] as f64) < cfg.reflectance_min));
            dev_ok && refl_ok
        })
        .collect()
}

pub fn filter_points(cloud: &PointCloud, cfg: &PreprocessConfig) -> PointCloud {
    cloud.subset(&filter_indices(cloud, cfg))
}

/// Ground flags from a cloth dropped onto the upside-down cloud.
pub fn classify_ground(positions: &[[f64; 3]], cfg: &ClothConfig) -> Result<Vec<bool>> {
    if positions.is_empty() {
        return Err(invalid("classify_ground: empty cloud"));
    }
    if !(cfg.resolution > 0.0) || !(cfg.threshold > 0.0) || !(cfg.time_step > 0.0) {
        return Err(invalid("cloth resolution, threshold and time step must be positive"));
    }
    if !(1..=3).contains(&cfg.rigidness) {
        return Err(invalid(format!("rigidness {} must be 1, 2 or 3", cfg.rigidness)));
    }
    let mut lo = [f64::INFINITY; 2];
    let mut hi = [f64::NEG_INFINITY; 2];
    let mut top = f64::NEG_INFINITY;
    for p in positions {
        for a in 0..2 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
        top = top.max(-p[2]);
    }
    let res = cfg.resolution;
    let origin = [lo[0] - res, lo[1] - res];
    let nx = libm::ceil((hi[0] - origin[0]) / res) as usize + 2;
    let ny = libm::ceil((hi[1] - origin[1]) / res) as usize + 2;
    let node = |x: usize, y: usize| y * nx + x;
    let nearest = |p: &[f64; 3]| {
        let x = libm::round((p[0] - origin[0]) / res) as usize;
        let y = libm::round((p[1] - origin[1]) / res) as usize;
        (x.min(nx - 1), y.min(ny - 1))
    };

    // Collision height of each particle: the highest inverted point that
    // projects onto it; empty nodes borrow from the closest filled node.
    let mut collide = vec![f64::NEG_INFINITY; nx * ny];
    for p in positions {
        let (x, y) = nearest(p);
        let c = &mut collide[node(x, y)];
        *c = c.max(-p[2]);
    }
    let mut queue: VecDeque<usize> = (0..nx * ny).filter(|&i| collide[i].is_finite()).collect();
    while let Some(i) = queue.pop_front() {
        let (x, y) = (i % nx, i / nx);
        let h = collide[i];
        let mut visit = |j: usize| {
            if !collide[j].is_finite() {
                collide[j] = h;
                queue.push_back(j);
            }
        };
        if x > 0 {
            visit(i - 1);
        }
        if x + 1 < nx {
            visit(i + 1);
        }
        if y > 0 {
            visit(i - nx);
        }
        if y + 1 < ny {
            visit(i + nx);
        }
    }

    let start = top + res;
    let mut z = vec![start; nx * ny];
    let mut prev = z.clone();
    let mut movable = vec![true; nx * ny];
    let gravity = 0.2 * cfg.time_step * cfg.time_step;
    let damping = 0.01;
    let mut edges = Vec::with_capacity(2 * nx * ny);
    for y in 0..ny {
        for x in 0..nx {
            if x + 1 < nx {
                edges.push((node(x, y), node(x + 1, y)));
            }
            if y + 1 < ny {
                edges.push((node(x, y), node(x, y + 1)));
            }
        }
    }
    for _ in 0..cfg.iterations {
        for i in 0..z.len() {
            if movable[i] {
                let cur = z[i];
                z[i] = cur + (cur - prev[i]) * (1.0 - damping) - gravity;
                prev[i] = cur;
                if z[i] <= collide[i] {
                    z[i] = collide[i];
                    prev[i] = collide[i];
                    movable[i] = false;
                }
            }
        }
        for _ in 0..cfg.rigidness {
            for &(a, b) in &edges {
                let d = z[b] - z[a];
                match (movable[a], movable[b]) {
                    (true, true) => {
                        z[a] += 0.25 * d;
                        z[b] -= 0.25 * d;
                    }
                    (true, false) => z[a] += 0.5 * d,
                    (false, true) => z[b] -= 0.5 * d,
                    (false, false) => {}
                }
            }
            for i in 0..z.len() {
                if movable[i] && z[i] < collide[i] {
                    z[i] = collide[i];
                    prev[i] = collide[i];
                    movable[i] = false;
                }
            }
        }
    }

    Ok(positions
        .iter()
        .map(|p| {
            let fx = ((p[0] - origin[0]) / res).clamp(0.0, (nx - 1) as f64);
            let fy = ((p[1] - origin[1]) / res).clamp(0.0, (ny - 1) as f64);
            let (x0, y0) = ((fx as usize).min(nx - 2), (fy as usize).min(ny - 2));
            let (tx, ty) = (fx - x0 as f64, fy - y0 as f64);
            let h = (1.0 - tx) * (1.0 - ty) * z[node(x0, y0)]
                + tx * (1.0 - ty) * z[node(x0 + 1, y0)]
                + (1.0 - tx) * ty * z[node(x0, y0 + 1)]
                + tx * ty * z[node(x0 + 1, y0 + 1)];
            libm::fabs(-p[2] - h) < cfg.threshold
        })
        .collect())
}

/// Drop ground points; errors when nothing would remain.
pub fn remove_ground(cloud: &PointCloud, cfg: &ClothConfig) -> Result<PointCloud> {
    let ground = classify_ground(&cloud.positions, cfg)?;
    let keep: Vec<usize> = (0..cloud.len()).filter(|&i| !ground[i]).collect();
    if keep.is_empty() {
        return Err(Error::Degenerate(
            "every point was classified as ground; check the cloth parameters".into(),
        ));
    }
    Ok(cloud.subset(&keep))
}

/// Average-rank map onto [-1, 1]: a value with 0-based average rank `r`
/// among `n` values becomes `2 r / (n - 1) - 1`. Ties share their rank, so a
/// constant input maps to zeros.
pub fn normalize_reflectance(values: &[f32]) -> Vec<f32> {
    let n = values.len();
    let mut out = vec![0.0f32; n];
    if n < 2 {
        return out;
    }
    let mut order: Vec<u32> = (0..n as u32).collect();
    order.sort_unstable_by(|&a, &b| values[a as usize].total_cmp(&values[b as usize]));
    let denom = (n - 1) as f64;
    let mut lo = 0;
    while lo < n {
        let v = values[order[lo] as usize];
        let mut hi = lo + 1;
        while hi < n && values[order[hi] as usize] == v {
            hi += 1;
        }
        let rank = (lo + hi - 1) as f64 / 2.0;
        let mapped = (2.0 * rank / denom - 1.0) as f32;
        for &i in &order[lo..hi] {
            out[i as usize] = mapped;
        }
        lo = hi;
    }
    out
}

/// Sampling weight of a normalised reflectance value.
pub fn sampling_weight(reflectance: f32) -> f64 {
    reflectance as f64 + 1.0 + SAMPLING_EPS
}

/// Indices (ascending) kept when thinning `count` points to at most
/// `max_points`. Draws without replacement with probability proportional to
/// [`sampling_weight`], or uniformly when `reflectance` is `None`.
pub fn weighted_downsample(
    count: usize,
    reflectance: Option<&[f32]>,
    max_points: usize,
    seed: u64,
) -> Result<Vec<usize>> {
    if max_points == 0 {
        return Err(invalid("weighted_downsample: max_points must be positive"));
    }
    if let Some(r) = reflectance {
        if r.len() != count {
            return Err(crate::error::shape(
                "weighted_downsample",
                format!("{} reflectance values for {count} points", r.len()),
            ));
        }
    }
    if count <= max_points {
        return Ok((0..count).collect());
    }
    // Efraimidis-Spirakis: keep the largest ln(u) / w.
    let mut rng = rng_from_seed(seed);
    let mut keys: Vec<(f64, usize)> = (0..count)
        .map(|i| {
            let u: f64 = rng.random::<f64>();
            let u = if u > 0.0 { u } else { f64::MIN_POSITIVE };
            let w = reflectance.map_or(1.0, |r| sampling_weight(r[i]));
            (libm::log(u) / w, i)
        })
        .collect();
    keys.select_nth_unstable_by(max_points - 1, |a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut kept: Vec<usize> = keys[..max_points].iter().map(|&(_, i)| i).collect();
    kept.sort_unstable();
    Ok(kept)
}

/// Build one sample from the points of a voxel. `reflectance` must already
/// be normalised when present.
pub fn build_sample(
    cloud: &PointCloud,
    reflectance: Option<&[f32]>,
    scale: Scale,
    key: VoxelKey,
    members: &[usize],
    max_points: usize,
    seed: u64,
) -> Result<Sample> {
    let member_refl: Option<Vec<f32>> = reflectance.map(|r| members.iter().map(|&i| r[i]).collect());
    let voxel_seed = derive_seed(seed, &[scale as i64, key.i as i64, key.j as i64, key.k as i64]);
    let kept = weighted_downsample(members.len(), member_refl.as_deref(), max_points, voxel_seed)?;
    let source: Vec<usize> = kept.iter().map(|&k| members[k]).collect();
    let mut mean = [0.0f64; 3];
    for &i in &source {
        for a in 0..3 {
            mean[a] += cloud.positions[i][a];
        }
    }
    let n = source.len() as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    let positions = source
        .iter()
        .map(|&i| {
            let p = cloud.positions[i];
            [
                (p[0] - mean[0]) as f32,
                (p[1] - mean[1]) as f32,
                (p[2] - mean[2]) as f32,
            ]
        })
        .collect();
    let reflectance = match reflectance {
        Some(r) => source.iter().map(|&i| r[i]).collect(),
        None => vec![0.0; source.len()],
    };
    Ok(Sample {
        scale,
        key,
        positions,
        reflectance,
        source_indices: source.iter().map(|&i| i as u32).collect(),
        labels: cloud
            .labels
            .as_ref()
            .map(|l| source.iter().map(|&i| l[i]).collect()),
    })
}

/// Reflectance ready for sampling: normalised on demand, `None` if absent.
pub fn normalized_reflectance(cloud: &PointCloud) -> Option<Vec<f32>> {
    cloud.reflectance.as_ref().map(|r| {
        if cloud.reflectance_normalized {
            r.clone()
        } else {
            normalize_reflectance(r)
        }
    })
}

/// Voxel groups at one scale, in ascending key order.
pub fn voxel_groups(cloud: &PointCloud, cfg: &PreprocessConfig, scale: Scale) -> Result<Vec<(VoxelKey, Vec<usize>)>> {
    group_by_voxel(&cloud.positions, cfg.voxel_size(scale))
}

/// Tile the cloud at the fine and the coarse voxel size. Fine samples come
/// first, each scale in ascending key order.
pub fn make_samples(cloud: &PointCloud, cfg: &PreprocessConfig, seed: u64) -> Result<Vec<Sample>> {
    cfg.validate()?;
    if cloud.is_empty() {
        return Err(invalid("make_samples: empty cloud"));
    }
    let refl = normalized_reflectance(cloud);
    let mut out = Vec::new();
    for scale in Scale::ALL {
        for (key, members) in voxel_groups(cloud, cfg, scale)? {
            out.push(build_sample(cloud, refl.as_deref(), scale, key, &members, cfg.max_points, seed)?);
        }
    }
    Ok(out)
}

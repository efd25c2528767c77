//! Segmentation network: a set-abstraction encoder with reflectance gates
//! and inverted residual blocks, a feature propagation decoder and a
//! per-point wood logit head.
//!
//! Geometry (normalisation, centroid selection, neighbour tables and
//! interpolation weights) is computed once per batch in double precision by
//! [`Geometry::build`]; the differentiable part runs on a [`Tape`].

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::index;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::cloud::dist2;
use crate::error::{invalid, shape, Error, Result};
use crate::ndiff::{
    gumbel_noise, BatchStats, BnMode, GumbelMode, ParamSet, Scalar, Tape, Tensor, Var,
};
use crate::preprocess::Sample;
use crate::rng::{derive_seed, rng_from_seed, Rng};
use crate::spatial::{group_by_voxel, GridIndex, KdTree};

pub mod checks;

/// Neighbours interpolated by a feature propagation stage.
pub const INTERPOLATION_K: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    /// Centroid voxel edge in normalised sample units.
    pub centroid_voxel: f64,
    pub neighbor_k: usize,
    /// Ball radius for the first stage, normalised units.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub radius: Option<f64>,
    pub channels: usize,
    pub expansion: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub stages: Vec<StageConfig>,
    /// Decoder width at each level, finest first.
    pub fp_channels: Vec<usize>,
    pub head_hidden: usize,
    pub gate_hidden: usize,
    pub gumbel_temperature: f64,
    pub bn_momentum: f64,
    pub bn_eps: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self::full()
    }
}

fn stage(voxel: f64, radius: Option<f64>, channels: usize) -> StageConfig {
    StageConfig {
        centroid_voxel: voxel,
        neighbor_k: 32,
        radius,
        channels,
        expansion: 4,
    }
}

impl NetworkConfig {
    /// Four stages, 64 to 512 channels.
    pub fn full() -> Self {
        NetworkConfig {
            stages: vec![
                stage(0.05, Some(0.1), 64),
                stage(0.1, None, 128),
                stage(0.2, None, 256),
                stage(0.4, None, 512),
            ],
            fp_channels: vec![128, 64, 128, 256],
            head_hidden: 128,
            gate_hidden: 16,
            gumbel_temperature: 1.0,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
        }
    }

    /// Two stages with 32 and 64 channels, for desk-scale runs.
    pub fn reduced() -> Self {
        NetworkConfig {
            stages: vec![stage(0.1, Some(0.15), 32), stage(0.25, None, 64)],
            fp_channels: vec![32, 64],
            head_hidden: 32,
            gate_hidden: 8,
            gumbel_temperature: 1.0,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(invalid("network needs at least one stage"));
        }
        if self.fp_channels.len() != self.stages.len() {
            return Err(invalid(format!(
                "{} feature propagation widths for {} stages",
                self.fp_channels.len(),
                self.stages.len()
            )));
        }
        for (s, st) in self.stages.iter().enumerate() {
            if st.neighbor_k != 32 || st.expansion != 4 {
                return Err(invalid(format!(
                    "stage {s}: neighbour count must be 32 and expansion 4"
                )));
            }
            if st.radius.is_some() != (s == 0) {
                return Err(invalid(format!("stage {s}: only the first stage takes a radius")));
            }
            if let Some(r) = st.radius {
                if !(r > 0.0) {
                    return Err(invalid(format!("stage {s}: radius {r} must be positive")));
                }
            }
            if !(st.centroid_voxel > 0.0) || st.channels == 0 {
                return Err(invalid(format!("stage {s}: voxel size and width must be positive")));
            }
        }
        if self.fp_channels.contains(&0) || self.head_hidden == 0 || self.gate_hidden == 0 {
            return Err(invalid("layer widths must be positive"));
        }
        if !(self.gumbel_temperature > 0.0) {
            return Err(invalid("gumbel temperature must be positive"));
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) || !(self.bn_eps > 0.0) {
            return Err(invalid("batch norm momentum must lie in [0, 1] and eps be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Positions and reflectance of one sample, as seen by the network.
#[derive(Debug, Clone, Copy)]
pub struct SampleView<'a> {
    pub positions: &'a [[f32; 3]],
    pub reflectance: &'a [f32],
}

impl<'a> From<&'a Sample> for SampleView<'a> {
    fn from(s: &'a Sample) -> Self {
        SampleView {
            positions: &s.positions,
            reflectance: &s.reflectance,
        }
    }
}

/// Divide every coordinate by the largest point norm. Returns the scaled
/// positions and the divisor. A sample with every point at the centre is
/// left as is (divisor 1).
pub fn normalize_sample(positions: &[[f32; 3]]) -> Result<(Vec<[f64; 3]>, f64)> {
    let max = positions
        .iter()
        .map(|p| {
            let q = [p[0] as f64, p[1] as f64, p[2] as f64];
            libm::sqrt(dist2(&q, &[0.0; 3]))
        })
        .fold(0.0f64, |m, d| if m.is_nan() || d.is_nan() { f64::NAN } else { m.max(d) });
    if !max.is_finite() {
        return Err(Error::Degenerate("sample has non-finite coordinates".into()));
    }
    let max = if max > 0.0 { max } else { 1.0 };
    Ok((
        positions
            .iter()
            .map(|p| [p[0] as f64 / max, p[1] as f64 / max, p[2] as f64 / max])
            .collect(),
        max,
    ))
}

/// Centroid indices for one stage. Evaluation keeps, per occupied voxel,
/// the point nearest the voxel centre (lower index on ties); training draws
/// a uniform random subset of the same size.
pub fn select_centroids(points: &[[f64; 3]], voxel_size: f64, mode: Mode, seed: u64) -> Result<Vec<usize>> {
    if points.is_empty() {
        return Err(invalid("select_centroids: no points"));
    }
    let groups = group_by_voxel(points, voxel_size)?;
    match mode {
        Mode::Eval => Ok(groups
            .iter()
            .map(|(key, members)| {
                let c = key.center(voxel_size);
                let mut best = members[0];
                let mut best_d = dist2(&points[best], &c);
                for &m in &members[1..] {
                    let d = dist2(&points[m], &c);
                    if d < best_d {
                        best = m;
                        best_d = d;
                    }
                }
                best
            })
            .collect()),
        Mode::Train => {
            let mut rng = rng_from_seed(seed);
            let mut picked = index::sample(&mut rng, points.len(), groups.len()).into_vec();
            picked.sort_unstable();
            Ok(picked)
        }
    }
}

/// Neighbour table of one stage for one sample: `k` rows per centroid.
#[derive(Debug, Clone, PartialEq)]
pub struct Grouping {
    pub k: usize,
    /// Indices into the stage's input points.
    pub neighbors: Vec<u32>,
    /// `(neighbour − centroid) / max ‖neighbour − centroid‖`.
    pub local: Vec<[f64; 3]>,
}

/// Group the neighbours of each centroid. With a radius the ball query is
/// capped at `k`; otherwise the `min(k, n)` nearest are taken. Short
/// neighbourhoods are padded by repeating the centroid.
pub fn group_normalize(points: &[[f64; 3]], centroids: &[usize], k: usize, radius: Option<f64>) -> Result<Grouping> {
    if centroids.is_empty() {
        return Err(invalid("group_normalize: no centroids"));
    }
    if k == 0 {
        return Err(invalid("group_normalize: k must be positive"));
    }
    let mut neighbors = Vec::with_capacity(centroids.len() * k);
    let mut local = Vec::with_capacity(centroids.len() * k);
    let mut found: Vec<(usize, f64)> = Vec::new();
    let grid = match radius {
        Some(r) => Some(GridIndex::new(points, r)?),
        None => None,
    };
    let tree = if grid.is_none() { Some(KdTree::new(points)) } else { None };
    for &c in centroids {
        let q = points[c];
        match (&grid, &tree, radius) {
            (Some(g), _, Some(r)) => g.within_radius_into(points, &q, r, k, &mut found),
            (_, Some(t), _) => found = t.knn(&q, k.min(points.len())),
            _ => unreachable!(),
        }
        let start = local.len();
        let mut max = 0.0f64;
        for j in 0..k {
            let i = found.get(j).map_or(c, |f| f.0);
            neighbors.push(i as u32);
            let d = [points[i][0] - q[0], points[i][1] - q[1], points[i][2] - q[2]];
            max = max.max(libm::sqrt(dist2(&d, &[0.0; 3])));
            local.push(d);
        }
        if max > 0.0 {
            for d in &mut local[start..] {
                d.iter_mut().for_each(|v| *v /= max);
            }
        }
    }
    Ok(Grouping { k, neighbors, local })
}

/// Inverse-distance interpolation table from `coarse` onto `fine` points:
/// [`INTERPOLATION_K`] `(index, weight)` pairs per fine point. A fine point
/// coincident with a coarse one copies it; missing neighbours get weight 0.
pub fn interpolation_weights(fine: &[[f64; 3]], coarse: &[[f64; 3]]) -> Result<(Vec<u32>, Vec<f64>)> {
    if coarse.is_empty() {
        return Err(invalid("interpolation_weights: no coarse points"));
    }
    let tree = KdTree::new(coarse);
    let k = INTERPOLATION_K.min(coarse.len());
    let mut index = Vec::with_capacity(fine.len() * INTERPOLATION_K);
    let mut weight = Vec::with_capacity(fine.len() * INTERPOLATION_K);
    for p in fine {
        let nn = tree.knn(p, k);
        if nn[0].1 == 0.0 {
            index.push(nn[0].0 as u32);
            weight.push(1.0);
            for _ in 1..INTERPOLATION_K {
                index.push(nn[0].0 as u32);
                weight.push(0.0);
            }
            continue;
        }
        let inv: Vec<f64> = nn.iter().map(|&(_, d2)| 1.0 / libm::sqrt(d2)).collect();
        let total: f64 = inv.iter().sum();
        for j in 0..INTERPOLATION_K {
            match nn.get(j) {
                Some(&(i, _)) => {
                    index.push(i as u32);
                    weight.push(inv[j] / total);
                }
                None => {
                    index.push(nn[0].0 as u32);
                    weight.push(0.0);
                }
            }
        }
    }
    Ok((index, weight))
}

/// Points of one resolution level across a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Level {
    /// Normalised positions, samples concatenated.
    pub positions: Vec<[f64; 3]>,
    /// Row range of each sample: `offsets[b]..offsets[b + 1]`.
    pub offsets: Vec<usize>,
    /// Row of each point in level 0.
    pub source: Vec<u32>,
    pub sample_of: Vec<u32>,
}

impl Level {
    fn empty() -> Self {
        Level {
            positions: Vec::new(),
            offsets: vec![0],
            source: Vec::new(),
            sample_of: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

/// Index tables for one batch. Level `s + 1` holds the centroids of stage
/// `s`, grouped over level `s`; all indices are batch-global rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Geometry {
    pub levels: Vec<Level>,
    /// Per stage: neighbour rows into level `s`, `k` per centroid.
    pub neighbors: Vec<Vec<u32>>,
    pub local: Vec<Vec<[f64; 3]>>,
    /// Per decoder level `j`: rows of level `j + 1`, three per level-`j` row.
    pub interp_index: Vec<Vec<u32>>,
    pub interp_weight: Vec<Vec<f64>>,
    /// Normalisation divisor of each sample.
    pub scales: Vec<f64>,
}

impl Geometry {
    pub fn build(samples: &[SampleView<'_>], cfg: &NetworkConfig, mode: Mode, seed: u64) -> Result<Self> {
        if samples.is_empty() {
            return Err(invalid("empty batch"));
        }
        let depth = cfg.stages.len();
        let mut g = Geometry {
            levels: (0..=depth).map(|_| Level::empty()).collect(),
            neighbors: vec![Vec::new(); depth],
            local: vec![Vec::new(); depth],
            interp_index: vec![Vec::new(); depth],
            interp_weight: vec![Vec::new(); depth],
            scales: Vec::with_capacity(samples.len()),
        };
        for (b, view) in samples.iter().enumerate() {
            if view.positions.len() != view.reflectance.len() {
                return Err(shape("Geometry::build", format!("sample {b}: reflectance length")));
            }
            let (pos0, scale) = normalize_sample(view.positions)?;
            g.scales.push(scale);
            let mut pos = pos0;
            let mut src: Vec<u32> = (0..pos.len() as u32).collect();
            let mut per_level = vec![pos.clone()];
            let base0 = g.levels[0].len() as u32;
            push_level(&mut g.levels[0], &pos, src.iter().map(|&s| s + base0), b);
            for (s, st) in cfg.stages.iter().enumerate() {
                let cents = select_centroids(&pos, st.centroid_voxel, mode, derive_seed(seed, &[b as i64, s as i64]))?;
                let grouping = group_normalize(&pos, &cents, st.neighbor_k, st.radius)?;
                let base = g.levels[s].offsets[b] as u32;
                g.neighbors[s].extend(grouping.neighbors.iter().map(|&i| i + base));
                g.local[s].extend_from_slice(&grouping.local);
                pos = cents.iter().map(|&c| pos[c]).collect();
                src = cents.iter().map(|&c| src[c]).collect();
                push_level(&mut g.levels[s + 1], &pos, src.iter().map(|&s| s + base0), b);
                per_level.push(pos.clone());
            }
            for j in 0..depth {
                let (idx, w) = interpolation_weights(&per_level[j], &per_level[j + 1])?;
                let base = g.levels[j + 1].offsets[b] as u32;
                g.interp_index[j].extend(idx.iter().map(|&i| i + base));
                g.interp_weight[j].extend_from_slice(&w);
            }
        }
        Ok(g)
    }

    pub fn batch_size(&self) -> usize {
        self.scales.len()
    }
}

fn push_level(level: &mut Level, pos: &[[f64; 3]], source: impl Iterator<Item = u32>, b: usize) {
    level.positions.extend_from_slice(pos);
    level.source.extend(source);
    level.sample_of.extend(core::iter::repeat(b as u32).take(pos.len()));
    level.offsets.push(level.positions.len());
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ForwardOptions {
    /// Replace every gate's logits with these (column 0 is "on").
    pub gate_logits: Option<[f64; 2]>,
}

/// Batch-norm statistics of one layer from a training pass, keyed by the
/// slot of its running mean (the running variance is the next slot).
#[derive(Debug, Clone, PartialEq)]
pub struct BnUpdate {
    pub mean_slot: usize,
    pub stats: BatchStats,
}

/// Tape handles produced by [`Model::forward`].
#[derive(Debug, Clone)]
pub struct Forward {
    /// Wood logits, one row per level-0 point.
    pub logits: Var,
    /// One variable per parameter slot.
    pub params: Vec<Var>,
    /// Per stage, the one-hot gate `[batch, 2]`.
    pub gates: Vec<Var>,
    pub bn_updates: Vec<BnUpdate>,
}

/// Network configuration plus its parameters and batch-norm buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    config: NetworkConfig,
    weights: ParamSet<T>,
}

/// Trained parameters as stored on disk.
pub type ModelWeights = ParamSet<f32>;

struct Init<'a, T> {
    set: &'a mut ParamSet<T>,
    rng: Rng,
}

impl<T: Scalar> Init<'_, T> {
    fn weight(&mut self, name: String, fan_in: usize, fan_out: usize) -> Result<()> {
        let std = libm::sqrt(2.0 / fan_in as f64);
        let data = (0..fan_in * fan_out)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut self.rng);
                T::from_f64(z * std)
            })
            .collect();
        self.set.insert(name, Tensor::matrix(fan_in, fan_out, data)?, true)?;
        Ok(())
    }

    fn fill(&mut self, name: String, len: usize, v: f64, trainable: bool) -> Result<()> {
        self.set
            .insert(name, Tensor::filled(&[len], T::from_f64(v)), trainable)?;
        Ok(())
    }

    fn bn(&mut self, prefix: &str, c: usize) -> Result<()> {
        self.fill(format!("{prefix}.bn.gamma"), c, 1.0, true)?;
        self.fill(format!("{prefix}.bn.beta"), c, 0.0, true)?;
        self.fill(format!("{prefix}.bn.mean"), c, 0.0, false)?;
        self.fill(format!("{prefix}.bn.var"), c, 1.0, false)
    }
}

/// Channels entering stage `s`: local xyz, previous features, reflectance.
fn stage_input_width(cfg: &NetworkConfig, s: usize) -> usize {
    3 + if s == 0 { 0 } else { cfg.stages[s - 1].channels } + 1
}

fn fp_input_width(cfg: &NetworkConfig, j: usize) -> usize {
    let depth = cfg.stages.len();
    let coarse = if j + 1 == depth {
        2 * cfg.stages[depth - 1].channels
    } else {
        cfg.fp_channels[j + 1]
    };
    let skip = if j == 0 { 4 } else { cfg.stages[j - 1].channels };
    coarse + skip
}

impl<T: Scalar> Model<T> {
    /// Randomly initialised network.
    pub fn new(config: NetworkConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut set = ParamSet::new();
        let mut init = Init {
            set: &mut set,
            rng: rng_from_seed(seed),
        };
        let cfg = &config;
        for (s, st) in cfg.stages.iter().enumerate() {
            let c = st.channels;
            let e = c * st.expansion;
            init.weight(format!("gate{s}.l1.w"), 2, cfg.gate_hidden)?;
            init.fill(format!("gate{s}.l1.b"), cfg.gate_hidden, 0.0, true)?;
            init.weight(format!("gate{s}.l2.w"), cfg.gate_hidden, 2)?;
            init.set.insert(
                format!("gate{s}.l2.b"),
                Tensor::vector(vec![T::from_f64(1.0), T::from_f64(-1.0)]),
                true,
            )?;
            init.weight(format!("sa{s}.in.w"), stage_input_width(cfg, s), c)?;
            if s == 0 {
                init.fill(format!("sa{s}.in.b"), c, 0.0, true)?;
            } else {
                init.bn(&format!("sa{s}.in"), c)?;
            }
            init.weight(format!("sa{s}.expand.w"), c, e)?;
            init.bn(&format!("sa{s}.expand"), e)?;
            init.fill(format!("sa{s}.dw.w"), e, 1.0, true)?;
            init.bn(&format!("sa{s}.dw"), e)?;
            init.weight(format!("sa{s}.project.w"), e, c)?;
            init.bn(&format!("sa{s}.project"), c)?;
        }
        for j in (0..cfg.stages.len()).rev() {
            init.weight(format!("fp{j}.w"), fp_input_width(cfg, j), cfg.fp_channels[j])?;
            init.bn(&format!("fp{j}"), cfg.fp_channels[j])?;
        }
        init.weight("head.l1.w".into(), cfg.fp_channels[0], cfg.head_hidden)?;
        init.bn("head.l1", cfg.head_hidden)?;
        init.weight("head.l2.w".into(), cfg.head_hidden, 1)?;
        init.fill("head.l2.b".into(), 1, 0.0, true)?;
        Ok(Model { config, weights: set })
    }

    /// Network with the given weights, which must match the configuration.
    pub fn from_weights(config: NetworkConfig, weights: ParamSet<T>) -> Result<Self> {
        let mut model = Self::new(config, 0)?;
        model.weights.load_from(&weights)?;
        Ok(model)
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn weights(&self) -> &ParamSet<T> {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.weights
    }

    pub fn into_weights(self) -> ParamSet<T> {
        self.weights
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            weights: self.weights.cast(),
        }
    }

    /// Fold training-pass statistics into the running averages.
    pub fn update_running_stats(&mut self, updates: &[BnUpdate]) {
        let m = self.config.bn_momentum;
        for u in updates {
            for (slot, fresh) in [(u.mean_slot, &u.stats.mean), (u.mean_slot + 1, &u.stats.var)] {
                for (r, &f) in self.weights.value_mut(slot).data_mut().iter_mut().zip(fresh) {
                    *r = T::from_f64((1.0 - m) * r.as_f64() + m * f);
                }
            }
        }
    }

    /// Start a graph over this model's parameters.
    pub fn graph<'m>(&'m self, tape: &mut Tape<T>, mode: Mode, trainable: bool) -> Graph<'m, T> {
        let params = self
            .weights
            .entries()
            .iter()
            .map(|e| {
                if trainable && e.trainable {
                    tape.param(e.value.clone())
                } else {
                    tape.constant(e.value.clone())
                }
            })
            .collect();
        Graph {
            model: self,
            params,
            mode,
            bn_updates: Vec::new(),
        }
    }

    /// Record a full forward pass on `tape`. `seed` drives the gate noise in
    /// training mode.
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        samples: &[SampleView<'_>],
        geom: &Geometry,
        mode: Mode,
        seed: u64,
        opts: &ForwardOptions,
    ) -> Result<Forward> {
        let cfg = &self.config;
        let depth = cfg.stages.len();
        if geom.levels.len() != depth + 1 || geom.batch_size() != samples.len() {
            return Err(shape("forward", "geometry does not match the batch or network depth"));
        }
        let mut graph = self.graph(tape, mode, mode == Mode::Train);
        let mut rng = rng_from_seed(seed);
        let n0 = geom.levels[0].len();
        let reflectance: Vec<T> = samples
            .iter()
            .flat_map(|v| v.reflectance.iter().map(|&r| T::from_f64(r as f64)))
            .collect();
        if reflectance.len() != n0 {
            return Err(shape("forward", "reflectance rows differ from level-0 points"));
        }
        let gate_input = gate_summary::<T>(samples);
        let mut gates = Vec::with_capacity(depth);
        let mut gated0 = None;
        let mut features: Option<Var> = None;
        let mut encoded = Vec::with_capacity(depth);
        for s in 0..depth {
            let level = &geom.levels[s];
            let noise: Option<Vec<T>> = (mode == Mode::Train).then(|| {
                (0..samples.len() * 2)
                    .map(|_| T::from_f64(gumbel_noise(&mut rng)))
                    .collect()
            });
            let (gate_vals, on) = graph.gate(tape, s, &gate_input, noise.as_deref(), opts)?;
            gates.push(gate_vals);
            let refl = tape.constant(Tensor::matrix(
                level.len(),
                1,
                level.source.iter().map(|&i| reflectance[i as usize]).collect(),
            )?);
            let gated = graph.gated_reflectance(tape, refl, on, &level.sample_of)?;
            if s == 0 {
                gated0 = Some(gated);
            }
            let out = graph.sa_stage(tape, s, &geom.local[s], features, gated, &geom.neighbors[s])?;
            encoded.push(out);
            features = Some(out);
        }
        let deepest = *encoded.last().unwrap();
        let pooled = tape.segment_max(deepest, &geom.levels[depth].offsets)?;
        let global = tape.gather_rows(pooled, geom.levels[depth].sample_of.clone())?;
        let mut coarse = tape.concat_cols(&[deepest, global])?;
        for j in (0..depth).rev() {
            let skip = if j == 0 {
                let xyz = positions_constant(tape, &geom.levels[0].positions)?;
                tape.concat_cols(&[xyz, gated0.unwrap()])?
            } else {
                encoded[j - 1]
            };
            coarse = graph.fp_stage(tape, j, coarse, skip, &geom.interp_index[j], &geom.interp_weight[j])?;
        }
        let logits = graph.head(tape, coarse)?;
        Ok(Forward {
            logits,
            params: graph.params,
            gates,
            bn_updates: graph.bn_updates,
        })
    }

    /// Evaluation-mode wood probabilities, one vector per sample.
    pub fn predict(&self, samples: &[SampleView<'_>], opts: &ForwardOptions) -> Result<Vec<Vec<f32>>> {
        let geom = Geometry::build(samples, &self.config, Mode::Eval, 0)?;
        let mut tape = Tape::new();
        let fwd = self.forward(&mut tape, samples, &geom, Mode::Eval, 0, opts)?;
        let probs = tape.sigmoid(fwd.logits);
        let values = tape.value(probs).data();
        let offsets = &geom.levels[0].offsets;
        Ok((0..samples.len())
            .map(|b| {
                values[offsets[b]..offsets[b + 1]]
                    .iter()
                    .map(|v| v.as_f64() as f32)
                    .collect()
            })
            .collect())
    }
}

/// Wood probability of every point of one sample.
pub fn forward<T: Scalar>(sample: &Sample, model: &Model<T>, mode: Mode, seed: u64) -> Result<Vec<f32>> {
    let view = SampleView::from(sample);
    match mode {
        Mode::Eval => Ok(model.predict(&[view], &ForwardOptions::default())?.remove(0)),
        Mode::Train => {
            let geom = Geometry::build(&[view], model.config(), mode, seed)?;
            let mut tape = Tape::new();
            let fwd = model.forward(&mut tape, &[view], &geom, mode, seed, &ForwardOptions::default())?;
            let probs = tape.sigmoid(fwd.logits);
            Ok(tape.value(probs).data().iter().map(|v| v.as_f64() as f32).collect())
        }
    }
}

/// `[batch, 2]` rows of (mean, population standard deviation) of each
/// sample's reflectance.
fn gate_summary<T: Scalar>(samples: &[SampleView<'_>]) -> Tensor<T> {
    let mut data = Vec::with_capacity(samples.len() * 2);
    for v in samples {
        let n = v.reflectance.len().max(1) as f64;
        let mean = v.reflectance.iter().map(|&r| r as f64).sum::<f64>() / n;
        let var = v
            .reflectance
            .iter()
            .map(|&r| (r as f64 - mean) * (r as f64 - mean))
            .sum::<f64>()
            / n;
        data.push(T::from_f64(mean));
        data.push(T::from_f64(libm::sqrt(var)));
    }
    Tensor::matrix(samples.len(), 2, data).unwrap()
}

fn positions_constant<T: Scalar>(tape: &mut Tape<T>, pos: &[[f64; 3]]) -> Result<Var> {
    let data = pos.iter().flat_map(|p| p.iter().map(|&v| T::from_f64(v))).collect();
    Ok(tape.constant(Tensor::matrix(pos.len(), 3, data)?))
}

/// A forward pass in progress: parameter variables plus the statistics
/// collected by training-mode batch norms.
pub struct Graph<'m, T> {
    model: &'m Model<T>,
    pub params: Vec<Var>,
    mode: Mode,
    pub bn_updates: Vec<BnUpdate>,
}

impl<T: Scalar> Graph<'_, T> {
    fn p(&self, name: &str) -> Result<Var> {
        self.model
            .weights
            .index_of(name)
            .map(|i| self.params[i])
            .ok_or_else(|| Error::WeightsMismatch(format!("missing parameter `{name}`")))
    }

    fn linear(&self, tape: &mut Tape<T>, x: Var, prefix: &str, bias: bool) -> Result<Var> {
        let y = tape.matmul(x, self.p(&format!("{prefix}.w"))?)?;
        if bias {
            tape.add_row(y, self.p(&format!("{prefix}.b"))?)
        } else {
            Ok(y)
        }
    }

    fn bn(&mut self, tape: &mut Tape<T>, x: Var, prefix: &str) -> Result<Var> {
        let gamma = self.p(&format!("{prefix}.bn.gamma"))?;
        let beta = self.p(&format!("{prefix}.bn.beta"))?;
        let mean_name = format!("{prefix}.bn.mean");
        let mean_slot = self
            .model
            .weights
            .index_of(&mean_name)
            .ok_or_else(|| Error::WeightsMismatch(format!("missing parameter `{mean_name}`")))?;
        let eps = self.model.config.bn_eps;
        let weights = &self.model.weights;
        let mode = match self.mode {
            Mode::Train => BnMode::Train { eps },
            Mode::Eval => BnMode::Eval {
                running_mean: weights.value(mean_slot).data(),
                running_var: weights.value(mean_slot + 1).data(),
                eps,
            },
        };
        let (y, stats) = tape.batch_norm(x, gamma, beta, mode)?;
        if let Some(stats) = stats {
            self.bn_updates.push(BnUpdate { mean_slot, stats });
        }
        Ok(y)
    }

    /// Gate of stage `s`: returns the one-hot `[batch, 2]` decision and its
    /// "on" column `[batch, 1]`.
    pub fn gate(
        &mut self,
        tape: &mut Tape<T>,
        s: usize,
        summary: &Tensor<T>,
        noise: Option<&[T]>,
        opts: &ForwardOptions,
    ) -> Result<(Var, Var)> {
        let batch = summary.rows();
        let logits = match opts.gate_logits {
            Some([on, off]) => tape.constant(Tensor::matrix(
                batch,
                2,
                (0..batch).flat_map(|_| [T::from_f64(on), T::from_f64(off)]).collect(),
            )?),
            None => {
                let x = tape.constant(summary.clone());
                let h = self.linear(tape, x, &format!("gate{s}.l1"), true)?;
                let h = tape.relu(h);
                self.linear(tape, h, &format!("gate{s}.l2"), true)?
            }
        };
        let mode = match self.mode {
            Mode::Train => GumbelMode::Train,
            Mode::Eval => GumbelMode::Eval,
        };
        let g = tape.gumbel_softmax(logits, noise, self.model.config.gumbel_temperature, mode)?;
        let on = tape.column(g, 0)?;
        Ok((g, on))
    }

    /// Reflectance `[n, 1]` multiplied by the gate of each row's sample.
    pub fn gated_reflectance(&mut self, tape: &mut Tape<T>, refl: Var, on: Var, sample_of: &[u32]) -> Result<Var> {
        let per_row = tape.gather_rows(on, sample_of.to_vec())?;
        tape.mul(refl, per_row)
    }

    /// Set abstraction: shared inverted residual MLP over every neighbour
    /// row, then a max over each centroid's `k` rows.
    pub fn sa_stage(
        &mut self,
        tape: &mut Tape<T>,
        s: usize,
        local: &[[f64; 3]],
        features: Option<Var>,
        gated_reflectance: Var,
        neighbors: &[u32],
    ) -> Result<Var> {
        let k = self.model.config.stages[s].neighbor_k;
        if local.len() != neighbors.len() || neighbors.len() % k != 0 {
            return Err(shape("sa_stage", "neighbour table and local coordinates disagree"));
        }
        let mut parts = vec![positions_constant(tape, local)?];
        if let Some(f) = features {
            parts.push(tape.gather_rows(f, neighbors.to_vec())?);
        }
        parts.push(tape.gather_rows(gated_reflectance, neighbors.to_vec())?);
        let x = tape.concat_cols(&parts)?;
        let pre = format!("sa{s}");
        let h = if s == 0 {
            self.linear(tape, x, &format!("{pre}.in"), true)?
        } else {
            let h = self.linear(tape, x, &format!("{pre}.in"), false)?;
            self.bn(tape, h, &format!("{pre}.in"))?
        };
        let h = tape.relu(h);
        let e = self.linear(tape, h, &format!("{pre}.expand"), false)?;
        let e = self.bn(tape, e, &format!("{pre}.expand"))?;
        let e = tape.relu(e);
        let d = tape.mul_row(e, self.p(&format!("{pre}.dw.w"))?)?;
        let d = self.bn(tape, d, &format!("{pre}.dw"))?;
        let d = tape.relu(d);
        let p = self.linear(tape, d, &format!("{pre}.project"), false)?;
        let p = self.bn(tape, p, &format!("{pre}.project"))?;
        let r = tape.add(h, p)?;
        let r = tape.relu(r);
        tape.max_pool_groups(r, k)
    }

    /// Feature propagation onto a finer level: interpolate `coarse`, append
    /// the skip features and mix.
    pub fn fp_stage(
        &mut self,
        tape: &mut Tape<T>,
        j: usize,
        coarse: Var,
        skip: Var,
        index: &[u32],
        weight: &[f64],
    ) -> Result<Var> {
        let w = weight.iter().map(|&v| T::from_f64(v)).collect();
        let up = tape.weighted_gather(coarse, index.to_vec(), w, INTERPOLATION_K)?;
        let x = tape.concat_cols(&[up, skip])?;
        let pre = format!("fp{j}");
        let h = self.linear(tape, x, &pre, false)?;
        let h = self.bn(tape, h, &pre)?;
        Ok(tape.relu(h))
    }

    fn head(&mut self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let h = self.linear(tape, x, "head.l1", false)?;
        let h = self.bn(tape, h, "head.l1")?;
        let h = tape.relu(h);
        self.linear(tape, h, "head.l2", true)
    }
}

//! Procedural labelled forests: branching cylinder skeletons carrying wood
//! points, Gaussian leaf clusters on the terminal branches, a rough ground
//! plane and sparse understory.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::cloud::{dist2, ClassLabel, PointCloud};
use crate::error::{invalid, Error, Result};
use crate::rng::{derive_seed, rng_from_seed, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReflectanceModel {
    pub wood_mean: f64,
    pub wood_sd: f64,
    pub leaf_mean: f64,
    pub leaf_sd: f64,
    pub ground_mean: f64,
    pub ground_sd: f64,
}

impl Default for ReflectanceModel {
    fn default() -> Self {
        ReflectanceModel {
            wood_mean: 0.4,
            wood_sd: 0.15,
            leaf_mean: -0.4,
            leaf_sd: 0.15,
            ground_mean: 0.0,
            ground_sd: 0.15,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TreeSpec {
    pub height: f64,
    pub trunk_radius: f64,
    /// Branch levels including the trunk.
    pub branch_depth: u32,
    /// Angle between a child and its parent axis, degrees.
    pub branching_angle: [f64; 2],
    /// Child radius and length relative to the parent.
    pub taper: f64,
    /// Leaf points per metre of terminal branch.
    pub leaf_density: f64,
    pub point_spacing: f64,
}

impl Default for TreeSpec {
    fn default() -> Self {
        TreeSpec {
            height: 10.0,
            trunk_radius: 0.15,
            branch_depth: 4,
            branching_angle: [25.0, 50.0],
            taper: 0.6,
            leaf_density: 2000.0,
            point_spacing: 0.06,
        }
    }
}

impl TreeSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.height > 0.0) || !(self.trunk_radius > 0.0) || !(self.point_spacing > 0.0) {
            return Err(invalid("tree height, trunk radius and point spacing must be positive"));
        }
        if !(self.taper > 0.0 && self.taper < 1.0) {
            return Err(invalid(format!("taper {} must lie in (0, 1)", self.taper)));
        }
        if self.branch_depth == 0 {
            return Err(invalid("branch depth must be at least 1"));
        }
        let [lo, hi] = self.branching_angle;
        if !(0.0..=180.0).contains(&lo) || !(lo..=180.0).contains(&hi) {
            return Err(invalid("branching angle range must be ordered within [0, 180]"));
        }
        if !(self.leaf_density >= 0.0) {
            return Err(invalid("leaf density must be non-negative"));
        }
        Ok(())
    }

    /// Length of the trunk segment; each level below shrinks by `taper`.
    pub fn trunk_length(&self) -> f64 {
        if self.branch_depth == 1 {
            self.height
        } else {
            self.height * 0.5
        }
    }
}

/// Straight skeleton segment of one branch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Segment {
    pub start: [f64; 3],
    pub end: [f64; 3],
    pub radius: f64,
    /// 0 for the trunk, 1 for its children, ...
    pub order: u32,
    /// Skeleton distance from the tree base to `start`.
    pub base_distance: f64,
    pub parent: Option<u32>,
}

impl Segment {
    pub fn length(&self) -> f64 {
        libm::sqrt(dist2(&self.start, &self.end))
    }

    /// Distance from `p` to the segment, and the clamped axial parameter.
    pub fn distance(&self, p: &[f64; 3]) -> (f64, f64) {
        let d = sub(self.end, self.start);
        let len2 = dot(d, d);
        let t = if len2 > 0.0 {
            (dot(sub(*p, self.start), d) / len2).clamp(0.0, 1.0)
        } else {
            0.0
        };
        let q = add(self.start, scale(d, t));
        (libm::sqrt(dist2(p, &q)), t)
    }
}

/// One generated tree.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthTree {
    /// Labelled points with reflectance and deviation.
    pub cloud: PointCloud,
    pub skeleton: Vec<Segment>,
    /// Segment each point was generated from (leaves: their host branch).
    pub segment: Vec<u32>,
    /// Skeleton distance from the base for wood points, `None` for leaves.
    pub skeleton_path: Vec<Option<f64>>,
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn add(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

fn scale(a: [f64; 3], s: f64) -> [f64; 3] {
    [a[0] * s, a[1] * s, a[2] * s]
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn unit(a: [f64; 3]) -> [f64; 3] {
    scale(a, 1.0 / libm::sqrt(dot(a, a)))
}

/// Two unit vectors completing `axis` to an orthonormal frame.
fn frame(axis: [f64; 3]) -> ([f64; 3], [f64; 3]) {
    let helper = if libm::fabs(axis[2]) < 0.9 { [0.0, 0.0, 1.0] } else { [1.0, 0.0, 0.0] };
    let u = unit(cross(axis, helper));
    (u, cross(axis, u))
}

fn build_skeleton(spec: &TreeSpec, base: [f64; 3], rng: &mut Rng) -> Vec<Segment> {
    let mut segs = vec![Segment {
        start: base,
        end: add(base, [0.0, 0.0, spec.trunk_length()]),
        radius: spec.trunk_radius,
        order: 0,
        base_distance: 0.0,
        parent: None,
    }];
    let mut frontier = vec![0usize];
    for order in 1..spec.branch_depth {
        let mut next = Vec::new();
        for &p in &frontier {
            let parent = segs[p];
            let axis = unit(sub(parent.end, parent.start));
            let (u, v) = frame(axis);
            let children = rng.random_range(2..=3);
            let phase = rng.random_range(0.0..core::f64::consts::TAU);
            for c in 0..children {
                let [lo, hi] = spec.branching_angle;
                let theta = rng.random_range(lo..=hi).to_radians();
                let phi = phase + core::f64::consts::TAU * c as f64 / children as f64
                    + rng.random_range(-0.3..0.3);
                let radial = add(scale(u, libm::cos(phi)), scale(v, libm::sin(phi)));
                let dir = unit(add(scale(axis, libm::cos(theta)), scale(radial, libm::sin(theta))));
                let length = parent.length() * spec.taper * rng.random_range(0.85..1.15);
                segs.push(Segment {
                    start: parent.end,
                    end: add(parent.end, scale(dir, length)),
                    radius: parent.radius * spec.taper,
                    order,
                    base_distance: parent.base_distance + parent.length(),
                    parent: Some(p as u32),
                });
                next.push(segs.len() - 1);
            }
        }
        frontier = next;
    }
    segs
}

/// Points of one tree rooted at `base`. Leaves hang on the deepest level.
fn tree_at(spec: &TreeSpec, refl: &ReflectanceModel, base: [f64; 3], seed: u64) -> Result<SynthTree> {
    spec.validate()?;
    let mut rng = rng_from_seed(seed);
    let skeleton = build_skeleton(spec, base, &mut rng);
    let wood_refl = Normal::new(refl.wood_mean, refl.wood_sd).map_err(|e| invalid(format!("{e}")))?;
    let leaf_refl = Normal::new(refl.leaf_mean, refl.leaf_sd).map_err(|e| invalid(format!("{e}")))?;
    let unit_normal = Normal::new(0.0, 1.0).unwrap();
    let mut positions = Vec::new();
    let mut labels = Vec::new();
    let mut reflectance = Vec::new();
    let mut segment = Vec::new();
    let mut skeleton_path = Vec::new();
    let h = spec.point_spacing;
    let terminal = spec.branch_depth - 1;
    for (si, seg) in skeleton.iter().enumerate() {
        let len = seg.length();
        let axis = unit(sub(seg.end, seg.start));
        let (u, v) = frame(axis);
        // Jittered rings: `rings` along the axis, `around` points per ring.
        let rings = libm::ceil(len / h).max(1.0) as usize;
        let around = libm::ceil(core::f64::consts::TAU * seg.radius / h).max(3.0) as usize;
        let twist = rng.random_range(0.0..core::f64::consts::TAU);
        for ring in 0..rings {
            for j in 0..around {
                let t = ((ring as f64 + 0.5 + rng.random_range(-0.25..0.25)) / rings as f64).clamp(0.0, 1.0);
                let phi = twist
                    + core::f64::consts::TAU * (j as f64 + 0.5 * (ring % 2) as f64 + rng.random_range(-0.25..0.25))
                        / around as f64;
                let r = seg.radius + rng.random_range(-0.25 * h..0.25 * h);
                let radial = add(scale(u, libm::cos(phi) * r), scale(v, libm::sin(phi) * r));
                positions.push(add(add(seg.start, scale(axis, t * len)), radial));
                labels.push(ClassLabel::Wood);
                reflectance.push(wood_refl.sample(&mut rng) as f32);
                segment.push(si as u32);
                skeleton_path.push(Some(seg.base_distance + t * len));
            }
        }
        if seg.order == terminal && spec.branch_depth > 1 {
            let mut remaining = libm::round(spec.leaf_density * len) as usize;
            while remaining > 0 {
                let size = rng.random_range(3..=10).min(remaining);
                remaining -= size;
                let extent = rng.random_range(0.03..0.08);
                let t = rng.random_range(0.1..1.0);
                let phi = rng.random_range(0.0..core::f64::consts::TAU);
                let offset = seg.radius + rng.random_range(0.03..0.25);
                let radial = add(scale(u, libm::cos(phi) * offset), scale(v, libm::sin(phi) * offset));
                let centre = add(add(seg.start, scale(axis, t * len)), radial);
                for _ in 0..size {
                    let jitter: [f64; 3] =
                        core::array::from_fn(|_| unit_normal.sample(&mut rng) * extent / 4.0);
                    positions.push(add(centre, jitter));
                    labels.push(ClassLabel::Leaf);
                    reflectance.push(leaf_refl.sample(&mut rng) as f32);
                    segment.push(si as u32);
                    skeleton_path.push(None);
                }
            }
        }
    }
    if positions.is_empty() {
        return Err(Error::Degenerate("tree parameters produced no points".into()));
    }
    let deviation = deviations(&mut rng, positions.len());
    let mut cloud = PointCloud::from_positions(positions);
    cloud.labels = Some(labels);
    cloud.reflectance = Some(reflectance);
    cloud.deviation = Some(deviation);
    Ok(SynthTree {
        cloud,
        skeleton,
        segment,
        skeleton_path,
    })
}

/// Scanner deviation: `|N(0, 5)|`, so a small tail exceeds the default
/// filter bound.
fn deviations(rng: &mut Rng, n: usize) -> Vec<f32> {
    let d = Normal::new(0.0, 5.0).unwrap();
    (0..n).map(|_| libm::fabs(d.sample(rng)) as f32).collect()
}

/// A single tree standing at the origin.
pub fn generate_tree(spec: &TreeSpec, reflectance: &ReflectanceModel, seed: u64) -> Result<SynthTree> {
    tree_at(spec, reflectance, [0.0; 3], seed)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlotSpec {
    /// Plot size along x and y (m).
    pub extent: [f64; 2],
    pub trees: usize,
    pub tree: TreeSpec,
    pub height_range: [f64; 2],
    pub trunk_radius_range: [f64; 2],
    /// Ground points lie within this distance of the sloped plane (m).
    pub ground_roughness: f64,
    pub ground_slope: f64,
    pub ground_spacing: f64,
    /// Understory points as a fraction of all tree points.
    pub understory_fraction: f64,
    pub reflectance: ReflectanceModel,
}

impl Default for PlotSpec {
    fn default() -> Self {
        PlotSpec {
            extent: [20.0, 20.0],
            trees: 4,
            tree: TreeSpec::default(),
            height_range: [9.0, 12.0],
            trunk_radius_range: [0.12, 0.2],
            ground_roughness: 0.05,
            ground_slope: 0.05,
            ground_spacing: 0.1,
            understory_fraction: 0.02,
            reflectance: ReflectanceModel::default(),
        }
    }
}

impl PlotSpec {
    pub fn validate(&self) -> Result<()> {
        self.tree.validate()?;
        if !(self.extent[0] > 0.0 && self.extent[1] > 0.0) || !(self.ground_spacing > 0.0) {
            return Err(invalid("plot extent and ground spacing must be positive"));
        }
        if !(0.0..=1.0).contains(&self.understory_fraction) {
            return Err(invalid("understory fraction must lie in [0, 1]"));
        }
        if !(self.ground_roughness >= 0.0) {
            return Err(invalid("ground roughness must be non-negative"));
        }
        for [lo, hi] in [self.height_range, self.trunk_radius_range] {
            if !(lo > 0.0 && lo <= hi) {
                return Err(invalid("tree ranges must be positive and ordered"));
            }
        }
        Ok(())
    }

    /// Height of the ground plane.
    pub fn ground_height(&self, x: f64, _y: f64) -> f64 {
        self.ground_slope * x
    }
}

/// A generated plot: merged cloud plus the trees it was built from.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthPlot {
    /// Labelled cloud with `tree_id` (1-based, 0 off-tree) and `ground`.
    pub cloud: PointCloud,
    pub trees: Vec<SynthTree>,
    pub bases: Vec<[f64; 3]>,
}

const PLACEMENT_TRIES: usize = 10_000;

pub fn generate_plot(spec: &PlotSpec, seed: u64) -> Result<SynthPlot> {
    spec.validate()?;
    let mut rng = rng_from_seed(derive_seed(seed, &[-1]));
    let mut bases: Vec<[f64; 3]> = Vec::with_capacity(spec.trees);
    let mut specs = Vec::with_capacity(spec.trees);
    let margin = 0.15 * spec.extent[0].min(spec.extent[1]);
    for t in 0..spec.trees {
        let mut tree = spec.tree;
        tree.height = rng.random_range(spec.height_range[0]..=spec.height_range[1]);
        tree.trunk_radius = rng.random_range(spec.trunk_radius_range[0]..=spec.trunk_radius_range[1]);
        let min_gap = 0.25 * tree.height;
        let mut placed = None;
        for _ in 0..PLACEMENT_TRIES {
            let x = rng.random_range(margin..=spec.extent[0] - margin);
            let y = rng.random_range(margin..=spec.extent[1] - margin);
            let ok = bases.iter().zip(&specs).all(|(b, s): (&[f64; 3], &TreeSpec)| {
                let d = libm::hypot(b[0] - x, b[1] - y);
                d >= s.trunk_radius + tree.trunk_radius && d >= min_gap
            });
            if ok {
                placed = Some([x, y, spec.ground_height(x, y)]);
                break;
            }
        }
        let base = placed.ok_or_else(|| {
            Error::Degenerate(format!("could not place tree {} of {} without overlap", t + 1, spec.trees))
        })?;
        bases.push(base);
        specs.push(tree);
    }

    let mut trees = Vec::with_capacity(spec.trees);
    let mut cloud = PointCloud::default();
    let mut tree_id = Vec::new();
    let mut ground = Vec::new();
    for (t, (tree, base)) in specs.iter().zip(&bases).enumerate() {
        let generated = tree_at(tree, &spec.reflectance, *base, derive_seed(seed, &[t as i64]))?;
        cloud.extend(&generated.cloud)?;
        tree_id.extend(core::iter::repeat((t + 1) as u32).take(generated.cloud.len()));
        ground.extend(core::iter::repeat(false).take(generated.cloud.len()));
        trees.push(generated);
    }
    let tree_points = cloud.len();

    let ground_refl = Normal::new(spec.reflectance.ground_mean, spec.reflectance.ground_sd)
        .map_err(|e| invalid(format!("{e}")))?;
    let leaf_refl = Normal::new(spec.reflectance.leaf_mean, spec.reflectance.leaf_sd)
        .map_err(|e| invalid(format!("{e}")))?;
    let nx = libm::ceil(spec.extent[0] / spec.ground_spacing) as usize;
    let ny = libm::ceil(spec.extent[1] / spec.ground_spacing) as usize;
    let mut extra = PointCloud::default();
    let mut extra_refl = Vec::new();
    let mut extra_ground = Vec::new();
    for i in 0..nx {
        for j in 0..ny {
            let x = (i as f64 + rng.random_range(0.0..1.0)) * spec.ground_spacing;
            let y = (j as f64 + rng.random_range(0.0..1.0)) * spec.ground_spacing;
            let z = spec.ground_height(x, y) + spec.ground_roughness * rng.random_range(-1.0..=1.0);
            extra.positions.push([x, y, z]);
            extra_refl.push(ground_refl.sample(&mut rng) as f32);
            extra_ground.push(true);
        }
    }
    let understory = libm::round(spec.understory_fraction * tree_points as f64) as usize;
    for _ in 0..understory {
        let x = rng.random_range(0.0..spec.extent[0]);
        let y = rng.random_range(0.0..spec.extent[1]);
        let z = spec.ground_height(x, y) + rng.random_range(0.3..1.5);
        extra.positions.push([x, y, z]);
        extra_refl.push(leaf_refl.sample(&mut rng) as f32);
        extra_ground.push(false);
    }
    let n_extra = extra.positions.len();
    extra.labels = Some(vec![ClassLabel::Leaf; n_extra]);
    extra.reflectance = Some(extra_refl);
    extra.deviation = Some(deviations(&mut rng, n_extra));
    cloud.extend(&extra)?;
    tree_id.extend(core::iter::repeat(0).take(n_extra));
    ground.extend(extra_ground);
    cloud.tree_id = Some(tree_id);
    cloud.ground = Some(ground);
    Ok(SynthPlot { cloud, trees, bases })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spatial::shortest_path_lengths;

    #[test]
    fn single_level_tree_is_a_cylinder() {
        let spec = TreeSpec {
            branch_depth: 1,
            leaf_density: 0.0,
            ..Default::default()
        };
        let t = generate_tree(&spec, &ReflectanceModel::default(), 1).unwrap();
        let labels = t.cloud.labels.as_ref().unwrap();
        assert!(labels.iter().all(|l| l.is_wood()));
        for p in &t.cloud.positions {
            let r = libm::hypot(p[0], p[1]);
            assert!((r - spec.trunk_radius).abs() <= spec.point_spacing);
            assert!(p[2] >= 0.0 && p[2] <= spec.height);
        }
    }

    #[test]
    fn default_tree_is_leaf_dominated_and_reproducible() {
        let a = generate_tree(&TreeSpec::default(), &ReflectanceModel::default(), 5).unwrap();
        let b = generate_tree(&TreeSpec::default(), &ReflectanceModel::default(), 5).unwrap();
        assert_eq!(a, b);
        let labels = a.cloud.labels.as_ref().unwrap();
        let wood = labels.iter().filter(|l| l.is_wood()).count();
        assert!(labels.len() - wood >= 5 * wood, "{wood} wood of {}", labels.len());
    }

    #[test]
    fn wood_points_hug_their_segment() {
        let spec = TreeSpec::default();
        let t = generate_tree(&spec, &ReflectanceModel::default(), 6).unwrap();
        let labels = t.cloud.labels.as_ref().unwrap();
        for (i, p) in t.cloud.positions.iter().enumerate() {
            if labels[i].is_wood() {
                let seg = &t.skeleton[t.segment[i] as usize];
                let (d, _) = seg.distance(p);
                assert!(d <= seg.radius + spec.point_spacing);
            }
        }
    }

    #[test]
    fn plot_places_trees_apart_with_flagged_ground() {
        let spec = PlotSpec {
            trees: 5,
            ..Default::default()
        };
        let plot = generate_plot(&spec, 7).unwrap();
        let c = &plot.cloud;
        c.validate().unwrap();
        let ids = c.tree_id.as_ref().unwrap();
        let mut distinct: Vec<u32> = ids.iter().copied().filter(|&i| i > 0).collect();
        distinct.sort_unstable();
        distinct.dedup();
        assert_eq!(distinct, vec![1, 2, 3, 4, 5]);
        for (a, ta) in plot.bases.iter().zip(&plot.trees) {
            for (b, tb) in plot.bases.iter().zip(&plot.trees) {
                if a != b {
                    let ra = ta.skeleton[0].radius;
                    let rb = tb.skeleton[0].radius;
                    assert!(libm::hypot(a[0] - b[0], a[1] - b[1]) >= ra + rb);
                }
            }
        }
        let ground = c.ground.as_ref().unwrap();
        assert!(ground.iter().any(|&g| g));
        for (p, &g) in c.positions.iter().zip(ground) {
            if g {
                assert!((p[2] - spec.ground_height(p[0], p[1])).abs() <= spec.ground_roughness + 1e-12);
            }
        }
        let refl = c.reflectance.as_ref().unwrap();
        let labels = c.labels.as_ref().unwrap();
        let mean = |want: ClassLabel| {
            let v: Vec<f64> = (0..c.len())
                .filter(|&i| labels[i] == want && !ground[i])
                .map(|i| refl[i] as f64)
                .collect();
            v.iter().sum::<f64>() / v.len() as f64
        };
        assert!(mean(ClassLabel::Wood) - mean(ClassLabel::Leaf) >= 0.5);
    }

    #[test]
    fn crowded_plot_is_rejected() {
        let spec = PlotSpec {
            extent: [3.0, 3.0],
            trees: 50,
            ..Default::default()
        };
        assert!(matches!(generate_plot(&spec, 0), Err(Error::Degenerate(_))));
    }

    #[test]
    fn skeleton_and_cloud_path_lengths_agree_on_major_axes() {
        for seed in 0..20 {
            let t = generate_tree(&TreeSpec::default(), &ReflectanceModel::default(), seed).unwrap();
            let paths = shortest_path_lengths(&t.cloud.positions, 8).unwrap();
            let mut worst: f64 = 0.0;
            for i in 0..t.cloud.len() {
                let Some(skel) = t.skeleton_path[i] else { continue };
                // Below 2 m the surface detour around the trunk from the
                // base-ring source, up to π·r, dominates the comparison.
                if t.skeleton[t.segment[i] as usize].order <= 1 && skel >= 2.0 {
                    assert!(paths.reachable[i]);
                    worst = worst.max((paths.lengths[i] - skel).abs() / skel);
                }
            }
            assert!(worst <= 0.10, "seed {seed}: worst relative deviation {worst}");
        }
    }
}

//! Whole-cloud prediction: two-scale samples through the network, then a
//! k-nearest-neighbour vote over every prediction.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::cloud::{ClassLabel, PointCloud};
use crate::error::{invalid, Error, Result};
use crate::model::{ForwardOptions, Model, SampleView};
use crate::ndiff::Scalar;
use crate::preprocess::{classify_ground, filter_indices, make_samples, PreprocessConfig, Sample};
use crate::spatial::KdTree;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConsolidationConfig {
    pub k: usize,
    pub wood_threshold: f64,
}

impl Default for ConsolidationConfig {
    fn default() -> Self {
        ConsolidationConfig {
            k: 32,
            wood_threshold: 0.5,
        }
    }
}

impl ConsolidationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(invalid("consolidation k must be at least 1"));
        }
        if !(self.wood_threshold > 0.0 && self.wood_threshold < 1.0) {
            return Err(invalid(format!("wood threshold {} must lie in (0, 1)", self.wood_threshold)));
        }
        Ok(())
    }
}

/// One network output for one source point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub index: u32,
    pub probability: f32,
}

/// Evaluation-mode predictions for every point of every sample, batched
/// `batch_size` samples at a time. A source point appears once per sample
/// that contains it.
pub fn predict_samples<T: Scalar>(samples: &[Sample], model: &Model<T>, batch_size: usize) -> Result<Vec<Prediction>> {
    let mut out = Vec::with_capacity(samples.iter().map(Sample::len).sum());
    for chunk in samples.chunks(batch_size.max(1)) {
        let views: Vec<SampleView<'_>> = chunk.iter().map(SampleView::from).collect();
        for (s, probs) in chunk.iter().zip(model.predict(&views, &ForwardOptions::default())?) {
            out.extend(s.source_indices.iter().zip(probs).map(|(&index, probability)| Prediction {
                index,
                probability,
            }));
        }
    }
    Ok(out)
}

/// Predictions placed at their source points, ready for neighbour queries.
#[derive(Debug, Clone)]
pub struct PredictionSet {
    pub positions: Vec<[f64; 3]>,
    pub probabilities: Vec<f32>,
}

impl PredictionSet {
    pub fn new(cloud: &PointCloud, predictions: &[Prediction]) -> Result<Self> {
        if let Some(p) = predictions.iter().find(|p| p.index as usize >= cloud.len()) {
            return Err(invalid(format!(
                "prediction for point {} but the cloud has {} points",
                p.index,
                cloud.len()
            )));
        }
        if let Some(p) = predictions.iter().find(|p| !(0.0..=1.0).contains(&p.probability)) {
            return Err(invalid(format!("probability {} for point {} outside [0, 1]", p.probability, p.index)));
        }
        Ok(PredictionSet {
            positions: predictions.iter().map(|p| cloud.positions[p.index as usize]).collect(),
            probabilities: predictions.iter().map(|p| p.probability).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn tree(&self) -> KdTree<'_> {
        KdTree::new(&self.positions)
    }
}

/// Label and mean probability of the `k` predictions nearest `query`.
/// Each neighbour votes wood when its probability reaches the threshold;
/// a tied vote goes to wood when the mean does.
pub fn vote(set: &PredictionSet, tree: &KdTree<'_>, query: &[f64; 3], cfg: &ConsolidationConfig) -> (ClassLabel, f64) {
    let near = tree.knn(query, cfg.k);
    let mut wood = 0usize;
    let mut sum = 0.0f64;
    for &(i, _) in &near {
        let p = set.probabilities[i] as f64;
        sum += p;
        wood += (p >= cfg.wood_threshold) as usize;
    }
    let mean = sum / near.len() as f64;
    let label = match (2 * wood).cmp(&near.len()) {
        core::cmp::Ordering::Greater => ClassLabel::Wood,
        core::cmp::Ordering::Less => ClassLabel::Leaf,
        core::cmp::Ordering::Equal if mean >= cfg.wood_threshold => ClassLabel::Wood,
        core::cmp::Ordering::Equal => ClassLabel::Leaf,
    };
    (label, mean)
}

/// Indices of cloud points without a single prediction.
pub fn uncovered(cloud_len: usize, predictions: &[Prediction]) -> Vec<usize> {
    let mut seen = alloc::vec![false; cloud_len];
    for p in predictions {
        if let Some(s) = seen.get_mut(p.index as usize) {
            *s = true;
        }
    }
    (0..cloud_len).filter(|&i| !seen[i]).collect()
}

fn uncovered_error(missing: &[usize]) -> Error {
    let shown: Vec<usize> = missing.iter().copied().take(20).collect();
    Error::MissingData(format!(
        "{} points have no prediction: {:?}{}",
        missing.len(),
        shown,
        if missing.len() > shown.len() { " ..." } else { "" }
    ))
}

/// Consolidated labels and probabilities for every point of `cloud`.
/// Points outside every prediction take their vote from the nearest
/// predicted points unless `require_coverage` is set.
pub fn consolidate_labels(
    cloud: &PointCloud,
    predictions: &[Prediction],
    cfg: &ConsolidationConfig,
    require_coverage: bool,
) -> Result<(Vec<ClassLabel>, Vec<f32>)> {
    cfg.validate()?;
    if predictions.is_empty() {
        return Err(uncovered_error(&(0..cloud.len()).collect::<Vec<_>>()));
    }
    if require_coverage {
        let missing = uncovered(cloud.len(), predictions);
        if !missing.is_empty() {
            return Err(uncovered_error(&missing));
        }
    }
    let set = PredictionSet::new(cloud, predictions)?;
    let tree = set.tree();
    Ok(cloud
        .positions
        .iter()
        .map(|q| {
            let (l, p) = vote(&set, &tree, q, cfg);
            (l, p as f32)
        })
        .unzip())
}

/// `cloud` with `labels` and `wood_probability` replaced by the vote.
/// Every point must have at least one prediction.
pub fn consolidate(cloud: &PointCloud, predictions: &[Prediction], cfg: &ConsolidationConfig) -> Result<PointCloud> {
    let (labels, probs) = consolidate_labels(cloud, predictions, cfg, true)?;
    let mut out = cloud.clone();
    out.labels = Some(labels);
    out.wood_probability = Some(probs);
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegmentOptions {
    /// Seed of the per-voxel downsampling.
    pub seed: u64,
    /// Samples per forward pass.
    pub batch_size: usize,
}

impl Default for SegmentOptions {
    fn default() -> Self {
        SegmentOptions {
            seed: 0,
            batch_size: 10,
        }
    }
}

/// A segmented cloud plus the points left out of segmentation.
#[derive(Debug, Clone)]
pub struct Segmentation {
    /// Points that went through the network, with predicted labels.
    pub cloud: PointCloud,
    /// Their indices in the input cloud.
    pub kept: Vec<usize>,
    /// Filtered or ground points, unlabeled.
    pub excluded: PointCloud,
    pub excluded_indices: Vec<usize>,
}

/// Input points split into (kept, excluded) by the filters and, when
/// enabled, ground removal.
pub fn segmentation_split(cloud: &PointCloud, cfg: &PreprocessConfig) -> Result<(Vec<usize>, Vec<usize>)> {
    cfg.validate()?;
    let mut kept = filter_indices(cloud, cfg);
    if cfg.ground_removal && !kept.is_empty() {
        let pos: Vec<[f64; 3]> = kept.iter().map(|&i| cloud.positions[i]).collect();
        let ground = classify_ground(&pos, &cfg.cloth)?;
        kept = kept.into_iter().zip(ground).filter(|(_, g)| !g).map(|(i, _)| i).collect();
    }
    if kept.is_empty() {
        return Err(Error::Degenerate("no points left after filtering".into()));
    }
    let mut is_kept = alloc::vec![false; cloud.len()];
    kept.iter().for_each(|&i| is_kept[i] = true);
    let excluded = (0..cloud.len()).filter(|&i| !is_kept[i]).collect();
    Ok((kept, excluded))
}

/// Filter, tile at both scales, predict with `predict` and consolidate.
pub fn segment_cloud_with(
    cloud: &PointCloud,
    pre: &PreprocessConfig,
    cons: &ConsolidationConfig,
    seed: u64,
    predict: impl FnOnce(&[Sample]) -> Result<Vec<Prediction>>,
) -> Result<Segmentation> {
    cloud.validate()?;
    cons.validate()?;
    let (kept, excluded_indices) = segmentation_split(cloud, pre)?;
    let mut work = cloud.subset(&kept);
    let samples = make_samples(&work, pre, seed)?;
    let predictions = predict(&samples)?;
    let (labels, probs) = consolidate_labels(&work, &predictions, cons, false)?;
    work.labels = Some(labels);
    work.wood_probability = Some(probs);
    let mut excluded = cloud.subset(&excluded_indices);
    excluded.labels = None;
    excluded.wood_probability = None;
    Ok(Segmentation {
        cloud: work,
        kept,
        excluded,
        excluded_indices,
    })
}

/// [`segment_cloud_with`] using a sequential predictor.
pub fn segment_cloud<T: Scalar>(
    cloud: &PointCloud,
    model: &Model<T>,
    pre: &PreprocessConfig,
    cons: &ConsolidationConfig,
    opts: &SegmentOptions,
) -> Result<Segmentation> {
    segment_cloud_with(cloud, pre, cons, opts.seed, |s| predict_samples(s, model, opts.batch_size))
}

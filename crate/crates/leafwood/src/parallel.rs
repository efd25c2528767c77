//! Thread-parallel versions of the preprocessing and inference drivers.
//! Work is split into fixed chunks and merged in input order, so results
//! do not depend on the thread count.

use leafwood_core::infer::{
    segmentation_split, uncovered, vote, ConsolidationConfig, Prediction, PredictionSet, SegmentOptions, Segmentation,
};
use leafwood_core::model::{ForwardOptions, Model, SampleView};
use leafwood_core::preprocess::{build_sample, normalized_reflectance, voxel_groups, PreprocessConfig, Sample, Scale};
use leafwood_core::{ClassLabel, PointCloud};
use rayon::prelude::*;

use crate::error::{Error, Result};

/// Run `f` on a pool of `threads` workers (0 means one per core).
pub fn with_threads<R: Send>(threads: usize, f: impl FnOnce() -> R + Send) -> Result<R> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

/// Same samples as `preprocess::make_samples`, built in parallel.
pub fn par_make_samples(cloud: &PointCloud, cfg: &PreprocessConfig, seed: u64) -> Result<Vec<Sample>> {
    cfg.validate()?;
    if cloud.is_empty() {
        return Err(leafwood_core::Error::InvalidArgument("make_samples: empty cloud".into()).into());
    }
    let refl = normalized_reflectance(cloud);
    let mut out = Vec::new();
    for scale in Scale::ALL {
        let groups = voxel_groups(cloud, cfg, scale)?;
        let built: Vec<Sample> = groups
            .par_iter()
            .map(|(key, members)| build_sample(cloud, refl.as_deref(), scale, *key, members, cfg.max_points, seed))
            .collect::<leafwood_core::Result<_>>()?;
        out.extend(built);
    }
    Ok(out)
}

/// Same predictions as `infer::predict_samples`, batches run in parallel.
pub fn par_predict_samples(samples: &[Sample], model: &Model<f32>, batch_size: usize) -> Result<Vec<Prediction>> {
    let batches: Vec<Vec<Prediction>> = samples
        .par_chunks(batch_size.max(1))
        .map(|chunk| {
            let views: Vec<SampleView<'_>> = chunk.iter().map(SampleView::from).collect();
            let probs = model.predict(&views, &ForwardOptions::default())?;
            Ok(chunk
                .iter()
                .zip(probs)
                .flat_map(|(s, p)| {
                    s.source_indices
                        .iter()
                        .zip(p)
                        .map(|(&index, probability)| Prediction { index, probability })
                        .collect::<Vec<_>>()
                })
                .collect())
        })
        .collect::<leafwood_core::Result<_>>()?;
    Ok(batches.into_iter().flatten().collect())
}

/// Vote for every point of `cloud`; with `require_coverage` every point
/// must carry a prediction of its own.
pub fn par_consolidate_labels(
    cloud: &PointCloud,
    predictions: &[Prediction],
    cfg: &ConsolidationConfig,
    require_coverage: bool,
) -> Result<(Vec<ClassLabel>, Vec<f32>)> {
    cfg.validate()?;
    let missing = if predictions.is_empty() || require_coverage {
        uncovered(cloud.len(), predictions)
    } else {
        Vec::new()
    };
    if !missing.is_empty() {
        return Err(leafwood_core::Error::MissingData(format!(
            "{} points have no prediction, first {:?}",
            missing.len(),
            &missing[..missing.len().min(20)]
        ))
        .into());
    }
    let set = PredictionSet::new(cloud, predictions)?;
    let tree = set.tree();
    Ok(cloud
        .positions
        .par_iter()
        .map(|q| {
            let (l, p) = vote(&set, &tree, q, cfg);
            (l, p as f32)
        })
        .unzip())
}

/// Same result as `infer::segment_cloud`, with every stage parallel.
pub fn par_segment_cloud(
    cloud: &PointCloud,
    model: &Model<f32>,
    pre: &PreprocessConfig,
    cons: &ConsolidationConfig,
    opts: &SegmentOptions,
) -> Result<Segmentation> {
    cloud.validate()?;
    cons.validate()?;
    let (kept, excluded_indices) = segmentation_split(cloud, pre)?;
    let mut work = cloud.subset(&kept);
    let samples = par_make_samples(&work, pre, opts.seed)?;
    let predictions = par_predict_samples(&samples, model, opts.batch_size)?;
    let (labels, probs) = par_consolidate_labels(&work, &predictions, cons, false)?;
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

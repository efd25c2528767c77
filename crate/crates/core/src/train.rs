//! Focal loss, sample augmentation and the training loop.

use alloc::format;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::cloud::ClassLabel;
use crate::error::{invalid, shape, Error, Result};
use crate::metrics::classification_metrics;
use crate::model::{ForwardOptions, Geometry, Mode, Model, ModelWeights, NetworkConfig, SampleView};
use crate::ndiff::{one_cycle_lr, AdamW, AdamWConfig, ScheduleConfig, Tape};
use crate::preprocess::Sample;
use crate::rng::{derive_seed, rng_from_seed};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub gamma: f64,
    pub label_smoothing: f64,
    /// Weight every point by the inverse frequency of its class within its sample.
    pub sample_class_weights: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            gamma: 2.0,
            label_smoothing: 0.1,
            sample_class_weights: true,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0) {
            return Err(invalid(format!("gamma {} must be non-negative", self.gamma)));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(invalid(format!("label smoothing {} must lie in [0, 1)", self.label_smoothing)));
        }
        Ok(())
    }

    pub fn target(&self, label: ClassLabel) -> f64 {
        let y = label.as_u8() as f64;
        y * (1.0 - self.label_smoothing) + self.label_smoothing / 2.0
    }
}

/// Per-point targets and weights for one sample's labels.
fn sample_targets(labels: &[ClassLabel], cfg: &LossConfig, targets: &mut Vec<f64>, weights: &mut Vec<f64>) {
    let wood = labels.iter().filter(|l| l.is_wood()).count();
    let counts = [labels.len() - wood, wood];
    for &l in labels {
        targets.push(cfg.target(l));
        weights.push(if cfg.sample_class_weights {
            1.0 / counts[l.as_u8() as usize] as f64
        } else {
            1.0
        });
    }
}

/// Focal loss of wood probabilities against labels, treated as one sample.
/// Probabilities are clamped to `[1e-7, 1 - 1e-7]`.
pub fn focal_loss(probabilities: &[f64], labels: &[ClassLabel], cfg: &LossConfig) -> Result<f64> {
    cfg.validate()?;
    if probabilities.is_empty() || probabilities.len() != labels.len() {
        return Err(shape(
            "focal_loss",
            format!("{} probabilities for {} labels", probabilities.len(), labels.len()),
        ));
    }
    let mut targets = Vec::with_capacity(labels.len());
    let mut weights = Vec::with_capacity(labels.len());
    sample_targets(labels, cfg, &mut targets, &mut weights);
    let wsum: f64 = weights.iter().sum();
    Ok(probabilities
        .iter()
        .zip(&targets)
        .zip(&weights)
        .map(|((&p, &y), &w)| w * crate::ndiff::focal_point(p, y, cfg.gamma).0)
        .sum::<f64>()
        / wsum)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub reflectance_zero_fraction: f64,
    pub reflectance_noise_fraction: f64,
    pub noise_mu: f64,
    pub noise_sigma: f64,
    pub rotation_fraction: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            reflectance_zero_fraction: 0.25,
            reflectance_noise_fraction: 0.25,
            noise_mu: 0.0,
            noise_sigma: 1.0,
            rotation_fraction: 0.25,
        }
    }
}

impl AugmentConfig {
    /// No augmentation at all.
    pub fn none() -> Self {
        AugmentConfig {
            reflectance_zero_fraction: 0.0,
            reflectance_noise_fraction: 0.0,
            noise_mu: 0.0,
            noise_sigma: 0.0,
            rotation_fraction: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let unit = 0.0..=1.0;
        for (name, v) in [
            ("reflectance_zero_fraction", self.reflectance_zero_fraction),
            ("reflectance_noise_fraction", self.reflectance_noise_fraction),
            ("rotation_fraction", self.rotation_fraction),
        ] {
            if !unit.contains(&v) {
                return Err(invalid(format!("{name} {v} must lie in [0, 1]")));
            }
        }
        if self.reflectance_zero_fraction + self.reflectance_noise_fraction > 1.0 {
            return Err(invalid("zeroed and noised reflectance fractions exceed 1"));
        }
        if !(self.noise_sigma >= 0.0) || !self.noise_mu.is_finite() {
            return Err(invalid("noise parameters must be finite with sigma ≥ 0"));
        }
        Ok(())
    }
}

/// What augmentation did to one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentRecord {
    pub zeroed: Vec<u32>,
    pub noised: Vec<u32>,
    /// Row-major rotation applied about the sample mean, if any.
    pub rotation: Option<[[f64; 3]; 3]>,
}

/// Uniformly distributed rotation from a normalised Gaussian quaternion.
pub fn random_rotation<R: rand::Rng + ?Sized>(rng: &mut R) -> [[f64; 3]; 3] {
    let (w, x, y, z) = loop {
        let q: [f64; 4] = core::array::from_fn(|_| StandardNormal.sample(rng));
        let n = libm::sqrt(q.iter().map(|v| v * v).sum());
        if n > 1e-9 {
            break (q[0] / n, q[1] / n, q[2] / n, q[3] / n);
        }
    };
    [
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
        [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
        [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
    ]
}

/// Augment one sample in place.
pub fn augment_sample(sample: &mut Sample, cfg: &AugmentConfig, seed: u64) -> AugmentRecord {
    let mut rng = rng_from_seed(seed);
    let n = sample.len();
    let n_zero = libm::round(cfg.reflectance_zero_fraction * n as f64) as usize;
    let n_noise = (libm::round(cfg.reflectance_noise_fraction * n as f64) as usize).min(n - n_zero);
    let mut chosen = rand::seq::index::sample(&mut rng, n, n_zero + n_noise).into_vec();
    let mut noised: Vec<u32> = chosen.split_off(n_zero).into_iter().map(|i| i as u32).collect();
    let mut zeroed: Vec<u32> = chosen.into_iter().map(|i| i as u32).collect();
    zeroed.sort_unstable();
    noised.sort_unstable();
    for &i in &zeroed {
        sample.reflectance[i as usize] = 0.0;
    }
    for &i in &noised {
        let g: f64 = StandardNormal.sample(&mut rng);
        sample.reflectance[i as usize] += (cfg.noise_mu + cfg.noise_sigma * g) as f32;
    }
    let rotation = (rng.random::<f64>() < cfg.rotation_fraction).then(|| {
        let r = random_rotation(&mut rng);
        let mut mean = [0.0f64; 3];
        for p in &sample.positions {
            for a in 0..3 {
                mean[a] += p[a] as f64 / n as f64;
            }
        }
        for p in &mut sample.positions {
            let d = [p[0] as f64 - mean[0], p[1] as f64 - mean[1], p[2] as f64 - mean[2]];
            for a in 0..3 {
                p[a] = (mean[a] + r[a][0] * d[0] + r[a][1] * d[1] + r[a][2] * d[2]) as f32;
            }
        }
        r
    });
    AugmentRecord {
        zeroed,
        noised,
        rotation,
    }
}

/// Augmented copies of `samples`; sample `i` draws from `derive_seed(seed, [i])`.
pub fn augment_batch(samples: &[Sample], cfg: &AugmentConfig, seed: u64) -> Result<Vec<Sample>> {
    cfg.validate()?;
    Ok(samples
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let mut s = s.clone();
            augment_sample(&mut s, cfg, derive_seed(seed, &[i as i64]));
            s
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// `total_steps` is replaced by `epochs × ceil(samples / batch_size)`.
    pub schedule: ScheduleConfig,
    pub adamw: AdamWConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 300,
            batch_size: 10,
            schedule: ScheduleConfig::default(),
            adamw: AdamWConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(invalid("epochs and batch_size must be positive"));
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self, samples: usize) -> usize {
        samples.div_ceil(self.batch_size)
    }

    /// Schedule covering the whole run. Runs shorter than the warm-up keep
    /// their last step for decay.
    pub fn run_schedule(&self, samples: usize) -> Result<ScheduleConfig> {
        let total = (self.epochs * self.steps_per_epoch(samples)) as u64;
        let s = ScheduleConfig {
            total_steps: total,
            warmup_steps: self.schedule.warmup_steps.min(total.saturating_sub(1)),
            ..self.schedule
        };
        s.validate()?;
        Ok(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean training loss over the epoch's steps.
    pub loss: f64,
    /// Learning rate of the epoch's last step.
    pub lr: f64,
    pub val_ba: f64,
    pub val_f1: f64,
    pub steps: usize,
    /// Validation BA beat every earlier epoch and the weights were kept.
    pub improved: bool,
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub best: ModelWeights,
    pub best_epoch: usize,
    pub log: Vec<EpochLog>,
}

fn labels_of<'a>(s: &'a Sample, which: &str, i: usize) -> Result<&'a [ClassLabel]> {
    s.labels
        .as_deref()
        .ok_or_else(|| Error::MissingData(format!("{which} sample {i} has no labels")))
}

fn check_set(samples: &[Sample], which: &str) -> Result<()> {
    if samples.is_empty() {
        return Err(invalid(format!("no {which} samples")));
    }
    for (i, s) in samples.iter().enumerate() {
        if labels_of(s, which, i)?.len() != s.len() {
            return Err(shape("fit", format!("{which} sample {i}: label count")));
        }
    }
    Ok(())
}

/// Pooled wood probabilities of `samples` in evaluation mode, predicted in
/// batches of `batch_size`.
pub fn predict_pooled(model: &Model<f32>, samples: &[Sample], batch_size: usize) -> Result<Vec<f32>> {
    let mut out = Vec::new();
    for chunk in samples.chunks(batch_size.max(1)) {
        let views: Vec<SampleView<'_>> = chunk.iter().map(SampleView::from).collect();
        for p in model.predict(&views, &ForwardOptions::default())? {
            out.extend(p);
        }
    }
    Ok(out)
}

/// Balanced accuracy and F1 of pooled point predictions at threshold 0.5.
pub fn evaluate_samples(model: &Model<f32>, samples: &[Sample], batch_size: usize) -> Result<(f64, f64)> {
    let probs = predict_pooled(model, samples, batch_size)?;
    let pred: Vec<ClassLabel> = probs.iter().map(|&p| ClassLabel::from_probability(p, 0.5)).collect();
    let truth: Vec<ClassLabel> = samples
        .iter()
        .flat_map(|s| s.labels.iter().flatten().copied())
        .collect();
    let m = classification_metrics(&pred, &truth)?;
    Ok((m.ba, m.f1))
}

/// Run one optimisation step on `batch`; returns the loss.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    model: &mut Model<f32>,
    optimizer: &mut AdamW<f32>,
    batch: &[Sample],
    loss_cfg: &LossConfig,
    lr: f64,
    seed: u64,
) -> Result<f64> {
    let views: Vec<SampleView<'_>> = batch.iter().map(SampleView::from).collect();
    let geom = Geometry::build(&views, model.config(), Mode::Train, derive_seed(seed, &[0]))?;
    let mut targets = Vec::new();
    let mut weights = Vec::new();
    for (i, s) in batch.iter().enumerate() {
        sample_targets(labels_of(s, "training", i)?, loss_cfg, &mut targets, &mut weights);
    }
    let targets: Vec<f32> = targets.into_iter().map(|v| v as f32).collect();
    let weights: Vec<f32> = weights.into_iter().map(|v| v as f32).collect();
    let mut tape = Tape::new();
    let fwd = model.forward(
        &mut tape,
        &views,
        &geom,
        Mode::Train,
        derive_seed(seed, &[1]),
        &ForwardOptions::default(),
    )?;
    let loss = tape.focal_loss(fwd.logits, &targets, &weights, loss_cfg.gamma)?;
    let value = tape.value(loss).data()[0] as f64;
    tape.backward(loss)?;
    let grads: Vec<_> = fwd.params.iter().map(|&p| tape.take_grad(p)).collect();
    drop(tape);
    optimizer.step(model.weights_mut(), &grads, lr)?;
    model.update_running_stats(&fwd.bn_updates);
    Ok(value)
}

/// Train from scratch. `on_epoch` sees every log row, plus the weights
/// whenever validation BA strictly improves.
pub fn fit(
    train: &[Sample],
    validation: &[Sample],
    net: &NetworkConfig,
    cfg: &TrainConfig,
    loss_cfg: &LossConfig,
    augment: &AugmentConfig,
    mut on_epoch: impl FnMut(&EpochLog, Option<&ModelWeights>),
) -> Result<FitResult> {
    cfg.validate()?;
    loss_cfg.validate()?;
    augment.validate()?;
    net.validate()?;
    check_set(train, "training")?;
    check_set(validation, "validation")?;
    let schedule = cfg.run_schedule(train.len())?;
    let mut model = Model::<f32>::new(net.clone(), derive_seed(cfg.seed, &[0]))?;
    let mut optimizer = AdamW::new(cfg.adamw, model.weights());
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, ModelWeights)> = None;
    let mut step = 0u64;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng_from_seed(derive_seed(cfg.seed, &[1, epoch as i64])));
        let mut loss_sum = 0.0;
        let mut lr = 0.0;
        let mut steps = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let picked: Vec<Sample> = chunk.iter().map(|&i| train[i].clone()).collect();
            let batch = augment_batch(&picked, augment, derive_seed(cfg.seed, &[2, step as i64]))?;
            lr = one_cycle_lr(step, &schedule)?;
            loss_sum += train_step(
                &mut model,
                &mut optimizer,
                &batch,
                loss_cfg,
                lr,
                derive_seed(cfg.seed, &[3, step as i64]),
            )?;
            step += 1;
            steps += 1;
        }
        let (val_ba, val_f1) = evaluate_samples(&model, validation, cfg.batch_size)?;
        let improved = best.as_ref().is_none_or(|b| val_ba > b.0);
        let row = EpochLog {
            epoch,
            loss: loss_sum / steps as f64,
            lr,
            val_ba,
            val_f1,
            steps,
            improved,
        };
        if improved {
            best = Some((val_ba, epoch, model.weights().clone()));
        }
        on_epoch(&row, improved.then(|| &best.as_ref().unwrap().2));
        log.push(row);
    }
    let (_, best_epoch, best) = best.unwrap();
    Ok(FitResult { best, best_epoch, log })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::preprocess::Scale;
    use crate::spatial::VoxelKey;
    use alloc::vec;
    use proptest::prelude::*;
    use ClassLabel::{Leaf, Wood};

    fn plain() -> LossConfig {
        LossConfig {
            gamma: 2.0,
            label_smoothing: 0.0,
            sample_class_weights: false,
        }
    }

    #[test]
    fn half_probability_closed_form() {
        let l = focal_loss(&[0.5], &[Wood], &plain()).unwrap();
        assert!((l - 0.25 * core::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn gamma_zero_is_cross_entropy() {
        let cfg = LossConfig { gamma: 0.0, ..plain() };
        let mut rng = rng_from_seed(5);
        let p: Vec<f64> = (0..1000).map(|_| rng.random_range(0.001..0.999)).collect();
        let y: Vec<ClassLabel> = (0..1000).map(|_| if rng.random_bool(0.5) { Wood } else { Leaf }).collect();
        let ce = p
            .iter()
            .zip(&y)
            .map(|(&p, l)| if l.is_wood() { -libm::log(p) } else { -libm::log(1.0 - p) })
            .sum::<f64>()
            / 1000.0;
        assert!((focal_loss(&p, &y, &cfg).unwrap() - ce).abs() < 1e-9);
    }

    #[test]
    fn confident_correct_goes_to_zero_and_extremes_are_clamped() {
        assert!(focal_loss(&[1.0 - 1e-6], &[Wood], &plain()).unwrap() < 1e-15);
        assert!(focal_loss(&[1.0], &[Wood], &plain()).unwrap().is_finite());
        assert!(focal_loss(&[0.0], &[Wood], &plain()).unwrap().is_finite());
    }

    #[test]
    fn hard_points_are_up_weighted() {
        let ratio = |p: f64| focal_loss(&[p], &[Wood], &plain()).unwrap() / -libm::log(p);
        assert!(ratio(0.9) < ratio(0.6));
    }

    #[test]
    fn class_weights_balance_the_classes() {
        let cfg = LossConfig {
            sample_class_weights: true,
            ..plain()
        };
        let p = [0.3, 0.3, 0.3, 0.6];
        let y = [Leaf, Leaf, Leaf, Wood];
        let leaf = focal_loss(&[0.3], &[Leaf], &plain()).unwrap();
        let wood = focal_loss(&[0.6], &[Wood], &plain()).unwrap();
        assert!((focal_loss(&p, &y, &cfg).unwrap() - (leaf + wood) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn smoothing_targets_are_symmetric() {
        let cfg = LossConfig::default();
        assert!((cfg.target(Wood) - 0.95).abs() < 1e-15);
        assert!((cfg.target(Leaf) - 0.05).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn loss_is_non_negative_and_decreasing_for_wood(p in 0.001f64..0.998, gamma in 0.0f64..5.0) {
            let cfg = LossConfig { gamma, ..plain() };
            let a = focal_loss(&[p], &[Wood], &cfg).unwrap();
            let b = focal_loss(&[p + 0.001], &[Wood], &cfg).unwrap();
            prop_assert!(a >= 0.0);
            prop_assert!(b < a);
        }
    }

    fn sample(n: usize, seed: u64) -> Sample {
        let mut rng = rng_from_seed(seed);
        Sample {
            scale: Scale::Fine,
            key: VoxelKey { i: 0, j: 0, k: 0 },
            positions: (0..n)
                .map(|_| core::array::from_fn(|_| rng.random_range(-1.0f32..1.0)))
                .collect(),
            reflectance: (0..n).map(|_| rng.random_range(-0.5f32..0.5)).collect(),
            source_indices: (0..n as u32).collect(),
            labels: Some((0..n).map(|i| if i % 3 == 0 { Wood } else { Leaf }).collect()),
        }
    }

    #[test]
    fn augmentation_fractions_are_disjoint_quarters() {
        let cfg = AugmentConfig::default();
        let (mut zero, mut noise, mut total, mut rotated) = (0usize, 0usize, 0usize, 0usize);
        for seed in 0..1000u64 {
            let mut s = sample(37 + (seed % 50) as usize, seed);
            let r = augment_sample(&mut s, &cfg, seed);
            assert!(r.zeroed.iter().all(|i| r.noised.binary_search(i).is_err()));
            assert!(r.zeroed.iter().all(|&i| s.reflectance[i as usize] == 0.0));
            zero += r.zeroed.len();
            noise += r.noised.len();
            total += s.len();
            rotated += r.rotation.is_some() as usize;
        }
        let (fz, fn_) = (zero as f64 / total as f64, noise as f64 / total as f64);
        assert!((fz - 0.25).abs() <= 0.02, "{fz}");
        assert!((fn_ - 0.25).abs() <= 0.02, "{fn_}");
        assert!((rotated as f64 / 1000.0 - 0.25).abs() < 0.05);
    }

    #[test]
    fn rotation_is_an_isometry_and_positions_otherwise_untouched() {
        let cfg = AugmentConfig::default();
        let mut seen = [false; 2];
        for seed in 0..40u64 {
            let orig = sample(60, seed);
            let mut s = orig.clone();
            let r = augment_sample(&mut s, &cfg, seed);
            match r.rotation {
                None => {
                    assert_eq!(s.positions, orig.positions);
                    seen[0] = true;
                }
                Some(_) => {
                    seen[1] = true;
                    for i in 0..60 {
                        for j in 0..i {
                            let d = |p: &[[f32; 3]]| {
                                libm::sqrt((0..3).map(|a| ((p[i][a] - p[j][a]) as f64).powi(2)).sum())
                            };
                            assert!((d(&s.positions) - d(&orig.positions)).abs() < 1e-5);
                        }
                    }
                }
            }
        }
        assert!(seen[0] && seen[1]);
    }

    #[test]
    fn random_rotation_is_orthonormal() {
        let mut rng = rng_from_seed(1);
        for _ in 0..100 {
            let r = random_rotation(&mut rng);
            for a in 0..3 {
                for b in 0..3 {
                    let dot: f64 = (0..3).map(|k| r[a][k] * r[b][k]).sum();
                    assert!((dot - if a == b { 1.0 } else { 0.0 }).abs() < 1e-12);
                }
            }
            let det = r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1]) - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0])
                + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0]);
            assert!((det - 1.0).abs() < 1e-12);
        }
    }

    fn tiny_net() -> NetworkConfig {
        let mut net = NetworkConfig::reduced();
        net.stages[0].channels = 8;
        net.stages[1].channels = 8;
        net.fp_channels = vec![8, 8];
        net.head_hidden = 8;
        net.gate_hidden = 4;
        net
    }

    #[test]
    fn one_epoch_of_35_samples_takes_4_steps() {
        let train: Vec<Sample> = (0..35).map(|i| sample(40, i)).collect();
        let val: Vec<Sample> = (0..3).map(|i| sample(40, 100 + i)).collect();
        let cfg = TrainConfig {
            epochs: 1,
            ..TrainConfig::default()
        };
        let r = fit(&train, &val, &tiny_net(), &cfg, &LossConfig::default(), &AugmentConfig::default(), |_, _| {})
            .unwrap();
        assert_eq!(r.log.len(), 1);
        assert_eq!(r.log[0].steps, 4);
    }

    #[test]
    fn unlabeled_sample_fails_before_training() {
        let mut train: Vec<Sample> = (0..3).map(|i| sample(40, i)).collect();
        train[2].labels = None;
        let val = vec![sample(40, 9)];
        let mut called = false;
        let r = fit(&train, &val, &tiny_net(), &TrainConfig::default(), &LossConfig::default(), &AugmentConfig::default(), |_, _| called = true);
        assert!(matches!(r, Err(Error::MissingData(_))));
        assert!(!called);
    }

    #[test]
    fn fit_is_reproducible_and_checkpoints_are_monotone() {
        let train: Vec<Sample> = (0..6).map(|i| sample(50, i)).collect();
        let val: Vec<Sample> = (0..2).map(|i| sample(50, 50 + i)).collect();
        let cfg = TrainConfig {
            epochs: 4,
            batch_size: 3,
            seed: 11,
            ..TrainConfig::default()
        };
        let run = || {
            let mut saved = Vec::new();
            let r = fit(&train, &val, &tiny_net(), &cfg, &LossConfig::default(), &AugmentConfig::default(), |row, w| {
                if w.is_some() {
                    saved.push(row.val_ba)
                }
            })
            .unwrap();
            (r, saved)
        };
        let (a, saved) = run();
        let (b, _) = run();
        assert_eq!(a.log, b.log);
        assert_eq!(a.best, b.best);
        assert!(saved.windows(2).all(|w| w[1] > w[0]));
        assert!(a.log.iter().all(|r| r.loss.is_finite()));
    }
}

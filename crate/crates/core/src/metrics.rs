//! Classification metrics with wood as the positive class, path-length
//! weighted balanced accuracy and per-decile accuracy.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::cloud::{ClassLabel, PointCloud};
use crate::error::{invalid, shape, Error, Result};
use crate::spatial::shortest_path_lengths;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl Confusion {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn from_labels(predicted: &[ClassLabel], truth: &[ClassLabel]) -> Result<Self> {
        if predicted.len() != truth.len() {
            return Err(shape(
                "confusion",
                format!("{} predictions for {} labels", predicted.len(), truth.len()),
            ));
        }
        let mut c = Confusion::default();
        for (p, t) in predicted.iter().zip(truth) {
            match (p.is_wood(), t.is_wood()) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, false) => c.tn += 1,
                (false, true) => c.fn_ += 1,
            }
        }
        Ok(c)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassificationMetrics {
    pub confusion: Confusion,
    pub ba: f64,
    /// 0 when nothing was predicted wood.
    pub precision: f64,
    pub recall: f64,
    /// 0 when precision and recall are both 0.
    pub f1: f64,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl ClassificationMetrics {
    pub fn from_confusion(c: Confusion) -> Result<Self> {
        if c.tp + c.fn_ == 0 || c.tn + c.fp == 0 {
            return Err(Error::Degenerate(
                "balanced accuracy needs both classes in the reference labels".into(),
            ));
        }
        let recall = ratio(c.tp, c.tp + c.fn_);
        let specificity = ratio(c.tn, c.tn + c.fp);
        let precision = ratio(c.tp, c.tp + c.fp);
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Ok(ClassificationMetrics {
            confusion: c,
            ba: (recall + specificity) / 2.0,
            precision,
            recall,
            f1,
        })
    }
}

pub fn classification_metrics(predicted: &[ClassLabel], truth: &[ClassLabel]) -> Result<ClassificationMetrics> {
    ClassificationMetrics::from_confusion(Confusion::from_labels(predicted, truth)?)
}

fn check_paths(n: usize, lengths: &[f64], reachable: &[bool]) -> Result<()> {
    if lengths.len() != n || reachable.len() != n {
        return Err(shape(
            "path lengths",
            format!("{} lengths and {} flags for {n} points", lengths.len(), reachable.len()),
        ));
    }
    if let Some(i) = (0..n).find(|&i| reachable[i] && !(lengths[i] >= 0.0 && lengths[i].is_finite())) {
        return Err(invalid(format!("point {i}: path length {} is not a finite non-negative value", lengths[i])));
    }
    Ok(())
}

/// Balanced accuracy with each reachable point weighted by its path length
/// plus `floor`. Points at the tree base (length 0) carry no weight unless
/// `floor > 0`.
pub fn path_weighted_balanced_accuracy(
    predicted: &[ClassLabel],
    truth: &[ClassLabel],
    lengths: &[f64],
    reachable: &[bool],
    floor: f64,
) -> Result<f64> {
    if predicted.len() != truth.len() {
        return Err(shape("bap", "prediction and label counts differ"));
    }
    check_paths(truth.len(), lengths, reachable)?;
    if !(floor >= 0.0) {
        return Err(invalid(format!("weight floor {floor} must be non-negative")));
    }
    let mut hit = [0.0f64; 2];
    let mut total = [0.0f64; 2];
    for i in 0..truth.len() {
        if !reachable[i] {
            continue;
        }
        let w = lengths[i] + floor;
        let class = truth[i].as_u8() as usize;
        total[class] += w;
        if predicted[i] == truth[i] {
            hit[class] += w;
        }
    }
    if !(total[0] > 0.0 && total[1] > 0.0) {
        return Err(Error::Degenerate(
            "path-weighted balanced accuracy needs positive total weight in both classes".into(),
        ));
    }
    Ok((hit[1] / total[1] + hit[0] / total[0]) / 2.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecileRow {
    pub decile: usize,
    /// Smallest and largest path length in the bin (m).
    pub min_length: f64,
    pub max_length: f64,
    pub count: usize,
    pub accuracy: f64,
    pub wood_fraction: f64,
}

/// Reachable points split into ten equal-count bins by ascending path
/// length (index order on ties); bin `b` takes sorted positions
/// `b n / 10 .. (b + 1) n / 10`.
pub fn path_decile_report(
    predicted: &[ClassLabel],
    truth: &[ClassLabel],
    lengths: &[f64],
    reachable: &[bool],
) -> Result<Vec<DecileRow>> {
    if predicted.len() != truth.len() {
        return Err(shape("path_decile_report", "prediction and label counts differ"));
    }
    check_paths(truth.len(), lengths, reachable)?;
    let mut order: Vec<usize> = (0..truth.len()).filter(|&i| reachable[i]).collect();
    let n = order.len();
    if n < 10 {
        return Err(invalid(format!("decile report needs at least 10 reachable points, found {n}")));
    }
    order.sort_by(|&a, &b| lengths[a].total_cmp(&lengths[b]).then(a.cmp(&b)));
    Ok((0..10)
        .map(|b| {
            let bin = &order[b * n / 10..(b + 1) * n / 10];
            let correct = bin.iter().filter(|&&i| predicted[i] == truth[i]).count();
            let wood = bin.iter().filter(|&&i| truth[i].is_wood()).count();
            DecileRow {
                decile: b + 1,
                min_length: lengths[bin[0]],
                max_length: lengths[*bin.last().unwrap()],
                count: bin.len(),
                accuracy: correct as f64 / bin.len() as f64,
                wood_fraction: wood as f64 / bin.len() as f64,
            }
        })
        .collect())
}

/// Per-point path lengths computed tree by tree from the `tree_id` column.
/// Points outside any tree (id 0) are unreachable.
#[derive(Debug, Clone, PartialEq)]
pub struct TreePaths {
    pub lengths: Vec<f64>,
    pub reachable: Vec<bool>,
}

impl TreePaths {
    pub fn unreachable_count(&self) -> usize {
        self.reachable.iter().filter(|r| !**r).count()
    }
}

pub fn per_tree_path_lengths(cloud: &PointCloud, graph_k: usize) -> Result<TreePaths> {
    let ids = cloud
        .tree_id
        .as_ref()
        .ok_or_else(|| Error::MissingData("per-tree path lengths need a tree_id column".into()))?;
    let mut lengths = alloc::vec![f64::INFINITY; cloud.len()];
    let mut reachable = alloc::vec![false; cloud.len()];
    let mut order: Vec<usize> = (0..cloud.len()).filter(|&i| ids[i] > 0).collect();
    order.sort_by_key(|&i| (ids[i], i));
    for members in order.chunk_by(|&a, &b| ids[a] == ids[b]) {
        let pts: Vec<[f64; 3]> = members.iter().map(|&i| cloud.positions[i]).collect();
        let paths = shortest_path_lengths(&pts, graph_k)?;
        for (j, &i) in members.iter().enumerate() {
            lengths[i] = paths.lengths[j];
            reachable[i] = paths.reachable[j];
        }
    }
    Ok(TreePaths { lengths, reachable })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub points: usize,
    pub confusion: Confusion,
    pub ba: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub bap: Option<f64>,
    pub unreachable_count: usize,
    pub decile_rows: Vec<DecileRow>,
}

/// Full report; path-length metrics are filled when `paths` is given.
pub fn evaluate(
    predicted: &[ClassLabel],
    truth: &[ClassLabel],
    paths: Option<&TreePaths>,
    weight_floor: f64,
) -> Result<EvaluationReport> {
    let m = classification_metrics(predicted, truth)?;
    let (bap, unreachable_count, decile_rows) = match paths {
        Some(p) => (
            Some(path_weighted_balanced_accuracy(predicted, truth, &p.lengths, &p.reachable, weight_floor)?),
            p.unreachable_count(),
            path_decile_report(predicted, truth, &p.lengths, &p.reachable)?,
        ),
        None => (None, 0, Vec::new()),
    };
    Ok(EvaluationReport {
        points: truth.len(),
        confusion: m.confusion,
        ba: m.ba,
        precision: m.precision,
        recall: m.recall,
        f1: m.f1,
        bap,
        unreachable_count,
        decile_rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;
    use alloc::vec;
    use proptest::prelude::*;
    use rand::Rng as _;
    use ClassLabel::{Leaf, Wood};

    fn labels(spec: &[(ClassLabel, ClassLabel, usize)]) -> (Vec<ClassLabel>, Vec<ClassLabel>) {
        let mut p = Vec::new();
        let mut t = Vec::new();
        for &(pred, truth, n) in spec {
            p.extend(core::iter::repeat(pred).take(n));
            t.extend(core::iter::repeat(truth).take(n));
        }
        (p, t)
    }

    #[test]
    fn metrics_by_hand() {
        let (p, t) = labels(&[(Wood, Wood, 8), (Leaf, Wood, 2), (Leaf, Leaf, 90), (Wood, Leaf, 10)]);
        let m = classification_metrics(&p, &t).unwrap();
        assert_eq!(m.confusion, Confusion { tp: 8, fp: 10, tn: 90, fn_: 2 });
        assert!((m.ba - 0.85).abs() < 1e-15);
        assert!((m.precision - 8.0 / 18.0).abs() < 1e-15);
        assert!((m.recall - 0.8).abs() < 1e-15);
        let f1 = 2.0 * (8.0 / 18.0) * 0.8 / (8.0 / 18.0 + 0.8);
        assert!((m.f1 - f1).abs() < 1e-15);
    }

    #[test]
    fn perfect_prediction_scores_one() {
        let t = vec![Wood, Leaf, Leaf, Wood];
        let m = classification_metrics(&t, &t).unwrap();
        assert_eq!((m.ba, m.precision, m.recall, m.f1), (1.0, 1.0, 1.0, 1.0));
    }

    #[test]
    fn single_class_truth_is_an_error() {
        let t = vec![Wood; 5];
        assert!(matches!(classification_metrics(&t, &t), Err(Error::Degenerate(_))));
    }

    #[test]
    fn tip_error_costs_a_third_of_wood_recall() {
        let truth = vec![Wood, Wood, Wood, Leaf, Leaf];
        let pred = vec![Wood, Wood, Leaf, Leaf, Leaf];
        let lengths = vec![0.0, 1.0, 2.0, 1.0, 3.0];
        let bap = path_weighted_balanced_accuracy(&pred, &truth, &lengths, &[true; 5], 0.0).unwrap();
        assert!((bap - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn errors_far_from_the_base_cost_more() {
        let truth: Vec<ClassLabel> = (0..20).map(|i| if i < 10 { Wood } else { Leaf }).collect();
        let lengths: Vec<f64> = (0..20).map(|i| (i % 10) as f64 + 0.5).collect();
        let mut near = truth.clone();
        near[0] = Leaf;
        near[1] = Leaf;
        let mut far = truth.clone();
        far[8] = Leaf;
        far[9] = Leaf;
        let r = [true; 20];
        let b_near = path_weighted_balanced_accuracy(&near, &truth, &lengths, &r, 0.0).unwrap();
        let b_far = path_weighted_balanced_accuracy(&far, &truth, &lengths, &r, 0.0).unwrap();
        assert!(b_far < b_near);
        let ba_near = classification_metrics(&near, &truth).unwrap().ba;
        let ba_far = classification_metrics(&far, &truth).unwrap().ba;
        assert_eq!(ba_near, ba_far);
    }

    #[test]
    fn unreachable_points_are_ignored_and_zero_weight_is_an_error() {
        let truth = vec![Wood, Leaf, Wood];
        let pred = vec![Wood, Leaf, Leaf];
        let lengths = vec![1.0, 1.0, f64::INFINITY];
        let bap = path_weighted_balanced_accuracy(&pred, &truth, &lengths, &[true, true, false], 0.0).unwrap();
        assert_eq!(bap, 1.0);
        let zero = vec![0.0, 1.0, 0.0];
        assert!(path_weighted_balanced_accuracy(&pred, &truth, &zero, &[true; 3], 0.0).is_err());
        assert!(path_weighted_balanced_accuracy(&pred, &truth, &zero, &[true; 3], 0.5).is_ok());
    }

    fn random_case(seed: u64, n: usize) -> (Vec<ClassLabel>, Vec<ClassLabel>, Vec<f64>) {
        let mut rng = rng_from_seed(seed);
        let mut truth: Vec<ClassLabel> = (0..n).map(|_| if rng.random_bool(0.3) { Wood } else { Leaf }).collect();
        truth[0] = Wood;
        truth[1] = Leaf;
        let pred = (0..n).map(|_| if rng.random_bool(0.4) { Wood } else { Leaf }).collect();
        let lengths = (0..n).map(|_| rng.random_range(0.01..20.0)).collect();
        (pred, truth, lengths)
    }

    proptest! {
        #[test]
        fn constant_weights_reduce_to_ba(seed in any::<u64>(), n in 2usize..500, c in 0.01f64..100.0) {
            let (p, t, _) = random_case(seed, n);
            let ba = classification_metrics(&p, &t).unwrap().ba;
            let bap = path_weighted_balanced_accuracy(&p, &t, &vec![c; n], &vec![true; n], 0.0).unwrap();
            prop_assert!((ba - bap).abs() <= 1e-12);
        }

        #[test]
        fn bap_ignores_length_units(seed in any::<u64>(), n in 2usize..500, k in 0.001f64..1000.0) {
            let (p, t, l) = random_case(seed, n);
            let r = vec![true; n];
            let a = path_weighted_balanced_accuracy(&p, &t, &l, &r, 0.0).unwrap();
            let scaled: Vec<f64> = l.iter().map(|v| v * k).collect();
            let b = path_weighted_balanced_accuracy(&p, &t, &scaled, &r, 0.0).unwrap();
            prop_assert!((a - b).abs() <= 1e-12);
        }

        #[test]
        fn deciles_partition_reachable_points(seed in any::<u64>(), n in 10usize..400) {
            let (p, t, l) = random_case(seed, n);
            let mut rng = rng_from_seed(seed ^ 1);
            let mut r: Vec<bool> = (0..n).map(|_| rng.random_bool(0.9)).collect();
            r[..10].iter_mut().for_each(|x| *x = true);
            let rows = path_decile_report(&p, &t, &l, &r).unwrap();
            prop_assert_eq!(rows.iter().map(|row| row.count).sum::<usize>(), r.iter().filter(|x| **x).count());
            for w in rows.windows(2) {
                prop_assert!(w[0].max_length <= w[1].min_length);
            }
            for row in &rows {
                prop_assert!((0.0..=1.0).contains(&row.accuracy));
                prop_assert!(row.min_length <= row.max_length);
            }
        }
    }

    #[test]
    fn hundred_uniform_points_give_bins_of_ten() {
        let (p, t, _) = random_case(3, 100);
        let l: Vec<f64> = (0..100).map(|i| i as f64).collect();
        let rows = path_decile_report(&p, &t, &l, &[true; 100]).unwrap();
        assert!(rows.iter().all(|r| r.count == 10));
        assert_eq!(rows[3].min_length, 30.0);
        assert_eq!(rows[3].max_length, 39.0);
    }

    #[test]
    fn per_tree_paths_restart_at_each_base() {
        let mut c = PointCloud::from_positions(vec![
            [0.0, 0.0, 0.0],
            [0.0, 0.0, 1.0],
            [5.0, 0.0, 3.0],
            [5.0, 0.0, 2.0],
            [9.0, 9.0, 9.0],
        ]);
        c.tree_id = Some(vec![1, 1, 2, 2, 0]);
        let p = per_tree_path_lengths(&c, 8).unwrap();
        assert_eq!(&p.lengths[..4], &[0.0, 1.0, 1.0, 0.0]);
        assert_eq!(p.reachable, vec![true, true, true, true, false]);
        assert_eq!(p.unreachable_count(), 1);
        c.tree_id = None;
        assert!(matches!(per_tree_path_lengths(&c, 8), Err(Error::MissingData(_))));
    }
}

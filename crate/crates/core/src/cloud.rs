//! Columnar point-cloud store.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{shape, Error, Result};

/// Semantic class of a point. Wood is the positive (target) class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[repr(u8)]
pub enum ClassLabel {
    Leaf = 0,
    Wood = 1,
}

impl ClassLabel {
    pub fn from_u8(v: u8) -> Option<Self> {
        match v {
            0 => Some(ClassLabel::Leaf),
            1 => Some(ClassLabel::Wood),
            _ => None,
        }
    }

    pub fn as_u8(self) -> u8 {
        self as u8
    }

    pub fn is_wood(self) -> bool {
        self == ClassLabel::Wood
    }

    /// Label from a wood probability and decision threshold (`p >= threshold` is wood).
    pub fn from_probability(p: f32, threshold: f32) -> Self {
        if p >= threshold {
            ClassLabel::Wood
        } else {
            ClassLabel::Leaf
        }
    }
}

/// Per-point columns. Every present column has one entry per position.
///
/// `tree_id` and `ground` are written by the synthetic generator; `tree_id` 0
/// marks points that belong to no tree.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    pub positions: Vec<[f64; 3]>,
    pub reflectance: Option<Vec<f32>>,
    /// True when `reflectance` already holds rank-normalised values in [-1, 1].
    pub reflectance_normalized: bool,
    pub deviation: Option<Vec<f32>>,
    pub labels: Option<Vec<ClassLabel>>,
    pub wood_probability: Option<Vec<f32>>,
    pub tree_id: Option<Vec<u32>>,
    pub ground: Option<Vec<bool>>,
}

macro_rules! check_column {
    ($self:ident, $field:ident, $n:ident) => {
        if let Some(col) = &$self.$field {
            if col.len() != $n {
                return Err(shape(
                    "PointCloud",
                    format!(
                        "column `{}` has {} entries, expected {}",
                        stringify!($field),
                        col.len(),
                        $n
                    ),
                ));
            }
        }
    };
}

macro_rules! subset_column {
    ($self:ident, $field:ident, $idx:ident) => {
        $self
            .$field
            .as_ref()
            .map(|c| $idx.iter().map(|&i| c[i]).collect())
    };
}

impl PointCloud {
    pub fn from_positions(positions: Vec<[f64; 3]>) -> Self {
        PointCloud {
            positions,
            ..Default::default()
        }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Check the column invariants: equal lengths, finite positions and
    /// probabilities within [0, 1].
    pub fn validate(&self) -> Result<()> {
        let n = self.positions.len();
        check_column!(self, reflectance, n);
        check_column!(self, deviation, n);
        check_column!(self, labels, n);
        check_column!(self, wood_probability, n);
        check_column!(self, tree_id, n);
        check_column!(self, ground, n);
        if let Some(i) = self
            .positions
            .iter()
            .position(|p| !p.iter().all(|c| c.is_finite()))
        {
            return Err(Error::InvalidArgument(format!(
                "point {i} has a non-finite coordinate"
            )));
        }
        if let Some(probs) = &self.wood_probability {
            if let Some(i) = probs.iter().position(|p| !(0.0..=1.0).contains(p)) {
                return Err(Error::InvalidArgument(format!(
                    "point {i} has wood probability {} outside [0, 1]",
                    probs[i]
                )));
            }
        }
        Ok(())
    }

    /// New cloud holding the given points, in the given order, with every
    /// present column carried along.
    pub fn subset(&self, indices: &[usize]) -> PointCloud {
        PointCloud {
            positions: indices.iter().map(|&i| self.positions[i]).collect(),
            reflectance: subset_column!(self, reflectance, indices),
            reflectance_normalized: self.reflectance_normalized,
            deviation: subset_column!(self, deviation, indices),
            labels: subset_column!(self, labels, indices),
            wood_probability: subset_column!(self, wood_probability, indices),
            tree_id: subset_column!(self, tree_id, indices),
            ground: subset_column!(self, ground, indices),
        }
    }

    /// Split into (kept, dropped) index lists by a predicate over point indices.
    pub fn partition_indices(&self, mut keep: impl FnMut(usize) -> bool) -> (Vec<usize>, Vec<usize>) {
        (0..self.len()).partition(|&i| keep(i))
    }

    /// Append all points of `other`. Optional columns must be present in
    /// both clouds or in neither.
    pub fn extend(&mut self, other: &PointCloud) -> Result<()> {
        fn merge<T: Clone>(
            a: &mut Option<Vec<T>>,
            b: &Option<Vec<T>>,
            name: &str,
            empty: bool,
        ) -> Result<()> {
            match (a.as_mut(), b) {
                (Some(x), Some(y)) => x.extend_from_slice(y),
                (None, None) => {}
                (None, Some(y)) if empty => *a = Some(y.clone()),
                _ => {
                    return Err(Error::InvalidArgument(format!(
                        "cannot merge clouds: column `{name}` present in only one"
                    )))
                }
            }
            Ok(())
        }
        let empty = self.is_empty();
        merge(&mut self.reflectance, &other.reflectance, "reflectance", empty)?;
        merge(&mut self.deviation, &other.deviation, "deviation", empty)?;
        merge(&mut self.labels, &other.labels, "labels", empty)?;
        merge(
            &mut self.wood_probability,
            &other.wood_probability,
            "wood_probability",
            empty,
        )?;
        merge(&mut self.tree_id, &other.tree_id, "tree_id", empty)?;
        merge(&mut self.ground, &other.ground, "ground", empty)?;
        if empty {
            self.reflectance_normalized = other.reflectance_normalized;
        }
        self.positions.extend_from_slice(&other.positions);
        Ok(())
    }

    /// Axis-aligned bounds `(min, max)`; `None` for an empty cloud.
    pub fn bounds(&self) -> Option<([f64; 3], [f64; 3])> {
        let first = *self.positions.first()?;
        Some(self.positions.iter().fold((first, first), |(mut lo, mut hi), p| {
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
            (lo, hi)
        }))
    }
}

#[inline]
pub fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn validate_rejects_ragged_columns() {
        let mut c = PointCloud::from_positions(vec![[0.0; 3], [1.0; 3]]);
        c.reflectance = Some(vec![0.5]);
        assert!(matches!(c.validate(), Err(Error::Shape { .. })));
    }

    #[test]
    fn validate_rejects_bad_probability() {
        let mut c = PointCloud::from_positions(vec![[0.0; 3]]);
        c.wood_probability = Some(vec![1.5]);
        assert!(c.validate().is_err());
        c.wood_probability = Some(vec![1.0]);
        assert!(c.validate().is_ok());
    }

    #[test]
    fn subset_carries_present_columns_only() {
        let mut c = PointCloud::from_positions(vec![[0.0; 3], [1.0; 3], [2.0; 3]]);
        c.labels = Some(vec![ClassLabel::Leaf, ClassLabel::Wood, ClassLabel::Leaf]);
        let s = c.subset(&[2, 1]);
        assert_eq!(s.positions, vec![[2.0; 3], [1.0; 3]]);
        assert_eq!(s.labels, Some(vec![ClassLabel::Leaf, ClassLabel::Wood]));
        assert!(s.reflectance.is_none());
    }

    #[test]
    fn extend_requires_matching_columns() {
        let mut a = PointCloud::from_positions(vec![[0.0; 3]]);
        a.reflectance = Some(vec![1.0]);
        let b = PointCloud::from_positions(vec![[1.0; 3]]);
        assert!(a.extend(&b).is_err());
        let mut empty = PointCloud::default();
        empty.extend(&a).unwrap();
        assert_eq!(empty, a);
    }
}

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Integer cell of an axis-aligned voxel grid anchored at the origin.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct VoxelKey {
    pub i: i32,
    pub j: i32,
    pub k: i32,
}

impl VoxelKey {
    pub fn new(i: i32, j: i32, k: i32) -> Self {
        VoxelKey { i, j, k }
    }

    /// Centre of the cell in world coordinates.
    pub fn center(&self, voxel_size: f64) -> [f64; 3] {
        [
            (self.i as f64 + 0.5) * voxel_size,
            (self.j as f64 + 0.5) * voxel_size,
            (self.k as f64 + 0.5) * voxel_size,
        ]
    }
}

fn cell(c: f64, voxel_size: f64) -> Result<i32> {
    let f = libm::floor(c / voxel_size);
    if !(f >= i32::MIN as f64 && f <= i32::MAX as f64) {
        return Err(invalid(format!(
            "coordinate {c} at voxel size {voxel_size} is outside the grid range"
        )));
    }
    Ok(f as i32)
}

fn check_size(voxel_size: f64) -> Result<()> {
    if !(voxel_size > 0.0) || !voxel_size.is_finite() {
        return Err(invalid(format!("voxel size {voxel_size} must be positive")));
    }
    Ok(())
}

pub fn voxel_key(p: &[f64; 3], voxel_size: f64) -> Result<VoxelKey> {
    check_size(voxel_size)?;
    Ok(VoxelKey::new(
        cell(p[0], voxel_size)?,
        cell(p[1], voxel_size)?,
        cell(p[2], voxel_size)?,
    ))
}

/// `floor(coordinate / voxel_size)` per axis, one key per point.
pub fn voxel_keys(points: &[[f64; 3]], voxel_size: f64) -> Result<Vec<VoxelKey>> {
    check_size(voxel_size)?;
    points.iter().map(|p| voxel_key(p, voxel_size)).collect()
}

/// Occupied voxels in ascending key order, each with its point indices in
/// ascending order.
pub fn group_by_voxel(points: &[[f64; 3]], voxel_size: f64) -> Result<Vec<(VoxelKey, Vec<usize>)>> {
    let keys = voxel_keys(points, voxel_size)?;
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_unstable_by(|&a, &b| keys[a].cmp(&keys[b]).then(a.cmp(&b)));
    let mut groups: Vec<(VoxelKey, Vec<usize>)> = Vec::new();
    for i in order {
        match groups.last_mut() {
            Some((k, members)) if *k == keys[i] => members.push(i),
            _ => groups.push((keys[i], alloc::vec![i])),
        }
    }
    Ok(groups)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use proptest::prelude::*;

    #[test]
    fn origin_cell_and_boundaries() {
        assert_eq!(voxel_key(&[0.1, 0.1, 0.1], 2.0).unwrap(), VoxelKey::new(0, 0, 0));
        let keys = voxel_keys(&[[0.5, 0.0, 0.0], [2.5, 0.0, 0.0]], 2.0).unwrap();
        assert_eq!(keys[0].i, 0);
        assert_eq!(keys[1].i, 1);
        // floor(-0.1 / 2) = floor(-0.05) = -1
        assert_eq!(voxel_key(&[-0.1, 0.0, 0.0], 2.0).unwrap(), VoxelKey::new(-1, 0, 0));
    }

    #[test]
    fn rejects_non_positive_size() {
        assert!(voxel_keys(&[[0.0; 3]], 0.0).is_err());
        assert!(voxel_keys(&[[0.0; 3]], -1.0).is_err());
        assert!(voxel_keys(&[[1e300, 0.0, 0.0]], 1e-300).is_err());
    }

    #[test]
    fn grouping_is_a_sorted_partition() {
        let pts = vec![[3.0, 0.0, 0.0], [0.5, 0.5, 0.5], [3.5, 0.1, 0.0], [-0.5, 0.0, 0.0]];
        let groups = group_by_voxel(&pts, 1.0).unwrap();
        let keys: Vec<VoxelKey> = groups.iter().map(|g| g.0).collect();
        assert_eq!(
            keys,
            vec![VoxelKey::new(-1, 0, 0), VoxelKey::new(0, 0, 0), VoxelKey::new(3, 0, 0)]
        );
        assert_eq!(groups[2].1, vec![0, 2]);
    }

    proptest! {
        #[test]
        fn keys_are_floor_division(x in -1e4f64..1e4, y in -1e4f64..1e4, z in -1e4f64..1e4, s in 0.01f64..10.0) {
            let k = voxel_key(&[x, y, z], s).unwrap();
            prop_assert_eq!(k.i as f64, (x / s).floor());
            prop_assert_eq!(k.j as f64, (y / s).floor());
            prop_assert_eq!(k.k as f64, (z / s).floor());
        }

        // Integer-valued coordinates and power-of-two sizes keep the shift exact.
        #[test]
        fn shift_by_one_voxel_increments_key(xs in proptest::collection::vec((-500i32..500, -500i32..500, -500i32..500), 1..50), e in -3i32..4, axis in 0usize..3) {
            let size = 2f64.powi(e);
            let pts: Vec<[f64; 3]> = xs.iter().map(|&(a, b, c)| [a as f64 * 0.125, b as f64 * 0.125, c as f64 * 0.125]).collect();
            let shifted: Vec<[f64; 3]> = pts.iter().map(|p| { let mut q = *p; q[axis] += size; q }).collect();
            let k0 = voxel_keys(&pts, size).unwrap();
            let k1 = voxel_keys(&shifted, size).unwrap();
            for (a, b) in k0.iter().zip(&k1) {
                let (da, db) = ([a.i, a.j, a.k], [b.i, b.j, b.k]);
                for ax in 0..3 {
                    prop_assert_eq!(db[ax] - da[ax], if ax == axis { 1 } else { 0 });
                }
            }
        }
    }
}

use alloc::vec::Vec;

use super::voxel::{voxel_key, VoxelKey};
use crate::cloud::dist2;
use crate::error::Result;

/// Uniform grid hash in compressed form: point indices sorted by cell, with
/// the occupied cell keys and their offsets. Lookups are binary searches.
#[derive(Debug, Clone)]
pub struct GridIndex {
    cell_size: f64,
    keys: Vec<VoxelKey>,
    offsets: Vec<u32>,
    order: Vec<u32>,
}

impl GridIndex {
    pub fn new(points: &[[f64; 3]], cell_size: f64) -> Result<Self> {
        let mut keyed: Vec<(VoxelKey, u32)> = points
            .iter()
            .enumerate()
            .map(|(i, p)| voxel_key(p, cell_size).map(|k| (k, i as u32)))
            .collect::<Result<_>>()?;
        keyed.sort_unstable();
        let mut keys = Vec::new();
        let mut offsets = Vec::new();
        let mut order = Vec::with_capacity(keyed.len());
        for (pos, (k, i)) in keyed.into_iter().enumerate() {
            if keys.last() != Some(&k) {
                keys.push(k);
                offsets.push(pos as u32);
            }
            order.push(i);
        }
        offsets.push(order.len() as u32);
        Ok(GridIndex {
            cell_size,
            keys,
            offsets,
            order,
        })
    }

    pub fn cell_size(&self) -> f64 {
        self.cell_size
    }

    /// Point indices in one cell.
    pub fn cell(&self, key: &VoxelKey) -> &[u32] {
        match self.keys.binary_search(key) {
            Ok(c) => &self.order[self.offsets[c] as usize..self.offsets[c + 1] as usize],
            Err(_) => &[],
        }
    }

    /// Points within the closed ball around `q`, as `(index, squared distance)`
    /// sorted by distance then index, truncated to `max_count`.
    pub fn within_radius(
        &self,
        points: &[[f64; 3]],
        q: &[f64; 3],
        radius: f64,
        max_count: usize,
    ) -> Vec<(usize, f64)> {
        let mut out = Vec::new();
        self.within_radius_into(points, q, radius, max_count, &mut out);
        out
    }

    pub fn within_radius_into(
        &self,
        points: &[[f64; 3]],
        q: &[f64; 3],
        radius: f64,
        max_count: usize,
        out: &mut Vec<(usize, f64)>,
    ) {
        out.clear();
        let r2 = radius * radius;
        let lo: [i64; 3] = core::array::from_fn(|a| libm::floor((q[a] - radius) / self.cell_size) as i64);
        let hi: [i64; 3] = core::array::from_fn(|a| libm::floor((q[a] + radius) / self.cell_size) as i64);
        for i in lo[0]..=hi[0] {
            for j in lo[1]..=hi[1] {
                for k in lo[2]..=hi[2] {
                    let key = VoxelKey::new(i as i32, j as i32, k as i32);
                    for &p in self.cell(&key) {
                        let d2 = dist2(&points[p as usize], q);
                        if d2 <= r2 {
                            out.push((p as usize, d2));
                        }
                    }
                }
            }
        }
        out.sort_unstable_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        out.truncate(max_count);
    }
}

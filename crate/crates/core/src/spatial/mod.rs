//! Voxel keys, neighbour queries and along-cloud shortest paths.
//!
//! kNN goes through a kd-tree; radius and voxel work goes through a sorted
//! uniform grid. Both are exact and break distance ties by ascending point
//! index, so results never depend on build order.

mod graph;
mod grid;
mod kdtree;
mod voxel;

pub use graph::{dijkstra, shortest_path_lengths, NeighborGraph, PathLengths, DEFAULT_GRAPH_K};
pub use grid::GridIndex;
pub use kdtree::KdTree;
pub use voxel::{group_by_voxel, voxel_key, voxel_keys, VoxelKey};

use alloc::vec::Vec;

use crate::error::{invalid, Result};

/// The `k` nearest points to `query`, nearest first.
pub fn knn_query(points: &[[f64; 3]], query: &[f64; 3], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > points.len() {
        return Err(invalid(alloc::format!(
            "knn_query: k = {k} must be in 1..={}",
            points.len()
        )));
    }
    let tree = KdTree::new(points);
    Ok(tree.knn(query, k).into_iter().map(|(i, _)| i).collect())
}

/// Points within the closed ball of `radius` around `query`; when more than
/// `max_count` qualify, the nearest `max_count` are returned, nearest first.
pub fn radius_query(
    points: &[[f64; 3]],
    query: &[f64; 3],
    radius: f64,
    max_count: usize,
) -> Result<Vec<usize>> {
    if !(radius > 0.0) || !radius.is_finite() {
        return Err(invalid(alloc::format!("radius_query: radius {radius} must be positive")));
    }
    let grid = GridIndex::new(points, radius)?;
    Ok(grid
        .within_radius(points, query, radius, max_count)
        .into_iter()
        .map(|(i, _)| i)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cloud::dist2;
    use crate::rng::rng_from_seed;
    use alloc::vec;
    use rand::Rng as _;

    fn random_points(n: usize, seed: u64) -> Vec<[f64; 3]> {
        let mut rng = rng_from_seed(seed);
        (0..n)
            .map(|_| [rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>()])
            .collect()
    }

    /// Exhaustive oracle: sort every point by (distance, index).
    fn brute_sorted(points: &[[f64; 3]], q: &[f64; 3]) -> Vec<(usize, f64)> {
        let mut all: Vec<(usize, f64)> = points.iter().enumerate().map(|(i, p)| (i, dist2(p, q))).collect();
        all.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        all
    }

    #[test]
    fn knn_on_a_line() {
        let pts: Vec<[f64; 3]> = (0..10).map(|i| [i as f64, 0.0, 0.0]).collect();
        assert_eq!(knn_query(&pts, &[0.0, 0.0, 0.0], 3).unwrap(), vec![0, 1, 2]);
    }

    #[test]
    fn knn_tie_prefers_lower_index() {
        let pts = vec![[1.0, 0.0, 0.0], [-1.0, 0.0, 0.0]];
        assert_eq!(knn_query(&pts, &[0.0; 3], 1).unwrap(), vec![0]);
        let pts = vec![[-1.0, 0.0, 0.0], [1.0, 0.0, 0.0]];
        assert_eq!(knn_query(&pts, &[0.0; 3], 1).unwrap(), vec![0]);
    }

    #[test]
    fn knn_rejects_k_above_count() {
        let pts = random_points(5, 1);
        assert!(knn_query(&pts, &[0.0; 3], 6).is_err());
        assert!(knn_query(&pts, &[0.0; 3], 0).is_err());
    }

    #[test]
    fn knn_matches_exhaustive_scan_1000_points() {
        let pts = random_points(1000, 99);
        let tree = KdTree::new(&pts);
        let mut rng = rng_from_seed(5);
        for _ in 0..50 {
            let q = [rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>()];
            let got: Vec<usize> = tree.knn(&q, 32).into_iter().map(|(i, _)| i).collect();
            let want: Vec<usize> = brute_sorted(&pts, &q).into_iter().take(32).map(|(i, _)| i).collect();
            assert_eq!(got, want);
        }
    }

    #[test]
    fn knn_and_radius_agree_with_oracle_over_seeds() {
        for seed in 0..100u64 {
            let n = 50 + (seed as usize * 19) % 1950;
            let mut pts = random_points(n, seed);
            // Lattice duplicates force exact distance ties.
            for p in pts.iter_mut().step_by(7) {
                for c in p.iter_mut() {
                    *c = (*c * 8.0).round() / 8.0;
                }
            }
            let tree = KdTree::new(&pts);
            let grid = GridIndex::new(&pts, 0.15).unwrap();
            let q = pts[(seed as usize * 31) % n];
            let oracle = brute_sorted(&pts, &q);
            let k = 1 + (seed as usize) % 40;
            let got: Vec<usize> = tree.knn(&q, k.min(n)).into_iter().map(|(i, _)| i).collect();
            let want: Vec<usize> = oracle.iter().take(k.min(n)).map(|&(i, _)| i).collect();
            assert_eq!(got, want, "knn seed {seed}");

            let r = 0.15;
            let got: Vec<usize> = grid.within_radius(&pts, &q, r, 20).into_iter().map(|(i, _)| i).collect();
            let want: Vec<usize> = oracle
                .iter()
                .filter(|&&(_, d)| d <= r * r)
                .take(20)
                .map(|&(i, _)| i)
                .collect();
            assert_eq!(got, want, "radius seed {seed}");
        }
    }

    #[test]
    fn radius_query_empty_and_capped() {
        let pts = vec![[5.0, 0.0, 0.0], [6.0, 0.0, 0.0]];
        assert!(radius_query(&pts, &[0.0; 3], 1.0, 10).unwrap().is_empty());

        let pts: Vec<[f64; 3]> = [0.5, 0.1, 0.4, 0.2, 0.3, 2.0]
            .iter()
            .map(|&x| [x, 0.0, 0.0])
            .collect();
        // Oracle: inside radius 1 are x = 0.5, 0.1, 0.4, 0.2, 0.3; the nearest three.
        assert_eq!(radius_query(&pts, &[0.0; 3], 1.0, 3).unwrap(), vec![1, 3, 4]);
    }

    #[test]
    fn radius_query_is_a_closed_ball() {
        let pts = vec![[1.0, 0.0, 0.0], [0.0, 0.0, 2.0]];
        assert_eq!(radius_query(&pts, &[0.0; 3], 1.0, 10).unwrap(), vec![0]);
        assert!(radius_query(&pts, &[0.0; 3], 0.0, 10).is_err());
    }
}

use alloc::collections::BinaryHeap;
use alloc::vec;
use alloc::vec::Vec;
use core::cmp::Ordering;

use super::kdtree::KdTree;
use crate::error::{Error, Result};

/// Neighbours per point when building the path-length graph.
pub const DEFAULT_GRAPH_K: usize = 8;

/// Undirected weighted adjacency in CSR form. Edge weights are Euclidean
/// distances; there are no self loops and no zero-length edges.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborGraph {
    offsets: Vec<usize>,
    targets: Vec<u32>,
    weights: Vec<f64>,
}

impl NeighborGraph {
    /// Connect every point to its `k` nearest distinct neighbours and
    /// symmetrise (an edge exists if either endpoint selected the other).
    /// Points must be pairwise distinct.
    pub fn knn_symmetric(points: &[[f64; 3]], k: usize) -> Self {
        let n = points.len();
        let tree = KdTree::new(points);
        let mut edges: Vec<(u32, u32, f64)> = Vec::with_capacity(2 * n * k);
        for (i, p) in points.iter().enumerate() {
            for (j, d2) in tree.knn(p, (k + 1).min(n)) {
                if j != i && d2 > 0.0 {
                    let w = libm::sqrt(d2);
                    edges.push((i as u32, j as u32, w));
                    edges.push((j as u32, i as u32, w));
                }
            }
        }
        Self::from_directed_edges(n, edges)
    }

    /// Build from directed edges; duplicates collapse to one.
    pub fn from_directed_edges(n: usize, mut edges: Vec<(u32, u32, f64)>) -> Self {
        edges.sort_unstable_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        edges.dedup_by(|a, b| a.0 == b.0 && a.1 == b.1);
        let mut offsets = vec![0usize; n + 1];
        for e in &edges {
            offsets[e.0 as usize + 1] += 1;
        }
        for i in 0..n {
            offsets[i + 1] += offsets[i];
        }
        NeighborGraph {
            offsets,
            targets: edges.iter().map(|e| e.1).collect(),
            weights: edges.iter().map(|e| e.2).collect(),
        }
    }

    pub fn node_count(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn neighbors(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let r = self.offsets[i]..self.offsets[i + 1];
        self.targets[r.clone()]
            .iter()
            .zip(&self.weights[r])
            .map(|(&t, &w)| (t as usize, w))
    }
}

#[derive(Clone, Copy, PartialEq)]
struct State {
    dist: f64,
    node: usize,
}

impl Eq for State {}

impl Ord for State {
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .dist
            .total_cmp(&self.dist)
            .then_with(|| other.node.cmp(&self.node))
    }
}

impl PartialOrd for State {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Single-source shortest path distances; `None` for unreachable nodes.
pub fn dijkstra(graph: &NeighborGraph, source: usize) -> Vec<Option<f64>> {
    let n = graph.node_count();
    let mut dist = vec![f64::INFINITY; n];
    let mut heap = BinaryHeap::new();
    dist[source] = 0.0;
    heap.push(State { dist: 0.0, node: source });
    while let Some(State { dist: d, node }) = heap.pop() {
        if d > dist[node] {
            continue;
        }
        for (next, w) in graph.neighbors(node) {
            let nd = d + w;
            if nd < dist[next] {
                dist[next] = nd;
                heap.push(State { dist: nd, node: next });
            }
        }
    }
    dist.into_iter()
        .map(|d| if d.is_finite() { Some(d) } else { None })
        .collect()
}

/// Along-cloud distance from the lowest point to every point.
#[derive(Debug, Clone, PartialEq)]
pub struct PathLengths {
    /// Path length in metres; `f64::INFINITY` where unreachable.
    pub lengths: Vec<f64>,
    pub reachable: Vec<bool>,
    /// Index of the source (minimum z, lowest index on ties).
    pub source: usize,
}

impl PathLengths {
    pub fn unreachable_count(&self) -> usize {
        self.reachable.iter().filter(|r| !**r).count()
    }
}

/// Dijkstra distances from the minimum-z point over a symmetric kNN graph.
///
/// Coincident points are merged before the graph is built and share the
/// distance of their representative.
pub fn shortest_path_lengths(points: &[[f64; 3]], graph_k: usize) -> Result<PathLengths> {
    if points.is_empty() {
        return Err(Error::InvalidArgument("shortest_path_lengths: empty cloud".into()));
    }
    if graph_k == 0 {
        return Err(Error::InvalidArgument("shortest_path_lengths: graph_k must be positive".into()));
    }
    let source = (0..points.len())
        .min_by(|&a, &b| points[a][2].total_cmp(&points[b][2]).then(a.cmp(&b)))
        .unwrap();

    // Merge exact duplicates.
    let mut order: Vec<usize> = (0..points.len()).collect();
    let bits = |p: &[f64; 3]| [p[0].to_bits(), p[1].to_bits(), p[2].to_bits()];
    order.sort_unstable_by(|&a, &b| bits(&points[a]).cmp(&bits(&points[b])).then(a.cmp(&b)));
    let mut rep = vec![0usize; points.len()];
    let mut unique: Vec<[f64; 3]> = Vec::new();
    for (pos, &i) in order.iter().enumerate() {
        if pos == 0 || points[order[pos - 1]] != points[i] {
            unique.push(points[i]);
        }
        rep[i] = unique.len() - 1;
    }

    let graph = NeighborGraph::knn_symmetric(&unique, graph_k);
    let dist = dijkstra(&graph, rep[source]);
    let lengths: Vec<f64> = rep.iter().map(|&r| dist[r].unwrap_or(f64::INFINITY)).collect();
    let reachable = lengths.iter().map(|d| d.is_finite()).collect();
    Ok(PathLengths {
        lengths,
        reachable,
        source,
    })
}

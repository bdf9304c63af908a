//! Undirected propagation topology of a thread and its symmetric
//! normalization `D^{-1/2} A D^{-1/2}` (self-loops included in `A`).

use crate::dataio::Event;
use crate::numcore::{RngStreams, Stream, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct PropagationGraph {
    n: usize,
    /// Undirected reply edges `(i, j)` with `i < j`, sorted.
    edges: Vec<(usize, usize)>,
}

impl PropagationGraph {
    /// Builds a graph from explicit edges; self-loops and duplicates are dropped.
    pub fn from_edges(n: usize, edges: impl IntoIterator<Item = (usize, usize)>) -> Self {
        let mut e: Vec<(usize, usize)> = edges
            .into_iter()
            .filter(|&(i, j)| i != j && i < n && j < n)
            .map(|(i, j)| (i.min(j), i.max(j)))
            .collect();
        e.sort_unstable();
        e.dedup();
        Self { n, edges: e }
    }

    pub fn node_count(&self) -> usize {
        self.n
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    /// 0/1 adjacency with ones on the diagonal.
    pub fn adjacency(&self) -> Tensor {
        let mut a = Tensor::identity(self.n);
        for &(i, j) in &self.edges {
            a.set(i, j, 1.0);
            a.set(j, i, 1.0);
        }
        a
    }

    /// Row sums of the self-looped adjacency.
    pub fn degrees(&self) -> Vec<usize> {
        let mut d = vec![1; self.n];
        for &(i, j) in &self.edges {
            d[i] += 1;
            d[j] += 1;
        }
        d
    }

    pub fn normalized(&self) -> Tensor {
        normalize(self)
    }
}

pub fn build_graph(event: &Event) -> PropagationGraph {
    let edges = event
        .parents()
        .iter()
        .enumerate()
        .filter_map(|(child, parent)| parent.map(|p| (p, child)));
    PropagationGraph::from_edges(event.len(), edges)
}

/// `Â[i][j] = A[i][j] / √(dᵢ dⱼ)`
pub fn normalize(g: &PropagationGraph) -> Tensor {
    let inv_sqrt: Vec<f64> = g.degrees().iter().map(|&d| 1.0 / (d as f64).sqrt()).collect();
    let mut a = Tensor::zeros(&[g.n, g.n]);
    for i in 0..g.n {
        a.set(i, i, inv_sqrt[i] * inv_sqrt[i]);
    }
    for &(i, j) in &g.edges {
        let v = inv_sqrt[i] * inv_sqrt[j];
        a.set(i, j, v);
        a.set(j, i, v);
    }
    a
}

/// Removes each undirected reply edge independently with probability `rate`.
///
/// One `dropedge` draw is consumed per edge regardless of `rate`, so the
/// stream position depends only on the graph.
pub fn dropedge(g: &PropagationGraph, rate: f64, streams: &mut RngStreams) -> PropagationGraph {
    let kept = g
        .edges
        .iter()
        .copied()
        .filter(|_| !streams.bernoulli(Stream::Dropedge, rate))
        .collect();
    PropagationGraph { n: g.n, edges: kept }
}

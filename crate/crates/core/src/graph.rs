//! Sparse directed interference networks.
//!
//! [`DirectedGraph`] is the observed network `E`, stored row-major (row `i`
//! lists the out-neighbours `j` with `E_ij = 1`). The transposed index is
//! built lazily the first time in-neighbour access is requested.
//! [`HiddenNetwork`] is a subgraph of an observed network that carries the
//! actual interference, and [`NormalizedLatent`] is its row-normalized
//! adjacency matrix.

use std::sync::OnceLock;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("self-loop on unit {0}")]
    SelfLoop(usize),
    #[error("edge ({tail}, {head}) references a unit outside 0..{n}")]
    OutOfRange { tail: usize, head: usize, n: usize },
    #[error("graph has {actual} units, expected {expected}")]
    SizeMismatch { expected: usize, actual: usize },
    #[error("hidden edge ({0}, {1}) is not present in the observed network")]
    NotSubgraph(usize, usize),
}

/// Compressed sparse row pattern with sorted, deduplicated columns.
#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct Csr {
    pub(crate) row_ptr: Vec<usize>,
    pub(crate) cols: Vec<usize>,
}

impl Csr {
    /// Builds the pattern from (row, col) pairs. Returns the number of
    /// duplicates that were collapsed.
    fn from_pairs(n: usize, pairs: &mut Vec<(usize, usize)>) -> (Self, usize) {
        pairs.sort_unstable();
        let before = pairs.len();
        pairs.dedup();
        let duplicates = before - pairs.len();
        let mut row_ptr = vec![0usize; n + 1];
        for &(i, _) in pairs.iter() {
            row_ptr[i + 1] += 1;
        }
        for i in 0..n {
            row_ptr[i + 1] += row_ptr[i];
        }
        let cols = pairs.iter().map(|&(_, j)| j).collect();
        (Csr { row_ptr, cols }, duplicates)
    }

    fn empty(n: usize) -> Self {
        Csr {
            row_ptr: vec![0; n + 1],
            cols: Vec::new(),
        }
    }

    #[inline]
    pub(crate) fn row(&self, i: usize) -> &[usize] {
        &self.cols[self.row_ptr[i]..self.row_ptr[i + 1]]
    }

    pub(crate) fn n(&self) -> usize {
        self.row_ptr.len() - 1
    }

    fn transpose(&self) -> Csr {
        let n = self.n();
        let mut row_ptr = vec![0usize; n + 1];
        for &j in &self.cols {
            row_ptr[j + 1] += 1;
        }
        for i in 0..n {
            row_ptr[i + 1] += row_ptr[i];
        }
        let mut next = row_ptr.clone();
        let mut cols = vec![0usize; self.cols.len()];
        for i in 0..n {
            for &j in self.row(i) {
                cols[next[j]] = i;
                next[j] += 1;
            }
        }
        Csr { row_ptr, cols }
    }

    fn contains(&self, i: usize, j: usize) -> bool {
        self.row(i).binary_search(&j).is_ok()
    }
}

/// Observed binary directed network without self-loops.
#[derive(Debug, Clone)]
pub struct DirectedGraph {
    adjacency: Csr,
    out_degrees: Vec<usize>,
    in_degrees: Vec<usize>,
    transposed: OnceLock<Csr>,
}

impl PartialEq for DirectedGraph {
    fn eq(&self, other: &Self) -> bool {
        self.adjacency == other.adjacency
    }
}

/// Outcome of a power-iteration norm estimate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormEstimate {
    pub value: f64,
    pub iterations: usize,
    pub converged: bool,
}

impl DirectedGraph {
    /// Builds a graph from `(source, target)` pairs. Duplicate edges are
    /// collapsed silently; use [`DirectedGraph::from_edge_list_counted`] to
    /// learn how many were dropped.
    pub fn from_edge_list(edges: &[(usize, usize)], n: usize) -> Result<Self, GraphError> {
        Self::from_edge_list_counted(edges, n).map(|(g, _)| g)
    }

    pub fn from_edge_list_counted(
        edges: &[(usize, usize)],
        n: usize,
    ) -> Result<(Self, usize), GraphError> {
        for &(s, t) in edges {
            if s >= n || t >= n {
                return Err(GraphError::OutOfRange {
                    tail: s,
                    head: t,
                    n,
                });
            }
            if s == t {
                return Err(GraphError::SelfLoop(s));
            }
        }
        let mut pairs = edges.to_vec();
        let (adjacency, duplicates) = Csr::from_pairs(n, &mut pairs);
        Ok((Self::from_csr(adjacency), duplicates))
    }

    fn from_csr(adjacency: Csr) -> Self {
        let n = adjacency.n();
        let out_degrees: Vec<usize> = (0..n).map(|i| adjacency.row(i).len()).collect();
        let mut in_degrees = vec![0usize; n];
        for &j in &adjacency.cols {
            in_degrees[j] += 1;
        }
        DirectedGraph {
            adjacency,
            out_degrees,
            in_degrees,
            transposed: OnceLock::new(),
        }
    }

    pub fn edgeless(n: usize) -> Self {
        Self::from_csr(Csr::empty(n))
    }

    pub fn n(&self) -> usize {
        self.out_degrees.len()
    }

    pub fn edge_count(&self) -> usize {
        self.adjacency.cols.len()
    }

    /// Out-degrees `N_i`.
    pub fn out_degrees(&self) -> &[usize] {
        &self.out_degrees
    }

    /// In-degrees `M_i`.
    pub fn in_degrees(&self) -> &[usize] {
        &self.in_degrees
    }

    /// Units `j` with `E_ij = 1`, sorted.
    #[inline]
    pub fn out_neighbors(&self, i: usize) -> &[usize] {
        self.adjacency.row(i)
    }

    /// Units `j` with `E_ji = 1`, sorted.
    pub fn in_neighbors(&self, i: usize) -> &[usize] {
        self.transposed().row(i)
    }

    fn transposed(&self) -> &Csr {
        self.transposed.get_or_init(|| self.adjacency.transpose())
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.adjacency.contains(i, j)
    }

    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.n()).flat_map(move |i| self.out_neighbors(i).iter().map(move |&j| (i, j)))
    }

    pub fn is_symmetric(&self) -> bool {
        self.edges().all(|(i, j)| self.has_edge(j, i))
    }

    pub(crate) fn csr(&self) -> &Csr {
        &self.adjacency
    }

    /// Network density `sum_i N_i / n^2`.
    pub fn density(&self) -> f64 {
        let n = self.n() as f64;
        self.edge_count() as f64 / (n * n)
    }

    /// `out = E x`.
    pub fn mul_vec(&self, x: &[f64], out: &mut [f64]) {
        for (i, o) in out.iter_mut().enumerate() {
            *o = self.out_neighbors(i).iter().map(|&j| x[j]).sum();
        }
    }

    /// `out = E^T x`, computed by scattering along rows.
    pub fn mul_transpose_vec(&self, x: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
        for (i, &xi) in x.iter().enumerate() {
            if xi != 0.0 {
                for &j in self.out_neighbors(i) {
                    out[j] += xi;
                }
            }
        }
    }

    /// `out = E E^T x`; `scratch` must have length `n`.
    pub fn mul_gram_vec(&self, x: &[f64], scratch: &mut [f64], out: &mut [f64]) {
        self.mul_transpose_vec(x, scratch);
        self.mul_vec(scratch, out);
    }

    /// Largest singular value of `E` by power iteration on `E E^T`.
    ///
    /// The start vector is deterministic (all ones plus a small index ramp)
    /// so repeated calls agree.
    pub fn operator_norm_estimate(&self, tol: f64, max_iter: usize) -> NormEstimate {
        let n = self.n();
        if self.edge_count() == 0 || n == 0 {
            return NormEstimate {
                value: 0.0,
                iterations: 0,
                converged: true,
            };
        }
        let mut x: Vec<f64> = (0..n)
            .map(|i| 1.0 + (i as f64 + 1.0) / (n as f64 * 7.0))
            .collect();
        normalize(&mut x);
        let mut scratch = vec![0.0; n];
        let mut y = vec![0.0; n];
        let mut lambda = 0.0;
        for it in 1..=max_iter {
            self.mul_gram_vec(&x, &mut scratch, &mut y);
            let next: f64 = dot(&x, &y);
            let norm = normalize(&mut y);
            std::mem::swap(&mut x, &mut y);
            if norm == 0.0 {
                return NormEstimate {
                    value: 0.0,
                    iterations: it,
                    converged: true,
                };
            }
            if it > 1 && (next - lambda).abs() <= tol * next.abs() {
                return NormEstimate {
                    value: next.sqrt(),
                    iterations: it,
                    converged: true,
                };
            }
            lambda = next;
        }
        NormEstimate {
            value: lambda.max(0.0).sqrt(),
            iterations: max_iter,
            converged: false,
        }
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn normalize(x: &mut [f64]) -> f64 {
    let norm = dot(x, x).sqrt();
    if norm > 0.0 {
        x.iter_mut().for_each(|v| *v /= norm);
    }
    norm
}

/// Subgraph `Ẽ` of an observed network through which interference flows.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenNetwork {
    pub(crate) adjacency: Csr,
}

impl HiddenNetwork {
    /// Hidden network equal to its parent.
    pub fn full(parent: &DirectedGraph) -> Self {
        HiddenNetwork {
            adjacency: parent.csr().clone(),
        }
    }

    pub fn edgeless(n: usize) -> Self {
        HiddenNetwork {
            adjacency: Csr::empty(n),
        }
    }

    /// Builds a hidden network from explicit edges, checking that it is a
    /// subgraph of `parent`.
    pub fn from_edges(
        parent: &DirectedGraph,
        edges: &[(usize, usize)],
    ) -> Result<Self, GraphError> {
        let n = parent.n();
        for &(s, t) in edges {
            if s >= n || t >= n {
                return Err(GraphError::OutOfRange {
                    tail: s,
                    head: t,
                    n,
                });
            }
            if s == t {
                return Err(GraphError::SelfLoop(s));
            }
            if !parent.has_edge(s, t) {
                return Err(GraphError::NotSubgraph(s, t));
            }
        }
        Ok(Self::from_edges_unchecked(n, edges))
    }

    /// Builds a hidden network without a parent. Self-loops are still rejected.
    pub fn from_edges_standalone(n: usize, edges: &[(usize, usize)]) -> Result<Self, GraphError> {
        let g = DirectedGraph::from_edge_list(edges, n)?;
        Ok(HiddenNetwork::full(&g))
    }

    pub(crate) fn from_edges_unchecked(n: usize, edges: &[(usize, usize)]) -> Self {
        let mut pairs = edges.to_vec();
        let (adjacency, _) = Csr::from_pairs(n, &mut pairs);
        HiddenNetwork { adjacency }
    }

    pub fn n(&self) -> usize {
        self.adjacency.n()
    }

    pub fn edge_count(&self) -> usize {
        self.adjacency.cols.len()
    }

    #[inline]
    pub fn neighbors(&self, i: usize) -> &[usize] {
        self.adjacency.row(i)
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.adjacency.contains(i, j)
    }

    /// Hidden out-degrees `Ñ_i`.
    pub fn hidden_out_degrees(&self) -> Vec<usize> {
        (0..self.n()).map(|i| self.neighbors(i).len()).collect()
    }

    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.n()).flat_map(move |i| self.neighbors(i).iter().map(move |&j| (i, j)))
    }

    pub fn is_subgraph_of(&self, parent: &DirectedGraph) -> bool {
        self.n() == parent.n() && self.edges().all(|(i, j)| parent.has_edge(i, j))
    }

    pub fn to_graph(&self) -> DirectedGraph {
        DirectedGraph::from_csr(self.adjacency.clone())
    }

    /// Row-normalized adjacency `Q`. Rows of units with no hidden
    /// out-neighbours are zero.
    pub fn normalized_latent(&self) -> NormalizedLatent {
        let values = (0..self.n())
            .flat_map(|i| {
                let deg = self.neighbors(i).len();
                std::iter::repeat_n(1.0 / deg.max(1) as f64, deg)
            })
            .collect();
        NormalizedLatent {
            pattern: self.adjacency.clone(),
            values,
        }
    }
}

/// Row-normalized latent adjacency `Q_ij = Ẽ_ij / Ñ_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedLatent {
    pattern: Csr,
    values: Vec<f64>,
}

impl NormalizedLatent {
    pub fn n(&self) -> usize {
        self.pattern.n()
    }

    /// Nonzero `(j, Q_ij)` entries of row `i`.
    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let range = self.pattern.row_ptr[i]..self.pattern.row_ptr[i + 1];
        self.pattern.cols[range.clone()]
            .iter()
            .copied()
            .zip(self.values[range].iter().copied())
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.row(i).find(|&(c, _)| c == j).map_or(0.0, |(_, v)| v)
    }

    pub fn row_sum(&self, i: usize) -> f64 {
        self.row(i).map(|(_, v)| v).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_cycle_degrees() {
        let g = DirectedGraph::from_edge_list(&[(0, 1), (1, 0)], 2).unwrap();
        assert_eq!(g.out_degrees(), &[1, 1]);
        assert_eq!(g.in_degrees(), &[1, 1]);
        assert!(g.is_symmetric());
    }

    #[test]
    fn empty_graph() {
        let g = DirectedGraph::from_edge_list(&[], 5).unwrap();
        assert_eq!(g.out_degrees(), &[0; 5]);
        assert_eq!(g.in_degrees(), &[0; 5]);
        assert_eq!(g.density(), 0.0);
        let est = g.operator_norm_estimate(1e-12, 100);
        assert_eq!(est.value, 0.0);
    }

    #[test]
    fn rejects_self_loop_and_out_of_range() {
        assert_eq!(
            DirectedGraph::from_edge_list(&[(0, 0)], 1),
            Err(GraphError::SelfLoop(0))
        );
        assert!(matches!(
            DirectedGraph::from_edge_list(&[(0, 3)], 3),
            Err(GraphError::OutOfRange { head: 3, .. })
        ));
    }

    #[test]
    fn duplicates_collapse() {
        let (g, dups) =
            DirectedGraph::from_edge_list_counted(&[(0, 1), (0, 1), (1, 2), (0, 1)], 3).unwrap();
        assert_eq!(dups, 2);
        assert_eq!(g.edge_count(), 2);
        assert_eq!(g.density() * 9.0, 2.0);
    }

    #[test]
    fn in_neighbors_match_transpose() {
        let g = DirectedGraph::from_edge_list(&[(0, 2), (1, 2), (2, 0)], 3).unwrap();
        assert_eq!(g.in_neighbors(2), &[0, 1]);
        assert_eq!(g.in_neighbors(0), &[2]);
        assert!(g.in_neighbors(1).is_empty());
    }

    #[test]
    fn two_cycle_norm_is_one() {
        let g = DirectedGraph::from_edge_list(&[(0, 1), (1, 0)], 2).unwrap();
        let est = g.operator_norm_estimate(1e-12, 1000);
        assert!(est.converged);
        assert!((est.value - 1.0).abs() < 1e-9);
    }

    #[test]
    fn normalized_latent_rows() {
        let parent = DirectedGraph::from_edge_list(&[(0, 1), (1, 0), (1, 2), (2, 1)], 3).unwrap();
        let h = HiddenNetwork::from_edges(&parent, &[(0, 1), (1, 0), (1, 2)]).unwrap();
        let q = h.normalized_latent();
        assert_eq!(q.get(0, 1), 1.0);
        assert_eq!(q.get(1, 0), 0.5);
        assert_eq!(q.get(1, 2), 0.5);
        assert_eq!(q.row_sum(2), 0.0);
        assert_eq!(h.hidden_out_degrees(), vec![1, 2, 0]);
    }

    #[test]
    fn hidden_must_be_subgraph() {
        let parent = DirectedGraph::from_edge_list(&[(0, 1)], 2).unwrap();
        assert_eq!(
            HiddenNetwork::from_edges(&parent, &[(1, 0)]),
            Err(GraphError::NotSubgraph(1, 0))
        );
    }
}

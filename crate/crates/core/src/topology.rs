//! Communication graph, consensus weight matrix, and mixing matrix.
//!
//! Nodes agree with their neighbors on Metropolis weights
//! `p_ij = -1/(max{deg_i, deg_j} + 1)`, with the diagonal closing every row
//! sum to zero. The resulting `P` is symmetric positive semidefinite with
//! `P·1 = 0` and, on a connected graph, a one-dimensional null space; the
//! mixing matrix `W = I - P` is doubly stochastic.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::linalg::symmetric_eigenvalues;
use crate::scalar::Scalar;

/// Undirected connected graph over nodes `0..node_count`.
///
/// Edges are stored as `(i, j)` with `i < j`, sorted, so two graphs compare
/// equal exactly when they have the same edge set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Graph {
    node_count: usize,
    edges: Vec<(usize, usize)>,
    neighbors: Vec<Vec<usize>>,
}

impl Graph {
    /// Random connected graph with exactly `edge_count` edges, deterministic
    /// per seed.
    ///
    /// A random spanning tree is drawn first (shuffled node order, each node
    /// attaches to a uniformly chosen earlier one), then the remaining edges
    /// are sampled uniformly without replacement from the non-edges.
    pub fn generate(node_count: usize, edge_count: usize, seed: u64) -> Result<Graph> {
        if node_count == 0 {
            return Err(Error::InvalidParameter("graph needs at least one node".into()));
        }
        let min_edges = node_count - 1;
        let max_edges = node_count * (node_count - 1) / 2;
        if edge_count < min_edges || edge_count > max_edges {
            return Err(Error::InvalidParameter(format!(
                "edge count {edge_count} infeasible for {node_count} nodes \
                 (need {min_edges}..={max_edges})"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..node_count).collect();
        order.shuffle(&mut rng);
        let mut edges: Vec<(usize, usize)> = Vec::with_capacity(edge_count);
        for idx in 1..node_count {
            let parent = order[rng.random_range(0..idx)];
            let child = order[idx];
            edges.push((parent.min(child), parent.max(child)));
        }
        let tree: BTreeSet<(usize, usize)> = edges.iter().copied().collect();
        let mut pool: Vec<(usize, usize)> = (0..node_count)
            .flat_map(|i| ((i + 1)..node_count).map(move |j| (i, j)))
            .filter(|e| !tree.contains(e))
            .collect();
        // Partial Fisher-Yates: the first `extra` slots become a uniform
        // sample without replacement.
        let extra = edge_count - edges.len();
        for k in 0..extra {
            let pick = rng.random_range(k..pool.len());
            pool.swap(k, pick);
        }
        edges.extend_from_slice(&pool[..extra]);
        Graph::from_edges(node_count, edges)
    }

    /// Builds a graph from an explicit edge list, validating every invariant
    /// (indices in range, no self-loops, no duplicates, connected).
    pub fn from_edges(node_count: usize, edges: Vec<(usize, usize)>) -> Result<Graph> {
        if node_count == 0 {
            return Err(Error::InvalidParameter("graph needs at least one node".into()));
        }
        let mut canon: Vec<(usize, usize)> = Vec::with_capacity(edges.len());
        for (a, b) in edges {
            if a == b {
                return Err(Error::InvalidParameter(format!("self-loop at node {a}")));
            }
            if a >= node_count || b >= node_count {
                return Err(Error::InvalidParameter(format!(
                    "edge ({a}, {b}) out of range for {node_count} nodes"
                )));
            }
            canon.push((a.min(b), a.max(b)));
        }
        canon.sort_unstable();
        if canon.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidParameter("duplicate edge".into()));
        }
        let mut neighbors = vec![Vec::new(); node_count];
        for &(a, b) in &canon {
            neighbors[a].push(b);
            neighbors[b].push(a);
        }
        for list in &mut neighbors {
            list.sort_unstable();
        }
        let g = Graph {
            node_count,
            edges: canon,
            neighbors,
        };
        if !g.is_connected() {
            return Err(Error::InvalidParameter("graph is not connected".into()));
        }
        Ok(g)
    }

    pub fn node_count(&self) -> usize {
        self.node_count
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    /// Edges as `(i, j)` pairs with `i < j`, sorted.
    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    /// Sorted neighbor list of node `i`.
    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }

    pub fn degree(&self, i: usize) -> usize {
        self.neighbors[i].len()
    }

    fn is_connected(&self) -> bool {
        // Breadth-first traversal from node 0.
        let mut seen = vec![false; self.node_count];
        let mut queue = std::collections::VecDeque::from([0usize]);
        seen[0] = true;
        let mut count = 1;
        while let Some(i) = queue.pop_front() {
            for &j in &self.neighbors[i] {
                if !seen[j] {
                    seen[j] = true;
                    count += 1;
                    queue.push_back(j);
                }
            }
        }
        count == self.node_count
    }

    /// Plain-text edge list: a `N E` header line, then one `i j` pair per
    /// line, 0-indexed.
    pub fn to_edge_list(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{} {}", self.node_count, self.edges.len());
        for &(a, b) in &self.edges {
            let _ = writeln!(out, "{a} {b}");
        }
        out
    }

    /// Parses the edge-list format produced by [`Graph::to_edge_list`].
    pub fn parse_edge_list(text: &str) -> Result<Graph> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines
            .next()
            .ok_or_else(|| Error::Data("empty edge-list file".into()))?;
        let mut parts = header.split_whitespace();
        let node_count: usize = parts
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Data(format!("bad edge-list header: {header:?}")))?;
        let edge_count: usize = parts
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Data(format!("bad edge-list header: {header:?}")))?;
        if parts.next().is_some() {
            return Err(Error::Data(format!("bad edge-list header: {header:?}")));
        }
        let mut edges = Vec::with_capacity(edge_count);
        for line in lines {
            let mut parts = line.split_whitespace();
            let a: usize = parts
                .next()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::Data(format!("bad edge line: {line:?}")))?;
            let b: usize = parts
                .next()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::Data(format!("bad edge line: {line:?}")))?;
            if parts.next().is_some() {
                return Err(Error::Data(format!("bad edge line: {line:?}")));
            }
            edges.push((a, b));
        }
        if edges.len() != edge_count {
            return Err(Error::Data(format!(
                "edge-list header promises {edge_count} edges, found {}",
                edges.len()
            )));
        }
        Graph::from_edges(node_count, edges)
    }

    pub fn write_edge_list(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_edge_list())?;
        Ok(())
    }

    pub fn read_edge_list(path: &Path) -> Result<Graph> {
        let text = std::fs::read_to_string(path)?;
        Graph::parse_edge_list(&text)
    }
}

/// Symmetric consensus weight matrix `P`.
#[derive(Debug, Clone)]
pub struct WeightMatrix<S: Scalar> {
    p: Array2<S>,
}

impl<S: Scalar> WeightMatrix<S> {
    /// Metropolis weights: `p_ij = -1/(max{deg_i, deg_j} + 1)` on edges, zero
    /// otherwise, diagonal set so each row sums to zero.
    pub fn metropolis(g: &Graph) -> WeightMatrix<S> {
        let n = g.node_count();
        let mut p = Array2::<S>::zeros((n, n));
        for &(i, j) in g.edges() {
            let w = -S::one() / S::c((g.degree(i).max(g.degree(j)) + 1) as f64);
            p[[i, j]] = w;
            p[[j, i]] = w;
        }
        for i in 0..n {
            let mut diag = S::zero();
            for &j in g.neighbors(i) {
                diag = diag - p[[i, j]];
            }
            p[[i, i]] = diag;
        }
        WeightMatrix { p }
    }

    pub fn p(&self) -> &Array2<S> {
        &self.p
    }

    pub fn node_count(&self) -> usize {
        self.p.nrows()
    }

    /// Largest and smallest nonzero eigenvalues of `P`.
    ///
    /// The spectrum of a valid weight matrix on a connected graph is
    /// `0 = λ₁ < λ₂ ≤ … ≤ λ_N ≤ 2`; this returns `(λ_N, λ₂)`.
    pub fn spectral_bounds(&self) -> Result<(S, S)> {
        let eig = symmetric_eigenvalues(&self.p)?;
        let largest = *eig.last().expect("nonempty spectrum");
        let cutoff = S::c(1e-8) * largest.max(S::one());
        let smallest_nonzero = eig
            .iter()
            .copied()
            .find(|&v| v > cutoff)
            .ok_or_else(|| {
                Error::InvalidParameter("weight matrix has no nonzero eigenvalue".into())
            })?;
        Ok((largest, smallest_nonzero))
    }

    /// Mixing matrix `W = I - P`.
    pub fn mixing(&self) -> MixingMatrix<S> {
        let n = self.p.nrows();
        let w = Array2::<S>::eye(n) - &self.p;
        MixingMatrix { w }
    }
}

/// Doubly stochastic mixing matrix `W = I - P` used by gradient-tracking
/// baselines.
#[derive(Debug, Clone)]
pub struct MixingMatrix<S: Scalar> {
    w: Array2<S>,
}

impl<S: Scalar> MixingMatrix<S> {
    pub fn w(&self) -> &Array2<S> {
        &self.w
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    type P64 = WeightMatrix<f64>;

    fn path3() -> Graph {
        Graph::from_edges(3, vec![(0, 1), (1, 2)]).unwrap()
    }

    #[test]
    fn generate_tiny_graph_is_connected() {
        let g = Graph::generate(3, 2, 7).unwrap();
        assert_eq!(g.edge_count(), 2);
        assert_eq!(g.node_count(), 3);
        // Only connected 3-node 2-edge shapes are paths/stars; connectivity
        // is the invariant that matters.
        assert!((0..3).all(|i| g.degree(i) >= 1));
    }

    #[test]
    fn generate_paper_scale_graph() {
        let g = Graph::generate(10, 30, 0).unwrap();
        assert_eq!(g.node_count(), 10);
        assert_eq!(g.edge_count(), 30);
    }

    #[test]
    fn generate_rejects_infeasible_edge_counts() {
        assert!(matches!(
            Graph::generate(4, 2, 1),
            Err(Error::InvalidParameter(_))
        ));
        assert!(matches!(
            Graph::generate(4, 7, 1),
            Err(Error::InvalidParameter(_))
        ));
    }

    #[test]
    fn generate_is_deterministic_per_seed() {
        let a = Graph::generate(12, 20, 42).unwrap();
        let b = Graph::generate(12, 20, 42).unwrap();
        let c = Graph::generate(12, 20, 43).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn from_edges_rejects_invalid_inputs() {
        assert!(Graph::from_edges(3, vec![(0, 0), (1, 2)]).is_err());
        assert!(Graph::from_edges(3, vec![(0, 3), (1, 2)]).is_err());
        assert!(Graph::from_edges(3, vec![(0, 1), (1, 0), (1, 2)]).is_err());
        assert!(Graph::from_edges(4, vec![(0, 1), (2, 3)]).is_err());
    }

    #[test]
    fn metropolis_weights_on_path() {
        let p = P64::metropolis(&path3());
        let p = p.p();
        // Degrees 1,2,1: shared weight -1/(max{1,2}+1) = -1/3.
        assert!((p[[0, 1]] + 1.0 / 3.0).abs() < 1e-15);
        assert!((p[[1, 2]] + 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(p[[0, 2]], 0.0);
        assert!((p[[0, 0]] - 1.0 / 3.0).abs() < 1e-15);
        assert!((p[[1, 1]] - 2.0 / 3.0).abs() < 1e-15);
        assert!((p[[2, 2]] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn metropolis_weight_for_degree_2_3_pair() {
        // 0-1, 0-2, 1-2, 1-3: node 0 has degree 2, node 1 degree 3.
        let g = Graph::from_edges(4, vec![(0, 1), (0, 2), (1, 2), (1, 3)]).unwrap();
        assert_eq!(g.degree(0), 2);
        assert_eq!(g.degree(1), 3);
        let p = P64::metropolis(&g);
        assert!((p.p()[[0, 1]] + 0.25).abs() < 1e-15);
    }

    #[test]
    fn path_spectrum_and_bounds() {
        let p = P64::metropolis(&path3());
        let eig = symmetric_eigenvalues(p.p()).unwrap();
        // Hand eigendecomposition of the 3x3 path matrix: {0, 1/3, 1}.
        assert!(eig[0].abs() < 1e-12);
        assert!((eig[1] - 1.0 / 3.0).abs() < 1e-12);
        assert!((eig[2] - 1.0).abs() < 1e-12);
        let (lmax, lmin) = p.spectral_bounds().unwrap();
        assert!((lmax - 1.0).abs() < 1e-12);
        assert!((lmin - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn two_node_weights_follow_the_formula() {
        // Both degrees 1, so the shared weight is -1/2 and the spectrum is
        // {0, 1} (2x2 closed form: eigenvalues 0 and twice the diagonal).
        let g = Graph::from_edges(2, vec![(0, 1)]).unwrap();
        let p = P64::metropolis(&g);
        assert_eq!(p.p()[[0, 1]], -0.5);
        let (lmax, lmin) = p.spectral_bounds().unwrap();
        assert!((lmax - 1.0).abs() < 1e-12);
        assert!((lmin - 1.0).abs() < 1e-12);
    }

    #[test]
    fn edge_list_round_trip_and_rejects() {
        let g = Graph::generate(10, 30, 0).unwrap();
        let text = g.to_edge_list();
        let parsed = Graph::parse_edge_list(&text).unwrap();
        assert_eq!(g, parsed);
        assert!(Graph::parse_edge_list("").is_err());
        assert!(Graph::parse_edge_list("3\n0 1\n1 2\n").is_err());
        assert!(Graph::parse_edge_list("3 2\n0 1\n").is_err());
        assert!(Graph::parse_edge_list("3 2\n0 1\n1 x\n").is_err());
    }

    proptest! {
        // The full weight-matrix contract on random connected graphs:
        // bitwise symmetry, zero row sums, PSD spectrum with exactly one
        // near-zero eigenvalue, and a doubly stochastic W = I - P.
        #[test]
        fn weight_matrix_contract(seed in 0u64..100, n in 2usize..15, slack in 0usize..20) {
            let max_edges = n * (n - 1) / 2;
            let e = (n - 1 + slack).min(max_edges);
            let g = Graph::generate(n, e, seed).unwrap();
            let wm = P64::metropolis(&g);
            let p = wm.p();
            for i in 0..n {
                for j in 0..n {
                    prop_assert_eq!(p[[i, j]], p[[j, i]]);
                }
                let row: f64 = p.row(i).sum();
                prop_assert!(row.abs() <= 1e-12);
            }
            let eig = symmetric_eigenvalues(p).unwrap();
            prop_assert!(eig[0] >= -1e-10);
            let near_zero = eig.iter().filter(|v| v.abs() <= 1e-10).count();
            prop_assert_eq!(near_zero, 1);
            prop_assert!(*eig.last().unwrap() <= 2.0 + 1e-12);
            let w = wm.mixing();
            for i in 0..n {
                let row: f64 = w.w().row(i).sum();
                let col: f64 = w.w().column(i).sum();
                prop_assert!((row - 1.0).abs() <= 1e-12);
                prop_assert!((col - 1.0).abs() <= 1e-12);
            }
        }
    }
}

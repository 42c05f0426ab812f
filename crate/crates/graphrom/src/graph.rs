//! Mesh-to-graph conversion and the symmetric normalized propagation
//! operator used by the graph-convolutional layers.

use std::collections::BTreeSet;

use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};
use crate::mesh::SurfaceMesh;
use crate::sparse::CsrMatrix;

/// Weighted undirected graph over mesh nodes, stored as sorted COO triplets
/// with both edge directions present and a unit self-loop on every node.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Graph {
    n_nodes: usize,
    /// `(src, dst, weight)`, sorted by `(src, dst)`.
    triplets: Vec<(usize, usize, f64)>,
    /// Start of each node's triplet run; `triplets[row_ptr[i]..row_ptr[i+1]]`
    /// are the entries with `src == i`.
    row_ptr: Vec<usize>,
    /// Mean Euclidean edge length used for the weight scale (0 when the
    /// graph was built without geometry).
    mean_edge_length: f64,
}

impl Graph {
    /// Build a graph from explicit triplets, validating the storage
    /// invariants: indices in range, finite positive weights, exact symmetry,
    /// a self-loop of weight 1 on every node, and no duplicate entries.
    pub fn from_triplets(
        n_nodes: usize,
        triplets: Vec<(usize, usize, f64)>,
        mean_edge_length: f64,
    ) -> Result<Self> {
        let mut sorted = triplets;
        sorted.sort_unstable_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));

        let mut seen_self_loop = vec![false; n_nodes];
        for w in sorted.windows(2) {
            if w[0].0 == w[1].0 && w[0].1 == w[1].1 {
                return Err(Error::InvalidGraph(format!(
                    "duplicate edge ({}, {})",
                    w[0].0, w[0].1
                )));
            }
        }
        for &(i, j, w) in &sorted {
            if i >= n_nodes || j >= n_nodes {
                return Err(Error::InvalidGraph(format!(
                    "edge ({i}, {j}) outside {n_nodes} nodes"
                )));
            }
            if !w.is_finite() || w <= 0.0 {
                return Err(Error::InvalidGraph(format!(
                    "edge ({i}, {j}) has non-positive weight {w}"
                )));
            }
            if i == j {
                if w != 1.0 {
                    return Err(Error::InvalidGraph(format!(
                        "self-loop at {i} has weight {w}, expected 1"
                    )));
                }
                seen_self_loop[i] = true;
            }
        }
        if let Some(missing) = seen_self_loop.iter().position(|s| !s) {
            return Err(Error::InvalidGraph(format!(
                "node {missing} is missing its self-loop"
            )));
        }
        // Symmetry: every (i, j, w) must be mirrored by (j, i, w) exactly.
        let key_set: BTreeSet<(usize, usize)> = sorted.iter().map(|t| (t.0, t.1)).collect();
        for &(i, j, w) in &sorted {
            if !key_set.contains(&(j, i)) {
                return Err(Error::InvalidGraph(format!(
                    "edge ({i}, {j}) has no reverse entry"
                )));
            }
            if i < j {
                let pos = sorted
                    .binary_search_by(|t| (t.0, t.1).cmp(&(j, i)))
                    .expect("reverse entry checked above");
                if sorted[pos].2 != w {
                    return Err(Error::InvalidGraph(format!(
                        "edge ({i}, {j}) weight differs from its reverse"
                    )));
                }
            }
        }

        let mut row_ptr = vec![0usize; n_nodes + 1];
        for &(i, _, _) in &sorted {
            row_ptr[i + 1] += 1;
        }
        for i in 0..n_nodes {
            row_ptr[i + 1] += row_ptr[i];
        }

        Ok(Graph {
            n_nodes,
            triplets: sorted,
            row_ptr,
            mean_edge_length,
        })
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    /// All stored `(src, dst, weight)` entries, sorted by `(src, dst)`.
    pub fn triplets(&self) -> &[(usize, usize, f64)] {
        &self.triplets
    }

    pub fn mean_edge_length(&self) -> f64 {
        self.mean_edge_length
    }

    /// Number of stored entries (directed edges plus self-loops).
    pub fn nnz(&self) -> usize {
        self.triplets.len()
    }

    /// Neighbors of `i` excluding the self-loop, ascending by index.
    pub fn neighbors(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        self.triplets[self.row_ptr[i]..self.row_ptr[i + 1]]
            .iter()
            .filter(|t| t.1 != t.0)
            .map(|t| t.1)
    }

    /// Weighted degree of `i` including the self-loop.
    pub fn degree(&self, i: usize) -> f64 {
        self.triplets[self.row_ptr[i]..self.row_ptr[i + 1]]
            .iter()
            .map(|t| t.2)
            .sum()
    }
}

/// Convert a surface mesh into its node-connectivity graph.
///
/// Every cell edge becomes one undirected graph edge with weight
/// `exp(-d / mean_edge_length)` where `d` is the edge's Euclidean length, so
/// the weight scale adapts to the mesh resolution. Each node also gets a
/// self-loop of weight exactly 1.
pub fn build_graph(mesh: &SurfaceMesh) -> Result<Graph> {
    let nodes = mesh.nodes();
    let mut pairs = BTreeSet::new();
    for &[i, j, k] in mesh.cells() {
        for (a, b) in [(i, j), (j, k), (i, k)] {
            pairs.insert((a.min(b), a.max(b)));
        }
    }
    if pairs.is_empty() {
        return Err(Error::InvalidGraph("mesh produced no edges".into()));
    }

    let lengths: Vec<f64> = pairs
        .iter()
        .map(|&(a, b)| dist(&nodes[a], &nodes[b]))
        .collect();
    let mean_edge_length = lengths.iter().sum::<f64>() / lengths.len() as f64;
    if !(mean_edge_length > 0.0) {
        return Err(Error::InvalidGraph("mean edge length is not positive".into()));
    }

    let mut triplets = Vec::with_capacity(2 * pairs.len() + mesh.n_nodes());
    for (&(a, b), &len) in pairs.iter().zip(&lengths) {
        let w = (-len / mean_edge_length).exp();
        triplets.push((a, b, w));
        triplets.push((b, a, w));
    }
    for i in 0..mesh.n_nodes() {
        triplets.push((i, i, 1.0));
    }

    Graph::from_triplets(mesh.n_nodes(), triplets, mean_edge_length)
}

fn dist(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    (dx * dx + dy * dy + dz * dz).sqrt()
}

/// Symmetric degree-normalized propagation operator
/// `D^{-1/2} (A + I) D^{-1/2}` in CSR form.
#[derive(Debug, Clone, PartialEq)]
pub struct PropagationOperator {
    matrix: CsrMatrix,
}

impl PropagationOperator {
    pub fn n_nodes(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn matrix(&self) -> &CsrMatrix {
        &self.matrix
    }

    /// Apply the operator to per-node feature columns.
    pub fn apply(&self, features: &ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.matrix.matmul(features)
    }

    pub fn to_dense(&self) -> Array2<f64> {
        self.matrix.to_dense()
    }
}

/// Normalize a graph's weighted adjacency (self-loops included) into the
/// symmetric propagation operator. The weighted degrees are strictly positive
/// because every node carries a unit self-loop.
pub fn normalize_adjacency(graph: &Graph) -> Result<PropagationOperator> {
    let n = graph.n_nodes();
    let mut degree = vec![0.0f64; n];
    for &(i, _, w) in graph.triplets() {
        degree[i] += w;
    }
    let inv_sqrt: Vec<f64> = degree
        .iter()
        .map(|&d| {
            debug_assert!(d >= 1.0, "self-loop guarantees degree >= 1");
            1.0 / d.sqrt()
        })
        .collect();

    let triplets = graph
        .triplets()
        .iter()
        .map(|&(i, j, w)| (i, j, w * inv_sqrt[i] * inv_sqrt[j]))
        .collect();
    let matrix = CsrMatrix::from_triplets(n, n, triplets)?;
    Ok(PropagationOperator { matrix })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use ndarray::array;

    fn unit_triangle() -> SurfaceMesh {
        SurfaceMesh::new(
            vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
            vec![[0, 1, 2]],
        )
        .unwrap()
    }

    #[test]
    fn triangle_graph_has_nine_entries() {
        let g = build_graph(&unit_triangle()).unwrap();
        // 3 undirected edges stored twice plus 3 self-loops.
        assert_eq!(g.nnz(), 9);
        let mean = (1.0 + 1.0 + 2.0f64.sqrt()) / 3.0;
        assert_relative_eq!(g.mean_edge_length(), mean, max_relative = 1e-15);
        // Edge 0-1 has unit length.
        let w01 = g
            .triplets()
            .iter()
            .find(|t| t.0 == 0 && t.1 == 1)
            .unwrap()
            .2;
        assert_relative_eq!(w01, (-1.0 / mean).exp(), max_relative = 1e-15);
        // Self-loops are exactly 1.
        for i in 0..3 {
            assert_eq!(
                g.triplets().iter().find(|t| t.0 == i && t.1 == i).unwrap().2,
                1.0
            );
        }
    }

    #[test]
    fn shared_cell_edges_are_deduplicated() {
        // Two triangles sharing edge 1-2.
        let mesh = SurfaceMesh::new(
            vec![
                [0.0, 0.0, 0.0],
                [1.0, 0.0, 0.0],
                [0.0, 1.0, 0.0],
                [1.0, 1.0, 0.0],
            ],
            vec![[0, 1, 2], [1, 3, 2]],
        )
        .unwrap();
        let g = build_graph(&mesh).unwrap();
        // 5 undirected edges stored twice plus 4 self-loops.
        assert_eq!(g.nnz(), 14);
    }

    #[test]
    fn graph_is_symmetric() {
        let g = build_graph(&unit_triangle()).unwrap();
        for &(i, j, w) in g.triplets() {
            let rev = g.triplets().iter().find(|t| t.0 == j && t.1 == i).unwrap();
            assert_eq!(rev.2, w);
        }
    }

    #[test]
    fn isolated_node_operator_is_identity() {
        let g = Graph::from_triplets(1, vec![(0, 0, 1.0)], 0.0).unwrap();
        let op = normalize_adjacency(&g).unwrap();
        assert_eq!(op.to_dense(), array![[1.0]]);
    }

    #[test]
    fn two_node_operator_matches_closed_form() {
        // Single unit edge: the mean edge length equals the edge length, so
        // the weight is exp(-1); both degrees are 1 + exp(-1).
        let mesh = SurfaceMesh::new(
            vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1e-3, 0.0]],
            vec![[0, 1, 2]],
        )
        .unwrap();
        // That mesh has three edges, so build the two-node case directly.
        let w = (-1.0f64).exp();
        let g = Graph::from_triplets(
            2,
            vec![(0, 0, 1.0), (1, 1, 1.0), (0, 1, w), (1, 0, w)],
            1.0,
        )
        .unwrap();
        let op = normalize_adjacency(&g).unwrap();
        let d = 1.0 + w;
        let expect = array![[1.0 / d, w / d], [w / d, 1.0 / d]];
        assert_relative_eq!(op.to_dense(), expect, max_relative = 1e-14);
        let _ = mesh;
    }

    #[test]
    fn operator_diagonal_is_inverse_degree() {
        let g = build_graph(&unit_triangle()).unwrap();
        let op = normalize_adjacency(&g).unwrap();
        for i in 0..3 {
            assert_relative_eq!(
                op.matrix().get(i, i),
                1.0 / g.degree(i),
                max_relative = 1e-14
            );
        }
    }

    #[test]
    fn operator_spectral_radius_at_most_one() {
        let mesh = SurfaceMesh::new(
            vec![
                [0.0, 0.0, 0.0],
                [1.0, 0.0, 0.0],
                [0.0, 1.0, 0.0],
                [1.3, 1.1, 0.2],
                [2.0, 0.1, 0.0],
            ],
            vec![[0, 1, 2], [1, 3, 2], [1, 4, 3]],
        )
        .unwrap();
        let op = normalize_adjacency(&build_graph(&mesh).unwrap()).unwrap();
        let dense = op.to_dense();
        let n = dense.nrows();
        let sym = nalgebra::DMatrix::from_fn(n, n, |r, c| dense[[r, c]]);
        let eig = sym.symmetric_eigen();
        let rho = eig.eigenvalues.iter().fold(0.0f64, |m, &e| m.max(e.abs()));
        assert!(rho <= 1.0 + 1e-12, "spectral radius {rho} > 1");
    }

    #[test]
    fn missing_self_loop_rejected() {
        let err = Graph::from_triplets(2, vec![(0, 0, 1.0), (0, 1, 0.5), (1, 0, 0.5)], 1.0)
            .unwrap_err();
        assert!(matches!(err, Error::InvalidGraph(_)));
    }

    #[test]
    fn asymmetric_weights_rejected() {
        let err = Graph::from_triplets(
            2,
            vec![(0, 0, 1.0), (1, 1, 1.0), (0, 1, 0.5), (1, 0, 0.6)],
            1.0,
        )
        .unwrap_err();
        assert!(matches!(err, Error::InvalidGraph(_)));
    }

    #[test]
    fn neighbors_exclude_self() {
        let g = build_graph(&unit_triangle()).unwrap();
        let nbrs: Vec<usize> = g.neighbors(1).collect();
        assert_eq!(nbrs, vec![0, 2]);
    }
}

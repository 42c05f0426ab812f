//! Least-squares spatial gradients of node fields over graph neighborhoods.
//!
//! Each node's gradient is the minimum-norm least-squares fit of its
//! neighbor differences. On surface meshes the neighbor directions usually
//! span only the local tangent plane; the minimum-norm solution then leaves
//! the out-of-plane component at zero instead of amplifying noise.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::graph::Graph;

/// Relative singular-value cutoff for the pseudo-inverse of the neighbor
/// difference matrix.
const SVD_RELATIVE_CUTOFF: f64 = 1e-10;

/// Per-node minimum-norm pseudo-inverses of the neighbor geometry, reusable
/// across any number of fields on the same graph.
struct GradientStencil {
    /// For node `i`: neighbor indices and the 3 x m pseudo-inverse mapping
    /// neighbor field differences to the gradient.
    per_node: Vec<(Vec<usize>, DMatrix<f64>)>,
}

impl GradientStencil {
    fn build(graph: &Graph, coords: &[[f64; 3]]) -> Result<Self> {
        if coords.len() != graph.n_nodes() {
            return Err(Error::ShapeMismatch(format!(
                "{} coordinates for {} graph nodes",
                coords.len(),
                graph.n_nodes()
            )));
        }
        let per_node = (0..graph.n_nodes())
            .into_par_iter()
            .map(|i| {
                let nbrs: Vec<usize> = graph.neighbors(i).collect();
                if nbrs.is_empty() {
                    return Err(Error::NoNeighbors { node: i });
                }
                let m = nbrs.len();
                let mut d = DMatrix::zeros(m, 3);
                for (r, &j) in nbrs.iter().enumerate() {
                    for a in 0..3 {
                        d[(r, a)] = coords[j][a] - coords[i][a];
                    }
                }
                Ok((nbrs, min_norm_pinv(&d)))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(GradientStencil { per_node })
    }

    fn apply(&self, field: &[f64]) -> Vec<[f64; 3]> {
        self.per_node
            .iter()
            .enumerate()
            .map(|(i, (nbrs, pinv))| {
                let rhs = DVector::from_iterator(nbrs.len(), nbrs.iter().map(|&j| field[j] - field[i]));
                let g = pinv * rhs;
                [g[0], g[1], g[2]]
            })
            .collect()
    }
}

/// Minimum-norm pseudo-inverse with singular values below
/// `SVD_RELATIVE_CUTOFF * sigma_max` treated as zero. A zero matrix maps to
/// a zero pseudo-inverse.
fn min_norm_pinv(d: &DMatrix<f64>) -> DMatrix<f64> {
    let svd = d.clone().svd(true, true);
    let sigma_max = svd.singular_values.iter().fold(0.0f64, |m, &s| m.max(s));
    if sigma_max == 0.0 {
        return DMatrix::zeros(d.ncols(), d.nrows());
    }
    svd.pseudo_inverse(SVD_RELATIVE_CUTOFF * sigma_max)
        .expect("cutoff is positive")
}

/// Least-squares gradient of a scalar node field.
pub fn node_gradients(graph: &Graph, coords: &[[f64; 3]], field: &[f64]) -> Result<Vec<[f64; 3]>> {
    if field.len() != graph.n_nodes() {
        return Err(Error::ShapeMismatch(format!(
            "{} field values for {} graph nodes",
            field.len(),
            graph.n_nodes()
        )));
    }
    Ok(GradientStencil::build(graph, coords)?.apply(field))
}

/// Euclidean magnitude of each node gradient.
pub fn gradient_magnitudes(gradients: &[[f64; 3]]) -> Vec<f64> {
    gradients
        .iter()
        .map(|g| (g[0] * g[0] + g[1] * g[1] + g[2] * g[2]).sqrt())
        .collect()
}

/// Per-node maximum gradient magnitude across a set of field samples: the
/// sensor that drives coarsening. Every sample must cover all graph nodes.
pub fn aggregate_gradient_magnitude(
    graph: &Graph,
    coords: &[[f64; 3]],
    samples: &[Vec<f64>],
) -> Result<Vec<f64>> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument(
            "aggregate gradient needs at least one field sample".into(),
        ));
    }
    let stencil = GradientStencil::build(graph, coords)?;
    let mut agg = vec![0.0f64; graph.n_nodes()];
    for sample in samples {
        if sample.len() != graph.n_nodes() {
            return Err(Error::ShapeMismatch(format!(
                "{} field values for {} graph nodes",
                sample.len(),
                graph.n_nodes()
            )));
        }
        let mags = gradient_magnitudes(&stencil.apply(sample));
        for (a, m) in agg.iter_mut().zip(mags) {
            *a = a.max(m);
        }
    }
    Ok(agg)
}

//! Moving weighted least-squares interpolation between node sets.
//!
//! Each destination node gets a row of interpolation coefficients fitted
//! over its `k_n` Euclidean-nearest source nodes with a Gaussian-weighted
//! polynomial basis. Pooling and unpooling use two independently built
//! matrices; neither is the inverse of the other.

use nalgebra::{Cholesky, DMatrix, DVector};
use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::kdtree::KdTree;
use crate::sparse::CsrMatrix;

/// Number of monomials in the full second-order basis
/// `[1, x, y, z, x^2, y^2, z^2, xy, xz, yz]`.
pub const QUADRATIC_BASIS_SIZE: usize = 10;
/// Number of monomials in the linear basis `[1, x, y, z]`.
pub const LINEAR_BASIS_SIZE: usize = 4;

/// Basis actually used for one destination row after the degradation ladder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum BasisLevel {
    Quadratic,
    Linear,
    Constant,
}

/// Parameters of the MWLS fit.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MwlsParams {
    /// Neighbor count per destination node.
    pub k_n: usize,
    /// Ridge factor: the normal matrix receives `ridge_scale * trace` on its
    /// diagonal before the solve.
    pub ridge_scale: f64,
    /// Conditioning probe: a row falls back to the next-lower basis when its
    /// solve fails to reproduce the basis monomials to this tolerance. This
    /// catches exactly the ill-conditioned systems where the regularized
    /// normal equations stop being trustworthy, without penalizing harmless
    /// degeneracies such as flat patches.
    pub fallback_tol: f64,
}

impl Default for MwlsParams {
    fn default() -> Self {
        MwlsParams {
            k_n: 10,
            ridge_scale: 1e-10,
            fallback_tol: 1e-9,
        }
    }
}

impl MwlsParams {
    pub fn validate(&self) -> Result<()> {
        if self.k_n < QUADRATIC_BASIS_SIZE {
            return Err(Error::InvalidArgument(format!(
                "k_n = {} is below the quadratic basis size {QUADRATIC_BASIS_SIZE}",
                self.k_n
            )));
        }
        if !(self.ridge_scale >= 0.0) {
            return Err(Error::InvalidArgument("ridge_scale must be >= 0".into()));
        }
        if !(self.fallback_tol > 0.0) {
            return Err(Error::InvalidArgument("fallback_tol must be > 0".into()));
        }
        Ok(())
    }
}

/// Sparse interpolation operator from a source node set to a destination
/// node set; one row per destination node with exactly `k_n` structural
/// entries.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct InterpolationMatrix {
    matrix: CsrMatrix,
    k_n: usize,
    fallback: Vec<BasisLevel>,
}

impl InterpolationMatrix {
    pub fn matrix(&self) -> &CsrMatrix {
        &self.matrix
    }

    pub fn n_dest(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn n_source(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn k_n(&self) -> usize {
        self.k_n
    }

    /// Basis level used per destination row.
    pub fn fallback_levels(&self) -> &[BasisLevel] {
        &self.fallback
    }

    /// Row counts per basis level `(quadratic, linear, constant)`.
    pub fn fallback_counts(&self) -> (usize, usize, usize) {
        let mut counts = (0, 0, 0);
        for level in &self.fallback {
            match level {
                BasisLevel::Quadratic => counts.0 += 1,
                BasisLevel::Linear => counts.1 += 1,
                BasisLevel::Constant => counts.2 += 1,
            }
        }
        counts
    }

    /// Interpolate per-source channel columns to the destination nodes.
    pub fn apply(&self, fields: &ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.matrix.matmul(fields)
    }

    /// Interpolate a single per-source channel.
    pub fn apply_vec(&self, field: &ArrayView1<'_, f64>) -> Result<Array1<f64>> {
        self.matrix.matvec(field)
    }

    pub(crate) fn from_parts(matrix: CsrMatrix, k_n: usize, fallback: Vec<BasisLevel>) -> Self {
        InterpolationMatrix {
            matrix,
            k_n,
            fallback,
        }
    }
}

/// Monomials of the scaled offset `xi`, filled up to `len` terms.
fn monomials(xi: &[f64; 3], len: usize) -> [f64; QUADRATIC_BASIS_SIZE] {
    let [x, y, z] = *xi;
    let mut p = [0.0; QUADRATIC_BASIS_SIZE];
    let full = [1.0, x, y, z, x * x, y * y, z * z, x * y, x * z, y * z];
    p[..len].copy_from_slice(&full[..len]);
    p
}

/// Build the interpolation matrix from `source` to `dest` coordinates.
///
/// Per destination node: the `k_n` nearest sources are found with a k-d
/// tree; distances are rescaled by the `k_n`-th neighbor distance so the
/// Gaussian weights `exp(-d/h)` are independent of the mesh scale; the basis
/// monomials are centered on the destination node and share the same
/// rescaling. The weighted normal equations are solved with a relative ridge
/// on the diagonal, degrading quadratic -> linear -> constant whenever the
/// solve cannot reproduce its own basis.
pub fn build(
    source: &[[f64; 3]],
    dest: &[[f64; 3]],
    params: &MwlsParams,
) -> Result<InterpolationMatrix> {
    params.validate()?;
    if source.len() < params.k_n {
        return Err(Error::InvalidArgument(format!(
            "{} source nodes but k_n = {}",
            source.len(),
            params.k_n
        )));
    }
    for (name, pts) in [("source", source), ("dest", dest)] {
        if pts.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "{name} coordinates contain non-finite values"
            )));
        }
    }

    let tree = KdTree::build(source);
    let k = params.k_n;
    let rows: Vec<(Vec<usize>, Vec<f64>, BasisLevel)> = dest
        .par_iter()
        .map(|xj| {
            let neighbors = tree.knn(xj, k);
            build_row(source, xj, &neighbors, params)
        })
        .collect();

    let mut triplets = Vec::with_capacity(dest.len() * k);
    let mut fallback = Vec::with_capacity(dest.len());
    for (j, (cols, vals, level)) in rows.into_iter().enumerate() {
        for (c, v) in cols.into_iter().zip(vals) {
            triplets.push((j, c, v));
        }
        fallback.push(level);
    }
    let matrix = CsrMatrix::from_triplets(dest.len(), source.len(), triplets)?;
    Ok(InterpolationMatrix::from_parts(matrix, k, fallback))
}

/// Coefficients for one destination node over its fixed neighbor set.
fn build_row(
    source: &[[f64; 3]],
    xj: &[f64; 3],
    neighbors: &[(f64, usize)],
    params: &MwlsParams,
) -> (Vec<usize>, Vec<f64>, BasisLevel) {
    let k = neighbors.len();
    let cols: Vec<usize> = neighbors.iter().map(|n| n.1).collect();
    let h = neighbors.last().map(|n| n.0).unwrap_or(0.0);
    if h == 0.0 {
        // Every neighbor coincides with the destination; average them.
        return (cols, vec![1.0 / k as f64; k], BasisLevel::Constant);
    }

    let weights: Vec<f64> = neighbors.iter().map(|n| (-n.0 / h).exp()).collect();
    let offsets: Vec<[f64; 3]> = cols
        .iter()
        .map(|&i| {
            [
                (source[i][0] - xj[0]) / h,
                (source[i][1] - xj[1]) / h,
                (source[i][2] - xj[2]) / h,
            ]
        })
        .collect();

    for (basis_len, level) in [
        (QUADRATIC_BASIS_SIZE, BasisLevel::Quadratic),
        (LINEAR_BASIS_SIZE, BasisLevel::Linear),
    ] {
        if let Some(phi) = try_basis(&offsets, &weights, basis_len, params) {
            return (cols, phi, level);
        }
    }

    // Constant basis: the weighted mean, which is the exact order-0 MWLS
    // solution with the same Gaussian weights. Rows still sum to 1.
    let total: f64 = weights.iter().sum();
    let phi = weights.iter().map(|w| w / total).collect();
    (cols, phi, BasisLevel::Constant)
}

/// Solve the weighted normal equations for one basis size, returning the
/// row only if the reproduction defect stays within tolerance.
fn try_basis(
    offsets: &[[f64; 3]],
    weights: &[f64],
    basis_len: usize,
    params: &MwlsParams,
) -> Option<Vec<f64>> {
    let k = offsets.len();
    let mut p = DMatrix::zeros(k, basis_len);
    for (i, xi) in offsets.iter().enumerate() {
        let mono = monomials(xi, basis_len);
        for (b, &m) in mono[..basis_len].iter().enumerate() {
            p[(i, b)] = m;
        }
    }
    // A = P^T W P with a relative ridge on the diagonal.
    let mut pw = p.clone();
    for (i, &w) in weights.iter().enumerate() {
        pw.row_mut(i).scale_mut(w);
    }
    let a = p.transpose() * &pw;
    let ridge = params.ridge_scale * a.trace();
    let mut a_ridged = a.clone();
    for d in 0..basis_len {
        a_ridged[(d, d)] += ridge;
    }

    let chol = Cholesky::new(a_ridged)?;
    // The basis is centered on the destination, so p(x_j) = e_0 and the row
    // is Phi_i = w_i * (P c)_i with c solving the normal equations. The
    // plain ridged solve biases c by O(ridge / lambda) per eigendirection;
    // a few steps of iterated Tikhonov refinement remove that bias wherever
    // the direction is resolvable, while unresolvable directions keep their
    // damped (harmless or probe-caught) value.
    let mut e0 = DVector::zeros(basis_len);
    e0[0] = 1.0;
    let mut c = chol.solve(&e0);
    for _ in 0..3 {
        let residual = &e0 - &a * &c;
        c += chol.solve(&residual);
    }
    let pc = &p * &c;
    let phi: Vec<f64> = weights.iter().zip(pc.iter()).map(|(&w, &v)| w * v).collect();

    // Conditioning probe: the row must reproduce every basis monomial.
    // Centered at the destination, the truth is 1 for the constant term and
    // 0 for all others.
    for b in 0..basis_len {
        let mut acc = 0.0;
        for i in 0..k {
            acc += phi[i] * p[(i, b)];
        }
        let truth = if b == 0 { 1.0 } else { 0.0 };
        if (acc - truth).abs() > params.fallback_tol {
            return None;
        }
    }
    Some(phi)
}

/// Build the two independent matrices coupling a fine and a coarse node
/// set: `down` (fine source -> coarse destination, used for pooling) and
/// `up` (coarse source -> fine destination, used for unpooling).
pub fn build_pair(
    fine: &[[f64; 3]],
    coarse: &[[f64; 3]],
    params: &MwlsParams,
) -> Result<(InterpolationMatrix, InterpolationMatrix)> {
    let down = build(fine, coarse, params)?;
    let up = build(coarse, fine, params)?;
    Ok((down, up))
}

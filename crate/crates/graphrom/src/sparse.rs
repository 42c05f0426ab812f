//! Minimal CSR sparse-matrix support for propagation and interpolation
//! operators. Rows are stored sorted by column index, which makes matrix
//! assembly and comparisons deterministic.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

use crate::error::{Error, Result};

/// Compressed sparse row matrix with `f64` values.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CsrMatrix {
    nrows: usize,
    ncols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

impl CsrMatrix {
    /// Assemble from triplets. Entries are sorted by `(row, col)`; duplicate
    /// positions are rejected rather than summed so accidental double
    /// insertion cannot go unnoticed.
    pub fn from_triplets(
        nrows: usize,
        ncols: usize,
        mut triplets: Vec<(usize, usize, f64)>,
    ) -> Result<Self> {
        for &(r, c, _) in &triplets {
            if r >= nrows || c >= ncols {
                return Err(Error::ShapeMismatch(format!(
                    "triplet ({r}, {c}) outside {nrows} x {ncols} matrix"
                )));
            }
        }
        triplets.sort_unstable_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        for w in triplets.windows(2) {
            if w[0].0 == w[1].0 && w[0].1 == w[1].1 {
                return Err(Error::ShapeMismatch(format!(
                    "duplicate entry at ({}, {})",
                    w[0].0, w[0].1
                )));
            }
        }

        let mut row_ptr = vec![0usize; nrows + 1];
        for &(r, _, _) in &triplets {
            row_ptr[r + 1] += 1;
        }
        for r in 0..nrows {
            row_ptr[r + 1] += row_ptr[r];
        }
        let col_idx = triplets.iter().map(|t| t.1).collect();
        let values = triplets.iter().map(|t| t.2).collect();
        Ok(CsrMatrix {
            nrows,
            ncols,
            row_ptr,
            col_idx,
            values,
        })
    }

    /// Build directly from raw CSR arrays (used when reading checkpoints).
    pub fn from_raw(
        nrows: usize,
        ncols: usize,
        row_ptr: Vec<usize>,
        col_idx: Vec<usize>,
        values: Vec<f64>,
    ) -> Result<Self> {
        if row_ptr.len() != nrows + 1 || row_ptr[0] != 0 || *row_ptr.last().unwrap() != values.len()
        {
            return Err(Error::ShapeMismatch("inconsistent CSR row pointers".into()));
        }
        if col_idx.len() != values.len() {
            return Err(Error::ShapeMismatch("CSR col/value length mismatch".into()));
        }
        for w in row_ptr.windows(2) {
            if w[1] < w[0] {
                return Err(Error::ShapeMismatch("CSR row pointers not monotone".into()));
            }
        }
        for &c in &col_idx {
            if c >= ncols {
                return Err(Error::ShapeMismatch(format!(
                    "CSR column {c} outside {ncols} columns"
                )));
            }
        }
        Ok(CsrMatrix {
            nrows,
            ncols,
            row_ptr,
            col_idx,
            values,
        })
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row_ptr(&self) -> &[usize] {
        &self.row_ptr
    }

    pub fn col_idx(&self) -> &[usize] {
        &self.col_idx
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Column indices and values of one row.
    pub fn row(&self, r: usize) -> (&[usize], &[f64]) {
        let lo = self.row_ptr[r];
        let hi = self.row_ptr[r + 1];
        (&self.col_idx[lo..hi], &self.values[lo..hi])
    }

    /// Entry at `(r, c)`, or 0 if not stored.
    pub fn get(&self, r: usize, c: usize) -> f64 {
        let (cols, vals) = self.row(r);
        match cols.binary_search(&c) {
            Ok(k) => vals[k],
            Err(_) => 0.0,
        }
    }

    /// Sparse-dense product `self * rhs` for a dense `ncols x k` matrix.
    pub fn matmul(&self, rhs: &ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        if rhs.nrows() != self.ncols {
            return Err(Error::ShapeMismatch(format!(
                "matmul: {} x {} by {} x {}",
                self.nrows,
                self.ncols,
                rhs.nrows(),
                rhs.ncols()
            )));
        }
        let k = rhs.ncols();
        let mut out = Array2::zeros((self.nrows, k));
        for r in 0..self.nrows {
            let (cols, vals) = self.row(r);
            let mut acc = out.row_mut(r);
            for (&c, &v) in cols.iter().zip(vals) {
                acc.scaled_add(v, &rhs.row(c));
            }
        }
        Ok(out)
    }

    /// Sparse matrix-vector product.
    pub fn matvec(&self, rhs: &ArrayView1<'_, f64>) -> Result<Array1<f64>> {
        if rhs.len() != self.ncols {
            return Err(Error::ShapeMismatch(format!(
                "matvec: {} x {} by vector of {}",
                self.nrows,
                self.ncols,
                rhs.len()
            )));
        }
        let mut out = Array1::zeros(self.nrows);
        for r in 0..self.nrows {
            let (cols, vals) = self.row(r);
            let mut acc = 0.0;
            for (&c, &v) in cols.iter().zip(vals) {
                acc += v * rhs[c];
            }
            out[r] = acc;
        }
        Ok(out)
    }

    /// Product `self^T * rhs` without materialising the transpose.
    pub fn matmul_transposed(&self, rhs: &ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        if rhs.nrows() != self.nrows {
            return Err(Error::ShapeMismatch(format!(
                "matmul_transposed: {} x {} by {} x {}",
                self.ncols,
                self.nrows,
                rhs.nrows(),
                rhs.ncols()
            )));
        }
        let k = rhs.ncols();
        let mut out = Array2::zeros((self.ncols, k));
        for r in 0..self.nrows {
            let (cols, vals) = self.row(r);
            for (&c, &v) in cols.iter().zip(vals) {
                let mut acc = out.row_mut(c);
                acc.scaled_add(v, &rhs.row(r));
            }
        }
        Ok(out)
    }

    /// Dense copy, for small matrices in tests and diagnostics.
    pub fn to_dense(&self) -> Array2<f64> {
        let mut out = Array2::zeros((self.nrows, self.ncols));
        for r in 0..self.nrows {
            let (cols, vals) = self.row(r);
            for (&c, &v) in cols.iter().zip(vals) {
                out[[r, c]] = v;
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use ndarray::array;

    #[test]
    fn triplet_assembly_sorts_rows() {
        let m = CsrMatrix::from_triplets(2, 3, vec![(1, 2, 5.0), (0, 1, 2.0), (1, 0, 3.0)]).unwrap();
        assert_eq!(m.row_ptr(), &[0, 1, 3]);
        assert_eq!(m.row(1).0, &[0, 2]);
        assert_eq!(m.get(1, 2), 5.0);
        assert_eq!(m.get(0, 0), 0.0);
    }

    #[test]
    fn duplicate_triplet_rejected() {
        let err = CsrMatrix::from_triplets(2, 2, vec![(0, 1, 1.0), (0, 1, 2.0)]).unwrap_err();
        assert!(matches!(err, crate::error::Error::ShapeMismatch(_)));
    }

    #[test]
    fn matmul_matches_dense() {
        let m = CsrMatrix::from_triplets(2, 3, vec![(0, 0, 1.0), (0, 2, 2.0), (1, 1, -1.0)]).unwrap();
        let rhs = array![[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]];
        let got = m.matmul(&rhs.view()).unwrap();
        let want = m.to_dense().dot(&rhs);
        assert_relative_eq!(got, want, max_relative = 1e-15);
    }

    #[test]
    fn transposed_matmul_matches_dense() {
        let m = CsrMatrix::from_triplets(2, 3, vec![(0, 0, 1.0), (0, 2, 2.0), (1, 1, -1.0)]).unwrap();
        let rhs = array![[1.0], [2.0]];
        let got = m.matmul_transposed(&rhs.view()).unwrap();
        let want = m.to_dense().t().dot(&rhs);
        assert_relative_eq!(got, want, max_relative = 1e-15);
    }

    #[test]
    fn matvec_matches_matmul() {
        let m = CsrMatrix::from_triplets(3, 3, vec![(0, 1, 2.0), (1, 1, 1.5), (2, 0, -4.0)]).unwrap();
        let v = array![1.0, -2.0, 0.5];
        let got = m.matvec(&v.view()).unwrap();
        let want = m.to_dense().dot(&v);
        assert_relative_eq!(got, want, max_relative = 1e-15);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let m = CsrMatrix::from_triplets(2, 3, vec![(0, 0, 1.0)]).unwrap();
        assert!(m.matmul(&Array2::zeros((2, 2)).view()).is_err());
    }
}

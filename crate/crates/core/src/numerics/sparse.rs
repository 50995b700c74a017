use crate::numerics::Tensor;
use crate::{Error, Result};

/// Compressed sparse row matrix of `f64`, column indices sorted within rows.
#[derive(Clone, Debug, PartialEq)]
pub struct CsrMatrix {
    n_rows: usize,
    n_cols: usize,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
}

impl CsrMatrix {
    pub fn empty(n_rows: usize, n_cols: usize) -> Self {
        Self { n_rows, n_cols, row_ptr: vec![0; n_rows + 1], cols: Vec::new(), vals: Vec::new() }
    }

    /// Builds from per-row entry lists. Entries within a row are sorted by
    /// column and duplicates rejected.
    pub fn from_rows(n_cols: usize, rows: Vec<Vec<(usize, f64)>>) -> Result<Self> {
        let n_rows = rows.len();
        let mut row_ptr = Vec::with_capacity(n_rows + 1);
        row_ptr.push(0);
        let mut cols = Vec::new();
        let mut vals = Vec::new();
        for (i, mut row) in rows.into_iter().enumerate() {
            row.sort_by_key(|&(c, _)| c);
            for w in row.windows(2) {
                if w[0].0 == w[1].0 {
                    return Err(Error::ShapeMismatch(format!(
                        "duplicate entry ({}, {})",
                        i, w[0].0
                    )));
                }
            }
            for (c, v) in row {
                if c >= n_cols {
                    return Err(Error::ShapeMismatch(format!(
                        "column {} out of range for {} columns",
                        c, n_cols
                    )));
                }
                cols.push(c);
                vals.push(v);
            }
            row_ptr.push(cols.len());
        }
        Ok(Self { n_rows, n_cols, row_ptr, cols, vals })
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.row_ptr[i]..self.row_ptr[i + 1];
        self.cols[span.clone()].iter().copied().zip(self.vals[span].iter().copied())
    }

    pub fn row_len(&self, i: usize) -> usize {
        self.row_ptr[i + 1] - self.row_ptr[i]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let span = self.row_ptr[i]..self.row_ptr[i + 1];
        match self.cols[span.clone()].binary_search(&j) {
            Ok(pos) => self.vals[span.start + pos],
            Err(_) => 0.0,
        }
    }

    /// All stored entries in row-major order.
    pub fn iter(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.n_rows).flat_map(move |i| self.row(i).map(move |(j, v)| (i, j, v)))
    }

    pub fn transpose(&self) -> CsrMatrix {
        let mut rows = vec![Vec::new(); self.n_cols];
        for (i, j, v) in self.iter() {
            rows[j].push((i, v));
        }
        CsrMatrix::from_rows(self.n_rows, rows).expect("transpose of valid matrix")
    }

    /// Sparse-dense product `self · x`.
    pub fn matmul_dense(&self, x: &Tensor) -> Result<Tensor> {
        if self.n_cols != x.rows() {
            return Err(Error::ShapeMismatch(format!(
                "sparse {}x{} by dense {:?}",
                self.n_rows,
                self.n_cols,
                x.shape()
            )));
        }
        let c = x.cols();
        let mut out = Tensor::zeros(&[self.n_rows, c]);
        for i in 0..self.n_rows {
            let orow = out.row_mut(i);
            for (j, p) in self.row(i) {
                for (o, &xv) in orow.iter_mut().zip(x.row(j)) {
                    *o += p * xv;
                }
            }
        }
        Ok(out)
    }

    pub fn to_dense(&self) -> Tensor {
        let mut t = Tensor::zeros(&[self.n_rows, self.n_cols]);
        for (i, j, v) in self.iter() {
            t.set(i, j, v);
        }
        t
    }
}

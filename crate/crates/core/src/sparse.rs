//! Compressed sparse row matrices used as fixed propagation operators.

use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};

/// A CSR matrix of `f64` values.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    rows: usize,
    cols: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl CsrMatrix {
    /// Builds a matrix from unordered `(row, col, value)` triplets. Duplicate
    /// coordinates are summed.
    pub fn from_triplets(rows: usize, cols: usize, triplets: &[(usize, usize, f64)]) -> Result<Self> {
        let mut counts = vec![0usize; rows + 1];
        for &(r, c, _) in triplets {
            if r >= rows || c >= cols {
                return Err(Error::shape(
                    "csr",
                    format!("entry ({r}, {c}) outside {rows}x{cols}"),
                ));
            }
            counts[r + 1] += 1;
        }
        for r in 0..rows {
            counts[r + 1] += counts[r];
        }
        let mut cursor = counts.clone();
        let mut entries = vec![(0usize, 0.0f64); triplets.len()];
        for &(r, c, v) in triplets {
            entries[cursor[r]] = (c, v);
            cursor[r] += 1;
        }

        let mut indptr = Vec::with_capacity(rows + 1);
        let mut indices = Vec::with_capacity(triplets.len());
        let mut values = Vec::with_capacity(triplets.len());
        indptr.push(0);
        for r in 0..rows {
            let row = &mut entries[counts[r]..counts[r + 1]];
            row.sort_by_key(|&(c, _)| c);
            for &(c, v) in row.iter() {
                if indices.len() > indptr[r] && *indices.last().unwrap() == c {
                    *values.last_mut().unwrap() += v;
                } else {
                    indices.push(c);
                    values.push(v);
                }
            }
            indptr.push(indices.len());
        }
        Ok(Self {
            rows,
            cols,
            indptr,
            indices,
            values,
        })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            indptr: vec![0; rows + 1],
            indices: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// Iterates the stored entries of row `r` as `(col, value)`.
    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.indptr[r]..self.indptr[r + 1];
        self.indices[span.clone()]
            .iter()
            .copied()
            .zip(self.values[span].iter().copied())
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        let span = self.indptr[r]..self.indptr[r + 1];
        match self.indices[span.clone()].binary_search(&c) {
            Ok(pos) => self.values[span.start + pos],
            Err(_) => 0.0,
        }
    }

    pub fn transpose(&self) -> Self {
        let triplets: Vec<_> = (0..self.rows)
            .flat_map(|r| self.row(r).map(move |(c, v)| (c, r, v)))
            .collect();
        Self::from_triplets(self.cols, self.rows, &triplets).expect("transpose stays in bounds")
    }

    pub fn is_symmetric(&self) -> bool {
        self.rows == self.cols && *self == self.transpose()
    }

    pub fn to_dense(&self) -> Array2<f64> {
        let mut out = Array2::zeros((self.rows, self.cols));
        for r in 0..self.rows {
            for (c, v) in self.row(r) {
                out[[r, c]] += v;
            }
        }
        out
    }

    /// Dense product `self * x`.
    pub fn matmul(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        if x.nrows() != self.cols {
            return Err(Error::shape(
                "spmm",
                format!("{}x{} times {}x{}", self.rows, self.cols, x.nrows(), x.ncols()),
            ));
        }
        let width = x.ncols();
        let mut out = Array2::<f64>::zeros((self.rows, width));
        match (x.as_slice(), out.as_slice_mut()) {
            (Some(xs), Some(os)) => {
                for r in 0..self.rows {
                    let dst = &mut os[r * width..(r + 1) * width];
                    for k in self.indptr[r]..self.indptr[r + 1] {
                        let c = self.indices[k];
                        let v = self.values[k];
                        let src = &xs[c * width..(c + 1) * width];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += v * s;
                        }
                    }
                }
            }
            _ => {
                for r in 0..self.rows {
                    for (c, v) in self.row(r) {
                        let src = x.row(c);
                        let mut dst = out.row_mut(r);
                        dst.scaled_add(v, &src);
                    }
                }
            }
        }
        Ok(out)
    }

    /// Row sums of the stored values.
    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.rows).map(|r| self.row(r).map(|(_, v)| v).sum()).collect()
    }
}

/// A sparse operator together with its transpose, as consumed by the
/// autodiff tape. Symmetric operators skip storing the transpose.
#[derive(Debug, Clone)]
pub struct SparseOperator {
    forward: CsrMatrix,
    transpose: Option<CsrMatrix>,
}

impl SparseOperator {
    pub fn new(matrix: CsrMatrix) -> Self {
        let transpose = if matrix.is_symmetric() {
            None
        } else {
            Some(matrix.transpose())
        };
        Self {
            forward: matrix,
            transpose,
        }
    }

    pub fn matrix(&self) -> &CsrMatrix {
        &self.forward
    }

    pub fn transposed(&self) -> &CsrMatrix {
        self.transpose.as_ref().unwrap_or(&self.forward)
    }
}

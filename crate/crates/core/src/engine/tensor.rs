use serde::{Deserialize, Serialize};

use super::EngineError;

/// Dense row-major matrix of `f64` values.
///
/// Every tensor is two-dimensional; scalars are `1 × 1`, row vectors `1 × n`
/// and column vectors `n × 1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, EngineError> {
        if rows * cols != data.len() {
            return Err(EngineError::DataLength {
                shape: [rows, cols],
                len: data.len(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            rows: 1,
            cols: 1,
            data: vec![value],
        }
    }

    pub fn row_vector(data: Vec<f64>) -> Self {
        Self {
            rows: 1,
            cols: data.len(),
            data,
        }
    }

    pub fn column_vector(data: Vec<f64>) -> Self {
        Self {
            rows: data.len(),
            cols: 1,
            data,
        }
    }

    /// Builds a matrix from equally sized rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, EngineError> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            if row.len() != cols {
                return Err(EngineError::DataLength {
                    shape: [rows.len(), cols],
                    len: row.len(),
                });
            }
            data.extend_from_slice(row);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn shape(&self) -> [usize; 2] {
        [self.rows, self.cols]
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols + col]
    }

    pub fn row(&self, row: usize) -> &[f64] {
        &self.data[row * self.cols..(row + 1) * self.cols]
    }

    /// Value of a `1 × 1` tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn transpose(&self) -> Self {
        let mut out = vec![0.0; self.data.len()];
        for r in 0..self.rows {
            for c in 0..self.cols {
                out[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        Self {
            rows: self.cols,
            cols: self.rows,
            data: out,
        }
    }

    /// Selects rows by index, in the order given.
    pub fn gather_rows(&self, indices: &[usize]) -> Self {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Self {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }

    /// Plain matrix product; callers are responsible for conforming shapes.
    ///
    /// Works on 2 × 8 output tiles whose accumulators stay in registers
    /// across the whole inner dimension.
    pub(crate) fn matmul_raw(a: &Tensor, b: &Tensor) -> Tensor {
        const BLOCK: usize = 8;
        let (m, k, n) = (a.rows, a.cols, b.cols);
        let mut out = vec![0.0; m * n];
        let full = n - n % BLOCK;
        let mut i = 0;
        while i + 2 <= m {
            let a0 = &a.data[i * k..(i + 1) * k];
            let a1 = &a.data[(i + 1) * k..(i + 2) * k];
            for jb in (0..full).step_by(BLOCK) {
                let mut acc0 = [0.0; BLOCK];
                let mut acc1 = [0.0; BLOCK];
                for p in 0..k {
                    let b_blk: &[f64; BLOCK] = b.data[p * n + jb..p * n + jb + BLOCK].try_into().unwrap();
                    let (x0, x1) = (a0[p], a1[p]);
                    for t in 0..BLOCK {
                        acc0[t] += x0 * b_blk[t];
                        acc1[t] += x1 * b_blk[t];
                    }
                }
                out[i * n + jb..i * n + jb + BLOCK].copy_from_slice(&acc0);
                out[(i + 1) * n + jb..(i + 1) * n + jb + BLOCK].copy_from_slice(&acc1);
            }
            i += 2;
        }
        for r in i..m {
            let a_row = &a.data[r * k..(r + 1) * k];
            for jb in (0..full).step_by(BLOCK) {
                let mut acc = [0.0; BLOCK];
                for (p, &x) in a_row.iter().enumerate() {
                    let b_blk: &[f64; BLOCK] = b.data[p * n + jb..p * n + jb + BLOCK].try_into().unwrap();
                    for t in 0..BLOCK {
                        acc[t] += x * b_blk[t];
                    }
                }
                out[r * n + jb..r * n + jb + BLOCK].copy_from_slice(&acc);
            }
        }
        if full < n {
            for r in 0..m {
                let a_row = &a.data[r * k..(r + 1) * k];
                for j in full..n {
                    let mut acc = 0.0;
                    for (p, &x) in a_row.iter().enumerate() {
                        acc += x * b.data[p * n + j];
                    }
                    out[r * n + j] = acc;
                }
            }
        }
        Tensor {
            rows: m,
            cols: n,
            data: out,
        }
    }

    /// `aᵀ · b`.
    pub(crate) fn matmul_tn(a: &Tensor, b: &Tensor) -> Tensor {
        Self::matmul_raw(&a.transpose(), b)
    }

    /// `a · bᵀ`. The transpose is materialised so the inner loop stays a
    /// contiguous multiply-add.
    pub(crate) fn matmul_nt(a: &Tensor, b: &Tensor) -> Tensor {
        Self::matmul_raw(a, &b.transpose())
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

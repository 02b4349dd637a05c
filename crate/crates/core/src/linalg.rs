//! Dense row-major `f32` matrices with deterministic reduction order.
//!
//! Storage is 32-bit; every reduction (matmul accumulators, softmax
//! denominators, norms, mean-of-squares) runs at 64-bit precision over a
//! fixed index order, so repeated calls produce bitwise-identical results
//! regardless of thread schedule. No SIMD, no blocking: the crate targets
//! desk-scale models where an exact, auditable kernel beats a fast one.

use crate::error::{Error, Result};

/// Dense row-major matrix of 32-bit floats.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    /// All-zeros matrix.
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    /// Identity matrix of size `n`.
    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Build from a row-major flat vector. Length must equal `rows * cols`.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::BadDimensions(format!(
                "flat data of length {} cannot fill a {}x{} matrix",
                data.len(),
                rows,
                cols
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f32 {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f32) {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c] = v;
    }

    /// Borrow row `r` as a slice.
    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Copy of column `c`.
    pub fn column(&self, c: usize) -> Vec<f32> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    /// Zero out column `c` in place.
    pub fn zero_column(&mut self, c: usize) {
        for r in 0..self.rows {
            self.set(r, c, 0.0);
        }
    }

    /// Zero out row `r` in place.
    pub fn zero_row(&mut self, r: usize) {
        self.data[r * self.cols..(r + 1) * self.cols].fill(0.0);
    }

    /// Copy of the column block `[c0, c0 + width)`.
    pub fn col_block(&self, c0: usize, width: usize) -> Matrix {
        assert!(c0 + width <= self.cols, "column block out of range");
        let mut out = Matrix::zeros(self.rows, width);
        for r in 0..self.rows {
            for c in 0..width {
                out.set(r, c, self.get(r, c0 + c));
            }
        }
        out
    }

    /// Write `block` into columns `[c0, c0 + block.cols)`.
    pub fn set_col_block(&mut self, c0: usize, block: &Matrix) {
        assert_eq!(self.rows, block.rows, "row count mismatch");
        assert!(c0 + block.cols <= self.cols, "column block out of range");
        for r in 0..self.rows {
            for c in 0..block.cols {
                self.set(r, c0 + c, block.get(r, c));
            }
        }
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.set(c, r, self.get(r, c));
            }
        }
        out
    }

    /// Elementwise sum. Shapes must match.
    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.check_same_shape(other, "add")?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + b)
            .collect();
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    /// Elementwise difference. Shapes must match.
    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.check_same_shape(other, "sub")?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a - b)
            .collect();
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    /// Multiply every entry by `alpha`.
    pub fn scale(&self, alpha: f32) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|x| x * alpha).collect(),
        }
    }

    /// Standard product. Requires `self.cols == other.rows`. The inner sum
    /// runs over `k` in ascending order with a 64-bit accumulator.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left_rows: self.rows,
                left_cols: self.cols,
                right_rows: other.rows,
                right_cols: other.cols,
            });
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for j in 0..other.cols {
                let mut acc = 0.0f64;
                for k in 0..self.cols {
                    acc += self.get(i, k) as f64 * other.get(k, j) as f64;
                }
                out.set(i, j, acc as f32);
            }
        }
        Ok(out)
    }

    /// Row-wise softmax with per-row max subtraction. Exponentials and the
    /// denominator are evaluated at 64-bit precision.
    pub fn softmax_rows(&self) -> Matrix {
        let mut out = Matrix::zeros(self.rows, self.cols);
        for r in 0..self.rows {
            let row = self.row(r);
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let mut denom = 0.0f64;
            let mut exps = vec![0.0f64; self.cols];
            for (c, &x) in row.iter().enumerate() {
                let e = ((x - max) as f64).exp();
                exps[c] = e;
                denom += e;
            }
            for c in 0..self.cols {
                out.set(r, c, (exps[c] / denom) as f32);
            }
        }
        out
    }

    /// Row-wise softmax under a causal mask: row `i` normalizes over columns
    /// `0..=i` and is exactly zero above the diagonal. Requires a square
    /// matrix (attention scores).
    pub fn softmax_rows_causal(&self) -> Result<Matrix> {
        if self.rows != self.cols {
            return Err(Error::BadDimensions(format!(
                "causal softmax needs a square matrix, got {}x{}",
                self.rows, self.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, self.cols);
        for r in 0..self.rows {
            let visible = &self.row(r)[..=r];
            let max = visible.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let mut denom = 0.0f64;
            let mut exps = vec![0.0f64; r + 1];
            for (c, &x) in visible.iter().enumerate() {
                let e = ((x - max) as f64).exp();
                exps[c] = e;
                denom += e;
            }
            for (c, e) in exps.iter().enumerate() {
                out.set(r, c, (e / denom) as f32);
            }
        }
        Ok(out)
    }

    /// Elementwise `x * sigmoid(x)`, evaluated at 64-bit precision per entry.
    pub fn silu(&self) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| silu_scalar(x)).collect(),
        }
    }

    /// Elementwise product. Shapes must match.
    pub fn hadamard(&self, other: &Matrix) -> Result<Matrix> {
        self.check_same_shape(other, "hadamard")?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a * b)
            .collect();
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    /// Square root of the sum of squared entries, accumulated at 64 bits in
    /// flat index order, returned as `f32`.
    pub fn frobenius_norm(&self) -> f32 {
        let mut acc = 0.0f64;
        for &x in &self.data {
            acc += x as f64 * x as f64;
        }
        acc.sqrt() as f32
    }

    /// Root-mean-square normalization per row: each row is divided by
    /// `sqrt(mean(x^2) + eps)` and scaled elementwise by `gain`.
    pub fn rmsnorm_rows(&self, gain: &[f32], eps: f32) -> Result<Matrix> {
        if gain.len() != self.cols {
            return Err(Error::BadDimensions(format!(
                "gain of length {} does not match {} columns",
                gain.len(),
                self.cols
            )));
        }
        if !(eps > 0.0) {
            return Err(Error::BadDimensions(format!("eps must be > 0, got {eps}")));
        }
        let mut out = Matrix::zeros(self.rows, self.cols);
        for r in 0..self.rows {
            let row = self.row(r);
            let mut sum_sq = 0.0f64;
            for &x in row {
                sum_sq += x as f64 * x as f64;
            }
            let inv = 1.0 / (sum_sq / self.cols as f64 + eps as f64).sqrt();
            for c in 0..self.cols {
                out.set(r, c, (row[c] as f64 * inv * gain[c] as f64) as f32);
            }
        }
        Ok(out)
    }

    /// True when every entry is finite.
    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    fn check_same_shape(&self, other: &Matrix, op: &'static str) -> Result<()> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::ShapeMismatch {
                op,
                left_rows: self.rows,
                left_cols: self.cols,
                right_rows: other.rows,
                right_cols: other.cols,
            });
        }
        Ok(())
    }
}

/// `x * sigmoid(x)` on one value, computed at 64-bit precision.
#[inline]
pub fn silu_scalar(x: f32) -> f32 {
    let x = x as f64;
    (x / (1.0 + (-x).exp())) as f32
}

/// Euclidean norm of a slice, 64-bit accumulation in index order.
pub fn vec_norm(v: &[f32]) -> f64 {
    let mut acc = 0.0f64;
    for &x in v {
        acc += x as f64 * x as f64;
    }
    acc.sqrt()
}

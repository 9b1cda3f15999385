//! Dense row-major f32 matrices plus the handful of kernels that dominate
//! runtime.
//!
//! Everything in the model is expressed over 2-D matrices (vectors are `1 x c`
//! or `r x 1`, scalars are `1 x 1`), which keeps the autodiff tape small and
//! the kernels easy to reason about. Storage is f32; matrix products and
//! reductions accumulate in f64 so that results are stable enough for
//! finite-difference gradient checks.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// Row-major matrix of f32 values.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn full(rows: usize, cols: usize, value: f32) -> Self {
        Matrix { rows, cols, data: vec![value; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Contract(format!(
                "matrix {rows}x{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Single-row matrix from a slice.
    pub fn row_vector(values: &[f32]) -> Self {
        Matrix { rows: 1, cols: values.len(), data: values.to_vec() }
    }

    /// 1x1 matrix.
    pub fn scalar(value: f32) -> Self {
        Matrix { rows: 1, cols: 1, data: vec![value] }
    }

    /// Truncated normal init: N(0, std^2) resampled until |x| <= 2*std.
    pub fn trunc_normal(rows: usize, cols: usize, std: f32, rng: &mut impl Rng) -> Self {
        let dist = Normal::new(0.0f32, std).expect("std must be finite and positive");
        let bound = 2.0 * std;
        let data = (0..rows * cols)
            .map(|_| loop {
                let x = dist.sample(rng);
                if x.abs() <= bound {
                    break x;
                }
            })
            .collect();
        Matrix { rows, cols, data }
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

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f32 {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f32) {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f32] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Errors with `context` if any entry is NaN or infinite.
    pub fn ensure_finite(&self, context: &str) -> Result<()> {
        for (i, v) in self.data.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::Numeric(format!(
                    "{context}: non-finite value {v} at flat index {i} (shape {}x{})",
                    self.rows, self.cols
                )));
            }
        }
        Ok(())
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }
}

/// C = A . B with f64 accumulation.
///
/// Loop order is i-k-j with a per-row f64 accumulator so the inner loop is a
/// contiguous axpy the compiler can vectorize.
pub fn matmul_nn(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::Contract(format!(
            "matmul shape mismatch: {}x{} . {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    let mut acc = vec![0.0f64; b.cols];
    for i in 0..a.rows {
        acc.iter_mut().for_each(|v| *v = 0.0);
        let a_row = a.row(i);
        for (k, &a_ik) in a_row.iter().enumerate() {
            if a_ik == 0.0 {
                continue;
            }
            let a_ik = a_ik as f64;
            let b_row = b.row(k);
            for (j, &b_kj) in b_row.iter().enumerate() {
                acc[j] += a_ik * b_kj as f64;
            }
        }
        let out_row = out.row_mut(i);
        for (o, &v) in out_row.iter_mut().zip(acc.iter()) {
            *o = v as f32;
        }
    }
    Ok(out)
}

/// C = A . B^T with f64 accumulation (rows of both operands are contiguous,
/// so each output entry is a straight dot product).
pub fn matmul_nt(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.cols {
        return Err(Error::Contract(format!(
            "matmul_nt shape mismatch: {}x{} . ({}x{})^T",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = Matrix::zeros(a.rows, b.rows);
    for i in 0..a.rows {
        let a_row = a.row(i);
        let out_row = out.row_mut(i);
        for j in 0..b.rows {
            let b_row = b.row(j);
            let mut acc = 0.0f64;
            for (&x, &y) in a_row.iter().zip(b_row.iter()) {
                acc += x as f64 * y as f64;
            }
            out_row[j] = acc as f32;
        }
    }
    Ok(out)
}

/// C = A^T . B with f64 accumulation (outer loop walks rows of A and B,
/// scattering axpy updates into an f64 accumulator for all of C).
pub fn matmul_tn(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.rows != b.rows {
        return Err(Error::Contract(format!(
            "matmul_tn shape mismatch: ({}x{})^T . {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let (k, c) = (a.cols, b.cols);
    let mut acc = vec![0.0f64; k * c];
    for i in 0..a.rows {
        let a_row = a.row(i);
        let b_row = b.row(i);
        for (p, &a_ip) in a_row.iter().enumerate() {
            if a_ip == 0.0 {
                continue;
            }
            let a_ip = a_ip as f64;
            let acc_row = &mut acc[p * c..(p + 1) * c];
            for (slot, &b_ij) in acc_row.iter_mut().zip(b_row.iter()) {
                *slot += a_ip * b_ij as f64;
            }
        }
    }
    let mut out = Matrix::zeros(k, c);
    for (o, &v) in out.data.iter_mut().zip(acc.iter()) {
        *o = v as f32;
    }
    Ok(out)
}

//! Small dense helpers. Everything is row-major `f64`.
//!
//! Weight matrices are stored `(in, out)`: `y[o] = b[o] + sum_i x[i] * w[i][o]`.
//! The accumulation order for every output column is the same (ascending
//! input index), so two columns holding identical weights produce
//! bit-identical outputs.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length");
        Self { rows, cols, data }
    }

    /// Glorot-uniform initialisation, bound `sqrt(6 / (fan_in + fan_out))`.
    pub fn glorot<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Self {
        let bound = libm::sqrt(6.0 / (rows + cols) as f64);
        let data = (0..rows * cols)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        Self { rows, cols, data }
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }
}

/// `b + x W` for `W` of shape `(x.len(), b.len())`.
pub fn affine(x: &[f64], w: &Matrix, b: &[f64]) -> Vec<f64> {
    debug_assert_eq!(x.len(), w.rows);
    debug_assert_eq!(b.len(), w.cols);
    let mut y = b.to_vec();
    for (i, &xi) in x.iter().enumerate() {
        let row = w.row(i);
        for (yo, &wio) in y.iter_mut().zip(row) {
            *yo += xi * wio;
        }
    }
    y
}

/// `x W` without bias.
pub fn vec_mat(x: &[f64], w: &Matrix) -> Vec<f64> {
    debug_assert_eq!(x.len(), w.rows);
    let mut y = vec![0.0; w.cols];
    for (i, &xi) in x.iter().enumerate() {
        for (yo, &wio) in y.iter_mut().zip(w.row(i)) {
            *yo += xi * wio;
        }
    }
    y
}

/// `W g`: backpropagates an output gradient to the input of `vec_mat`.
pub fn mat_vec(w: &Matrix, g: &[f64]) -> Vec<f64> {
    debug_assert_eq!(g.len(), w.cols);
    (0..w.rows).map(|i| dot(w.row(i), g)).collect()
}

/// `acc += x g^T` (weight gradient of `x W`).
pub fn add_outer(acc: &mut Matrix, x: &[f64], g: &[f64]) {
    debug_assert_eq!(acc.rows, x.len());
    debug_assert_eq!(acc.cols, g.len());
    for (i, &xi) in x.iter().enumerate() {
        if xi == 0.0 {
            continue;
        }
        for (a, &gj) in acc.row_mut(i).iter_mut().zip(g) {
            *a += xi * gj;
        }
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn add_assign(acc: &mut [f64], x: &[f64]) {
    for (a, v) in acc.iter_mut().zip(x) {
        *a += v;
    }
}

#[inline]
pub fn axpy(acc: &mut [f64], alpha: f64, x: &[f64]) {
    for (a, v) in acc.iter_mut().zip(x) {
        *a += alpha * v;
    }
}

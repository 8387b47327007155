//! Minimal dense-matrix support for the fixed classifier architecture.
//!
//! Everything is `f64`, row-major, and deliberately loop-based: the model is
//! small enough that a BLAS dependency buys nothing, and explicit loops keep
//! summation order fixed for bit-reproducibility.

use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut m = Self::zeros(rows, cols);
        for r in 0..rows {
            for c in 0..cols {
                m.data[r * cols + c] = f(r, c);
            }
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `x · wᵀ + b` where `x` is `[t × in]` and `w` is `[out × in]`.
    ///
    /// Row `u` of `w` holds the incoming weights of output unit `u`, matching
    /// the per-neuron ablation convention used throughout the crate.
    pub fn affine(x: &Matrix, w: &Matrix, b: &[f64]) -> Matrix {
        debug_assert_eq!(x.cols, w.cols);
        debug_assert_eq!(w.rows, b.len());
        let mut out = Matrix::zeros(x.rows, w.rows);
        for t in 0..x.rows {
            let xr = x.row(t);
            let or = out.row_mut(t);
            for u in 0..w.rows {
                let wr = w.row(u);
                let mut acc = 0.0;
                for j in 0..xr.len() {
                    acc += xr[j] * wr[j];
                }
                or[u] = acc + b[u];
            }
        }
        out
    }
}

/// Numerically stable in-place softmax.
pub fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn affine_matches_hand_computation() {
        let x = Matrix::from_fn(2, 3, |r, c| (r * 3 + c) as f64);
        let w = Matrix::from_fn(2, 3, |r, c| if r == c { 1.0 } else { 0.0 });
        let b = [10.0, 20.0];
        let y = Matrix::affine(&x, &w, &b);
        assert_eq!(y.row(0), &[10.0, 21.0]);
        assert_eq!(y.row(1), &[13.0, 24.0]);
    }

    #[test]
    fn softmax_normalizes() {
        let mut v = [1.0, 2.0, 3.0, -500.0];
        softmax_in_place(&mut v);
        let sum: f64 = v.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
        assert!(v.iter().all(|x| *x >= 0.0));
    }
}

//! Thin wrappers over faer's dense kernels.
//!
//! All products run sequentially so that reductions have a fixed order and
//! training trajectories are bit-reproducible on a given machine.

use faer::linalg::matmul::matmul;
use faer::{Accum, Mat, MatRef, Par};

/// `a · b`
pub fn mm(a: MatRef<'_, f64>, b: MatRef<'_, f64>) -> Mat<f64> {
    let mut out = Mat::zeros(a.nrows(), b.ncols());
    matmul(out.as_mut(), Accum::Replace, a, b, 1.0, Par::Seq);
    out
}

/// `out += alpha · a · b`
pub fn mm_acc(out: &mut Mat<f64>, a: MatRef<'_, f64>, b: MatRef<'_, f64>, alpha: f64) {
    matmul(out.as_mut(), Accum::Add, a, b, alpha, Par::Seq);
}

/// Elementwise square.
pub fn squared(a: MatRef<'_, f64>) -> Mat<f64> {
    Mat::from_fn(a.nrows(), a.ncols(), |i, j| {
        let x = a[(i, j)];
        x * x
    })
}

/// Column sums.
pub fn col_sums(a: &Mat<f64>) -> Vec<f64> {
    (0..a.ncols())
        .map(|j| a.col_as_slice(j).iter().sum())
        .collect()
}

/// Column sums of squares.
pub fn col_sq_sums(a: &Mat<f64>) -> Vec<f64> {
    (0..a.ncols())
        .map(|j| a.col_as_slice(j).iter().map(|x| x * x).sum())
        .collect()
}

/// In-place `a ∘= b`.
pub fn hadamard_in_place(a: &mut Mat<f64>, b: &Mat<f64>) {
    debug_assert_eq!((a.nrows(), a.ncols()), (b.nrows(), b.ncols()));
    for j in 0..a.ncols() {
        let bj = b.col_as_slice(j);
        for (x, y) in a.col_as_slice_mut(j).iter_mut().zip(bj) {
            *x *= y;
        }
    }
}

/// In-place masking by the ReLU pattern of `post` (zero where `post <= 0`).
pub fn relu_mask_in_place(a: &mut Mat<f64>, post: &Mat<f64>) {
    for j in 0..a.ncols() {
        let pj = post.col_as_slice(j);
        for (x, &h) in a.col_as_slice_mut(j).iter_mut().zip(pj) {
            if h <= 0.0 {
                *x = 0.0;
            }
        }
    }
}

/// Column-major matrix from a row-major slice.
pub fn from_row_major(rows: usize, cols: usize, data: &[f64]) -> Mat<f64> {
    debug_assert_eq!(data.len(), rows * cols);
    Mat::from_fn(rows, cols, |i, j| data[i * cols + j])
}

/// Adds `m` into a row-major destination slice.
pub fn add_row_major(dst: &mut [f64], m: &Mat<f64>) {
    let cols = m.ncols();
    debug_assert_eq!(dst.len(), m.nrows() * cols);
    for j in 0..cols {
        for (i, &x) in m.col_as_slice(j).iter().enumerate() {
            dst[i * cols + j] += x;
        }
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm_sq(a: &[f64]) -> f64 {
    a.iter().map(|x| x * x).sum()
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let denom = (norm_sq(a) * norm_sq(b)).sqrt();
    if denom == 0.0 {
        0.0
    } else {
        (dot(a, b) / denom).clamp(-1.0, 1.0)
    }
}

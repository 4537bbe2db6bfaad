//! Orthonormal type-II DCT and its inverse, separable over rows and columns.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use ndarray::{Array2, Array3, ArrayView2, ArrayView3};

/// Basis matrix for the orthonormal type-II DCT of length `n`.
///
/// Row `k`, column `i`: s(k) * cos(pi * (2i + 1) * k / (2n)) with
/// s(0) = sqrt(1/n) and s(k) = sqrt(2/n) otherwise. The matrix is
/// orthogonal, so the inverse transform is its transpose.
pub fn dct_matrix(n: usize) -> Arc<Array2<f64>> {
    static CACHE: OnceLock<Mutex<HashMap<usize, Arc<Array2<f64>>>>> = OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    let mut guard = cache.lock().expect("dct cache poisoned");
    guard
        .entry(n)
        .or_insert_with(|| {
            let mut m = Array2::<f64>::zeros((n, n));
            let s0 = (1.0 / n as f64).sqrt();
            let sk = (2.0 / n as f64).sqrt();
            for k in 0..n {
                let scale = if k == 0 { s0 } else { sk };
                for i in 0..n {
                    m[(k, i)] = scale
                        * (std::f64::consts::PI * (2.0 * i as f64 + 1.0) * k as f64
                            / (2.0 * n as f64))
                            .cos();
                }
            }
            Arc::new(m)
        })
        .clone()
}

/// 2-D DCT of a single plane: C_h * X * C_w^T.
pub fn dct2_plane(x: &ArrayView2<f64>) -> Array2<f64> {
    let (h, w) = x.dim();
    let ch = dct_matrix(h);
    let cw = dct_matrix(w);
    ch.dot(x).dot(&cw.t())
}

/// Inverse of [`dct2_plane`]: C_h^T * X * C_w.
pub fn idct2_plane(x: &ArrayView2<f64>) -> Array2<f64> {
    let (h, w) = x.dim();
    let ch = dct_matrix(h);
    let cw = dct_matrix(w);
    ch.t().dot(x).dot(&*cw)
}

/// Applies [`dct2_plane`] to every channel of a (C, H, W) image.
pub fn dct2_channels(x: &ArrayView3<f64>) -> Array3<f64> {
    let (c, h, w) = x.dim();
    let mut out = Array3::<f64>::zeros((c, h, w));
    for ch in 0..c {
        out.index_axis_mut(ndarray::Axis(0), ch)
            .assign(&dct2_plane(&x.index_axis(ndarray::Axis(0), ch)));
    }
    out
}

/// Applies [`idct2_plane`] to every channel of a (C, H, W) spectrum.
pub fn idct2_channels(x: &ArrayView3<f64>) -> Array3<f64> {
    let (c, h, w) = x.dim();
    let mut out = Array3::<f64>::zeros((c, h, w));
    for ch in 0..c {
        out.index_axis_mut(ndarray::Axis(0), ch)
            .assign(&idct2_plane(&x.index_axis(ndarray::Axis(0), ch)));
    }
    out
}

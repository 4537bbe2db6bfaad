//! Dense compute kernels behind the graph ops.
//!
//! Convolutions go through im2col + GEMM. Parallelism is over the batch
//! axis only, with per-sample partials combined in a fixed order, so
//! results are bit-identical regardless of thread count.

use ndarray::{
    linalg::general_mat_mul, Array1, Array2, Array4, ArrayView1, ArrayView2, ArrayView4, Axis,
};
use ndarray::parallel::prelude::*;

/// Output spatial size of a convolution along one axis.
pub fn conv_out_len(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - kernel) / stride + 1
}

/// Lays out the receptive fields of one sample as a (Cin*kh*kw, Ho*Wo) matrix.
fn im2col(
    x: &ArrayView2<f64>, // (Cin, H*W) for one sample, flattened spatial
    c_in: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Array2<f64> {
    let ho = conv_out_len(h, kh, stride, pad);
    let wo = conv_out_len(w, kw, stride, pad);
    let mut cols = Array2::<f64>::zeros((c_in * kh * kw, ho * wo));
    for c in 0..c_in {
        let plane = x.row(c);
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (c * kh + ky) * kw + kx;
                let mut out_row = cols.row_mut(row);
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = iy as usize * w;
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        out_row[oy * wo + ox] = plane[base + ix as usize];
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-adds a column matrix back into an image plane (adjoint of im2col).
fn col2im_accum(
    cols: &ArrayView2<f64>,
    c_in: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    out: &mut ndarray::ArrayViewMut2<f64>, // (Cin, H*W)
) {
    let ho = conv_out_len(h, kh, stride, pad);
    let wo = conv_out_len(w, kw, stride, pad);
    for c in 0..c_in {
        let mut plane = out.row_mut(c);
        for ky in 0..kh {
            for kx in 0..kw {
                let row = cols.row((c * kh + ky) * kw + kx);
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = iy as usize * w;
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        plane[base + ix as usize] += row[oy * wo + ox];
                    }
                }
            }
        }
    }
}

/// Batched 2-D convolution. `x` is (N, Cin, H, W), `w` is (Cout, Cin, kh, kw).
pub fn conv2d_forward(
    x: &ArrayView4<f64>,
    w: &ArrayView4<f64>,
    b: Option<&ArrayView1<f64>>,
    stride: usize,
    pad: usize,
) -> Array4<f64> {
    let (n, c_in, h, wd) = x.dim();
    let (c_out, _, kh, kw) = w.dim();
    let ho = conv_out_len(h, kh, stride, pad);
    let wo = conv_out_len(wd, kw, stride, pad);
    let w_mat = w
        .to_shape((c_out, c_in * kh * kw))
        .expect("contiguous weight")
        .to_owned();
    let mut out = Array4::<f64>::zeros((n, c_out, ho, wo));
    out.axis_iter_mut(Axis(0))
        .into_par_iter()
        .enumerate()
        .for_each(|(i, mut out_i)| {
            let xi = x.index_axis(Axis(0), i);
            let xi = xi.to_shape((c_in, h * wd)).expect("contiguous input");
            let cols = im2col(&xi.view(), c_in, h, wd, kh, kw, stride, pad);
            let mut prod = Array2::<f64>::zeros((c_out, ho * wo));
            general_mat_mul(1.0, &w_mat, &cols, 0.0, &mut prod);
            if let Some(bias) = b {
                for (c, mut row) in prod.axis_iter_mut(Axis(0)).enumerate() {
                    row += bias[c];
                }
            }
            out_i.assign(
                &prod
                    .into_shape_with_order((c_out, ho, wo))
                    .expect("reshape"),
            );
        });
    out
}

/// Gradients of [`conv2d_forward`] with respect to input, weight, and bias.
pub fn conv2d_backward(
    x: &ArrayView4<f64>,
    w: &ArrayView4<f64>,
    grad_out: &ArrayView4<f64>,
    stride: usize,
    pad: usize,
    with_bias: bool,
) -> (Array4<f64>, Array4<f64>, Option<Array1<f64>>) {
    let (n, c_in, h, wd) = x.dim();
    let (c_out, _, kh, kw) = w.dim();
    let (_, _, ho, wo) = grad_out.dim();
    let k = c_in * kh * kw;
    let w_mat = w.to_shape((c_out, k)).expect("contiguous weight").to_owned();

    let mut dx = Array4::<f64>::zeros((n, c_in, h, wd));
    // Per-sample weight partials, later summed in sample order.
    let partials: Vec<Array2<f64>> = dx
        .axis_iter_mut(Axis(0))
        .into_par_iter()
        .enumerate()
        .map(|(i, mut dx_i)| {
            let xi = x.index_axis(Axis(0), i);
            let xi = xi.to_shape((c_in, h * wd)).expect("contiguous input");
            let cols = im2col(&xi.view(), c_in, h, wd, kh, kw, stride, pad);
            let go = grad_out.index_axis(Axis(0), i);
            let go = go.to_shape((c_out, ho * wo)).expect("contiguous grad");
            let mut dw_i = Array2::<f64>::zeros((c_out, k));
            general_mat_mul(1.0, &go, &cols.t(), 0.0, &mut dw_i);
            let mut dcols = Array2::<f64>::zeros((k, ho * wo));
            general_mat_mul(1.0, &w_mat.t(), &go, 0.0, &mut dcols);
            let mut dx_flat = dx_i.view_mut().into_shape_with_order((c_in, h * wd)).expect("reshape");
            col2im_accum(&dcols.view(), c_in, h, wd, kh, kw, stride, pad, &mut dx_flat);
            dw_i
        })
        .collect();

    let mut dw_mat = Array2::<f64>::zeros((c_out, k));
    for p in &partials {
        dw_mat += p;
    }
    let dw = dw_mat
        .into_shape_with_order((c_out, c_in, kh, kw))
        .expect("reshape");

    let db = if with_bias {
        let mut db = Array1::<f64>::zeros(c_out);
        for i in 0..n {
            for c in 0..c_out {
                db[c] += grad_out.index_axis(Axis(0), i).index_axis(Axis(0), c).sum();
            }
        }
        Some(db)
    } else {
        None
    };
    (dx, dw, db)
}

/// 2x2 max pooling with stride 2. Returns the pooled output and flat argmax
/// indices (into each input plane) used by the backward pass.
pub fn maxpool2_forward(x: &ArrayView4<f64>) -> (Array4<f64>, Vec<u32>) {
    let (n, c, h, w) = x.dim();
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Array4::<f64>::zeros((n, c, ho, wo));
    let mut idx = vec![0u32; n * c * ho * wo];
    for i in 0..n {
        for ch in 0..c {
            let plane = x.index_axis(Axis(0), i);
            let plane = plane.index_axis(Axis(0), ch);
            for oy in 0..ho {
                for ox in 0..wo {
                    let (mut best, mut best_at) = (f64::NEG_INFINITY, 0usize);
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let (y, xx) = (oy * 2 + dy, ox * 2 + dx);
                            let v = plane[(y, xx)];
                            if v > best {
                                best = v;
                                best_at = y * w + xx;
                            }
                        }
                    }
                    out[(i, ch, oy, ox)] = best;
                    idx[((i * c + ch) * ho + oy) * wo + ox] = best_at as u32;
                }
            }
        }
    }
    (out, idx)
}

pub fn maxpool2_backward(
    grad_out: &ArrayView4<f64>,
    idx: &[u32],
    input_dim: (usize, usize, usize, usize),
) -> Array4<f64> {
    let (n, c, h, w) = input_dim;
    let (_, _, ho, wo) = grad_out.dim();
    let mut dx = Array4::<f64>::zeros((n, c, h, w));
    for i in 0..n {
        for ch in 0..c {
            for oy in 0..ho {
                for ox in 0..wo {
                    let at = idx[((i * c + ch) * ho + oy) * wo + ox] as usize;
                    dx[(i, ch, at / w, at % w)] += grad_out[(i, ch, oy, ox)];
                }
            }
        }
    }
    dx
}

/// 2x2 average pooling with stride 2.
pub fn avgpool2_forward(x: &ArrayView4<f64>) -> Array4<f64> {
    let (n, c, h, w) = x.dim();
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Array4::<f64>::zeros((n, c, ho, wo));
    for i in 0..n {
        for ch in 0..c {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut s = 0.0;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            s += x[(i, ch, oy * 2 + dy, ox * 2 + dx)];
                        }
                    }
                    out[(i, ch, oy, ox)] = s * 0.25;
                }
            }
        }
    }
    out
}

pub fn avgpool2_backward(grad_out: &ArrayView4<f64>, input_dim: (usize, usize, usize, usize)) -> Array4<f64> {
    let (n, c, h, w) = input_dim;
    let mut dx = Array4::<f64>::zeros((n, c, h, w));
    for i in 0..n {
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    dx[(i, ch, y, x)] = grad_out[(i, ch, y / 2, x / 2)] * 0.25;
                }
            }
        }
    }
    dx
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample2_forward(x: &ArrayView4<f64>) -> Array4<f64> {
    let (n, c, h, w) = x.dim();
    let mut out = Array4::<f64>::zeros((n, c, h * 2, w * 2));
    for i in 0..n {
        for ch in 0..c {
            for y in 0..h * 2 {
                for xx in 0..w * 2 {
                    out[(i, ch, y, xx)] = x[(i, ch, y / 2, xx / 2)];
                }
            }
        }
    }
    out
}

pub fn upsample2_backward(grad_out: &ArrayView4<f64>) -> Array4<f64> {
    let (n, c, h2, w2) = grad_out.dim();
    let (h, w) = (h2 / 2, w2 / 2);
    let mut dx = Array4::<f64>::zeros((n, c, h, w));
    for i in 0..n {
        for ch in 0..c {
            for y in 0..h2 {
                for xx in 0..w2 {
                    dx[(i, ch, y / 2, xx / 2)] += grad_out[(i, ch, y, xx)];
                }
            }
        }
    }
    dx
}

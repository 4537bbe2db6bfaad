//! Domain-specific graph ops plugged into the autodiff engine.

use facl_tensor::{CustomOp, TensorError};
use ndarray::{Array2, ArrayD, Ix4};

use crate::spectral::dct::{dct2_plane, idct2_plane};

type OpResult<T> = std::result::Result<T, TensorError>;

/// Multiplies each channel's DCT spectrum by a fixed (H, W) mask and
/// inverts. The operator is self-adjoint (orthonormal transform, diagonal
/// mask), so the backward pass applies the same filter to the gradient.
pub struct SpectralFilterOp {
    pub mask: Array2<f64>,
}

impl SpectralFilterOp {
    fn apply(&self, x: &ArrayD<f64>) -> OpResult<ArrayD<f64>> {
        let x = x
            .view()
            .into_dimensionality::<Ix4>()
            .map_err(|_| TensorError::ShapeMismatch("spectral filter expects 4-d".into()))?;
        let (n, c, h, w) = x.dim();
        if self.mask.dim() != (h, w) {
            return Err(TensorError::ShapeMismatch(format!(
                "mask {:?} vs image ({h}, {w})",
                self.mask.dim()
            )));
        }
        let mut out = ndarray::Array4::<f64>::zeros((n, c, h, w));
        for i in 0..n {
            for ch in 0..c {
                let plane = x.index_axis(ndarray::Axis(0), i);
                let plane = plane.index_axis(ndarray::Axis(0), ch);
                let filtered = idct2_plane(&(dct2_plane(&plane) * &self.mask).view());
                out.index_axis_mut(ndarray::Axis(0), i)
                    .index_axis_mut(ndarray::Axis(0), ch)
                    .assign(&filtered);
            }
        }
        Ok(out.into_dyn())
    }
}

impl CustomOp for SpectralFilterOp {
    fn name(&self) -> &'static str {
        "spectral_filter"
    }

    fn forward(&self, inputs: &[&ArrayD<f64>]) -> OpResult<ArrayD<f64>> {
        crate::spectral::instrument::note_decompose();
        self.apply(inputs[0])
    }

    fn backward(
        &self,
        grad_out: &ArrayD<f64>,
        _inputs: &[&ArrayD<f64>],
        _output: &ArrayD<f64>,
    ) -> OpResult<Vec<Option<ArrayD<f64>>>> {
        Ok(vec![Some(self.apply(grad_out)?)])
    }
}

/// Projects an unbounded adversarial batch into the l-inf ball of radius
/// `epsilon` around `reference`, then into the valid pixel range.
///
/// The budget bound holds under f64 comparison: the per-pixel bounds are
/// nudged down by ulps until `bound - r <= epsilon` evaluates true.
///
/// Gradients use the straight-through convention: the clamp passes the
/// gradient unchanged.
pub struct ProjectOp {
    pub reference: ArrayD<f64>,
    pub epsilon: f64,
    pub pixel_min: f64,
    pub pixel_max: f64,
}

fn next_down(x: f64) -> f64 {
    if x.is_nan() || x == f64::NEG_INFINITY {
        return x;
    }
    let bits = x.to_bits();
    if x > 0.0 {
        f64::from_bits(bits - 1)
    } else if x < 0.0 {
        f64::from_bits(bits + 1)
    } else {
        -f64::from_bits(1)
    }
}

fn next_up(x: f64) -> f64 {
    if x.is_nan() || x == f64::INFINITY {
        return x;
    }
    let bits = x.to_bits();
    if x >= 0.0 {
        f64::from_bits(bits + 1)
    } else {
        f64::from_bits(bits - 1)
    }
}

/// Per-pixel projection: clamp into [r - eps, r + eps] (with the bound
/// tightened so that the computed difference never exceeds eps), then
/// into [pixel_min, pixel_max].
pub fn project_pixel(unbounded: f64, reference: f64, epsilon: f64, lo: f64, hi: f64) -> f64 {
    let mut upper = reference + epsilon;
    while upper - reference > epsilon {
        upper = next_down(upper);
    }
    let mut lower = reference - epsilon;
    while reference - lower > epsilon {
        lower = next_up(lower);
    }
    unbounded.clamp(lower, upper).clamp(lo, hi)
}

impl ProjectOp {
    fn apply(&self, u: &ArrayD<f64>) -> OpResult<ArrayD<f64>> {
        if u.shape() != self.reference.shape() {
            return Err(TensorError::ShapeMismatch(format!(
                "project: unbounded {:?} vs reference {:?}",
                u.shape(),
                self.reference.shape()
            )));
        }
        let mut out = u.clone();
        ndarray::Zip::from(&mut out)
            .and(&self.reference)
            .for_each(|o, &r| {
                *o = project_pixel(*o, r, self.epsilon, self.pixel_min, self.pixel_max);
            });
        Ok(out)
    }
}

impl CustomOp for ProjectOp {
    fn name(&self) -> &'static str {
        "project"
    }

    fn forward(&self, inputs: &[&ArrayD<f64>]) -> OpResult<ArrayD<f64>> {
        self.apply(inputs[0])
    }

    fn backward(
        &self,
        grad_out: &ArrayD<f64>,
        _inputs: &[&ArrayD<f64>],
        _output: &ArrayD<f64>,
    ) -> OpResult<Vec<Option<ArrayD<f64>>>> {
        Ok(vec![Some(grad_out.clone())])
    }
}

/// Maps raw 0-255 pixels into a model's input distribution:
/// y_c = (x_c / 255 - mean_c) / std_c.
pub struct NormalizeOp {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl CustomOp for NormalizeOp {
    fn name(&self) -> &'static str {
        "normalize"
    }

    fn forward(&self, inputs: &[&ArrayD<f64>]) -> OpResult<ArrayD<f64>> {
        let x = inputs[0]
            .view()
            .into_dimensionality::<Ix4>()
            .map_err(|_| TensorError::ShapeMismatch("normalize expects 4-d".into()))?;
        let (n, c, h, w) = x.dim();
        if c != self.mean.len() || c != self.std.len() {
            return Err(TensorError::ShapeMismatch(format!(
                "normalize: {c} channels vs {} stats",
                self.mean.len()
            )));
        }
        let mut out = ndarray::Array4::<f64>::zeros((n, c, h, w));
        for i in 0..n {
            for ch in 0..c {
                let (m, s) = (self.mean[ch], self.std[ch]);
                for y in 0..h {
                    for xx in 0..w {
                        out[(i, ch, y, xx)] = (x[(i, ch, y, xx)] / 255.0 - m) / s;
                    }
                }
            }
        }
        Ok(out.into_dyn())
    }

    fn backward(
        &self,
        grad_out: &ArrayD<f64>,
        _inputs: &[&ArrayD<f64>],
        _output: &ArrayD<f64>,
    ) -> OpResult<Vec<Option<ArrayD<f64>>>> {
        let go = grad_out
            .view()
            .into_dimensionality::<Ix4>()
            .map_err(|_| TensorError::ShapeMismatch("normalize grad expects 4-d".into()))?;
        let (n, c, h, w) = go.dim();
        let mut dx = ndarray::Array4::<f64>::zeros((n, c, h, w));
        for i in 0..n {
            for ch in 0..c {
                let k = 1.0 / (255.0 * self.std[ch]);
                for y in 0..h {
                    for xx in 0..w {
                        dx[(i, ch, y, xx)] = go[(i, ch, y, xx)] * k;
                    }
                }
            }
        }
        Ok(vec![Some(dx.into_dyn())])
    }
}

/// Affine map y = a * x + b applied elementwise; used to move generator
/// outputs from tanh range onto the pixel scale.
pub struct AffineOp {
    pub scale: f64,
    pub shift: f64,
}

impl CustomOp for AffineOp {
    fn name(&self) -> &'static str {
        "affine"
    }

    fn forward(&self, inputs: &[&ArrayD<f64>]) -> OpResult<ArrayD<f64>> {
        Ok(inputs[0].mapv(|v| v * self.scale + self.shift))
    }

    fn backward(
        &self,
        grad_out: &ArrayD<f64>,
        _inputs: &[&ArrayD<f64>],
        _output: &ArrayD<f64>,
    ) -> OpResult<Vec<Option<ArrayD<f64>>>> {
        Ok(vec![Some(grad_out.mapv(|v| v * self.scale))])
    }
}

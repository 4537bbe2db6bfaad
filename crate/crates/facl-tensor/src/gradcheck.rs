//! Central finite-difference gradient checking.
//!
//! The closure under test must be a deterministic function of the parameter
//! store (fix all seeds and inputs before calling).

use crate::optim::TensorMap;

/// Result of comparing one analytic gradient entry against finite differences.
#[derive(Debug, Clone)]
pub struct GradMismatch {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

/// Compares `analytic` gradients against central finite differences of
/// `loss_fn` for every element of every parameter listed in `analytic`.
///
/// Returns the worst relative error and any entries exceeding `tol`.
/// Relative error is |a - n| / max(|a|, |n|, floor); `floor` sets the
/// absolute scale below which differences are treated as noise.
pub fn check_gradients<F>(
    params: &TensorMap,
    analytic: &[(String, ndarray::ArrayD<f64>)],
    loss_fn: F,
    step: f64,
    tol: f64,
    floor: f64,
) -> (f64, Vec<GradMismatch>)
where
    F: FnMut(&TensorMap) -> f64,
{
    check_gradients_sampled(params, analytic, loss_fn, step, tol, floor, usize::MAX)
}

/// Like [`check_gradients`] but probing at most `max_per_tensor` evenly
/// strided coordinates of each tensor; full sweeps over larger models are
/// too slow and every tensor still gets covered.
pub fn check_gradients_sampled<F>(
    params: &TensorMap,
    analytic: &[(String, ndarray::ArrayD<f64>)],
    mut loss_fn: F,
    step: f64,
    tol: f64,
    floor: f64,
    max_per_tensor: usize,
) -> (f64, Vec<GradMismatch>)
where
    F: FnMut(&TensorMap) -> f64,
{
    let mut worst = 0.0f64;
    let mut bad = Vec::new();
    let mut work = params.clone();
    for (name, grad) in analytic {
        let flat_len = grad.len();
        let count = flat_len.min(max_per_tensor);
        let stride = (flat_len / count).max(1);
        for j in 0..count {
            let idx = (j * stride).min(flat_len - 1);
            let orig = work.get(name).unwrap().as_slice().unwrap()[idx];
            let h = step * orig.abs().max(1.0);

            work.get_mut(name).unwrap().as_slice_mut().unwrap()[idx] = orig + h;
            let plus = loss_fn(&work);
            work.get_mut(name).unwrap().as_slice_mut().unwrap()[idx] = orig - h;
            let minus = loss_fn(&work);
            work.get_mut(name).unwrap().as_slice_mut().unwrap()[idx] = orig;

            let numeric = (plus - minus) / (2.0 * h);
            let analytic_v = grad.as_slice().unwrap()[idx];
            let denom = analytic_v.abs().max(numeric.abs()).max(floor);
            let rel = (analytic_v - numeric).abs() / denom;
            if rel > worst {
                worst = rel;
            }
            if rel > tol {
                bad.push(GradMismatch {
                    param: name.clone(),
                    index: idx,
                    analytic: analytic_v,
                    numeric,
                    rel_err: rel,
                });
            }
        }
    }
    (worst, bad)
}

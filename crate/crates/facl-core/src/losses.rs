//! Feature-contrast losses: the baseline separation loss, the
//! band-contrastive loss, and the weighted total objective.

use facl_tensor::{Graph, TensorId};
use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Norm stabilizer guarding against all-zero features.
pub const ETA: f64 = 1e-8;

/// Loss coefficients of the total objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_orig: f64,
    pub lambda_facl: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_orig: 1.0,
            lambda_facl: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_orig < 0.0 || self.lambda_facl < 0.0 {
            return Err(Error::Config("loss weights must be nonnegative".into()));
        }
        if self.lambda_orig == 0.0 && self.lambda_facl == 0.0 {
            return Err(Error::Config("loss weights must not both be zero".into()));
        }
        Ok(())
    }
}

/// The four feature batches contrasted by the band loss: mid-band and
/// low/high-band features of the clean and adversarial images.
#[derive(Debug, Clone)]
pub struct FeaturePairSet<'a> {
    pub z_mid_clean: ArrayView2<'a, f64>,
    pub z_mid_adv: ArrayView2<'a, f64>,
    pub z_lh_clean: ArrayView2<'a, f64>,
    pub z_lh_adv: ArrayView2<'a, f64>,
}

impl FeaturePairSet<'_> {
    pub fn validate(&self) -> Result<()> {
        let d = self.z_mid_clean.dim();
        if self.z_mid_adv.dim() != d || self.z_lh_clean.dim() != d || self.z_lh_adv.dim() != d {
            return Err(Error::InvalidInput(
                "feature pair set batches must share one shape".into(),
            ));
        }
        Ok(())
    }
}

/// Cosine similarity of two vectors with the norm stabilizer. Both-zero
/// vectors degenerate to 0 (with a warning).
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na <= ETA && nb <= ETA {
        log::warn!("cosine_similarity: both vectors are (near-)zero, returning 0");
    }
    dot / (na.max(ETA) * nb.max(ETA))
}

/// Mean per-row cosine similarity of two (N, D) batches.
pub fn batch_cosine_mean(a: &ArrayView2<f64>, b: &ArrayView2<f64>) -> f64 {
    let n = a.nrows();
    let mut acc = 0.0;
    for i in 0..n {
        acc += cosine_similarity(a.row(i).as_slice().unwrap(), b.row(i).as_slice().unwrap());
    }
    acc / n as f64
}

/// Baseline separation loss: mean cosine similarity between clean and
/// adversarial features at the same tap. Minimizing pushes them apart.
pub fn loss_orig(clean: &ArrayView2<f64>, adv: &ArrayView2<f64>) -> Result<f64> {
    if clean.dim() != adv.dim() {
        return Err(Error::InvalidInput("loss_orig: shape mismatch".into()));
    }
    Ok(batch_cosine_mean(clean, adv))
}

/// Band-contrastive loss: sim(mid pair) - sim(low/high pair), averaged over
/// the batch. In [-2, 2]; minimizing repels mid-band features and attracts
/// low/high-band features.
pub fn loss_facl(pairs: &FeaturePairSet) -> Result<f64> {
    pairs.validate()?;
    let mid = batch_cosine_mean(&pairs.z_mid_clean, &pairs.z_mid_adv);
    let lh = batch_cosine_mean(&pairs.z_lh_clean, &pairs.z_lh_adv);
    Ok(mid - lh)
}

/// Weighted total objective.
pub fn total_loss(l_orig: f64, l_facl: f64, weights: &LossWeights) -> Result<f64> {
    if !l_orig.is_finite() || !l_facl.is_finite() {
        return Err(Error::Training(format!(
            "non-finite loss components: orig={l_orig}, facl={l_facl}"
        )));
    }
    Ok(weights.lambda_orig * l_orig + weights.lambda_facl * l_facl)
}

/// Graph node for the baseline loss over (N, D) feature nodes.
pub fn loss_orig_node(g: &mut Graph, clean: TensorId, adv: TensorId) -> TensorId {
    g.cosine_sim_mean(clean, adv, ETA)
}

/// Graph node for the band-contrastive loss.
pub fn loss_facl_node(
    g: &mut Graph,
    z_mid_clean: TensorId,
    z_mid_adv: TensorId,
    z_lh_clean: TensorId,
    z_lh_adv: TensorId,
) -> TensorId {
    let mid = g.cosine_sim_mean(z_mid_clean, z_mid_adv, ETA);
    let lh = g.cosine_sim_mean(z_lh_clean, z_lh_adv, ETA);
    let neg_lh = g.scale(lh, -1.0);
    g.add(mid, neg_lh)
}

/// Graph node for the weighted total objective.
pub fn total_loss_node(
    g: &mut Graph,
    l_orig: TensorId,
    l_facl: TensorId,
    weights: &LossWeights,
) -> TensorId {
    let a = g.scale(l_orig, weights.lambda_orig);
    let b = g.scale(l_facl, weights.lambda_facl);
    g.add(a, b)
}

//! The perturbation generator: a ResNet-style image-to-image network with
//! down-sampling, residual, and up-sampling blocks, plus the budget
//! projector.

use std::path::Path;
use std::sync::Arc;

use facl_tensor::{init, Graph, TensorId, TensorMap};
use ndarray::{ArrayD, ArrayView4, Ix4};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::ops::{AffineOp, ProjectOp};

/// Valid pixel range of all images in the pipeline.
pub const PIXEL_MIN: f64 = 0.0;
pub const PIXEL_MAX: f64 = 255.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub input_channels: usize,
    pub base_width: usize,
    pub num_residual_blocks: usize,
    pub input_resolution: usize,
    /// Pixel-unit scale of the tanh perturbation head. Matching the
    /// perturbation budget keeps the head's output strictly inside the
    /// ball, so the hard projector never starves gradients.
    pub output_scale: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            input_channels: 3,
            base_width: 64,
            num_residual_blocks: 6,
            input_resolution: 32,
            output_scale: 10.0,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_channels == 0 || self.base_width == 0 {
            return Err(Error::Config("generator widths must be positive".into()));
        }
        if self.input_resolution % 4 != 0 || self.input_resolution < 8 {
            return Err(Error::Config(format!(
                "input_resolution ({}) must be a multiple of 4 and >= 8",
                self.input_resolution
            )));
        }
        Ok(())
    }
}

/// The l-inf perturbation budget in raw 0-255 pixel units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerturbationBudget {
    pub epsilon: f64,
}

impl Default for PerturbationBudget {
    fn default() -> Self {
        PerturbationBudget { epsilon: 10.0 }
    }
}

impl PerturbationBudget {
    pub fn new(epsilon: f64) -> Result<Self> {
        if !(epsilon > 0.0) || !epsilon.is_finite() {
            return Err(Error::Config(format!("epsilon ({epsilon}) must be > 0")));
        }
        Ok(PerturbationBudget { epsilon })
    }
}

/// Initializes generator parameters for `config`, deterministically from
/// the seed.
pub fn init_generator(config: &GeneratorConfig, seed: u64) -> Result<TensorMap> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = TensorMap::new();
    let (cin, w) = (config.input_channels, config.base_width);
    let (w2, w4) = (w * 2, w * 4);

    let conv = |p: &mut TensorMap, rng: &mut ChaCha8Rng, name: &str, co: usize, ci: usize, k: usize| {
        p.insert(format!("{name}.w"), init::conv_weight(rng, co, ci, k, k));
    };
    let norm = |p: &mut TensorMap, name: &str, c: usize| {
        p.insert(format!("{name}.g"), init::ones(&[c]));
        p.insert(format!("{name}.b"), init::zeros(&[c]));
    };

    conv(&mut p, &mut rng, "enc.conv", w, cin, 7);
    norm(&mut p, "enc.in", w);
    conv(&mut p, &mut rng, "down1.conv", w2, w, 3);
    norm(&mut p, "down1.in", w2);
    conv(&mut p, &mut rng, "down2.conv", w4, w2, 3);
    norm(&mut p, "down2.in", w4);
    for i in 0..config.num_residual_blocks {
        conv(&mut p, &mut rng, &format!("res{i}.conv1"), w4, w4, 3);
        norm(&mut p, &format!("res{i}.in1"), w4);
        conv(&mut p, &mut rng, &format!("res{i}.conv2"), w4, w4, 3);
        norm(&mut p, &format!("res{i}.in2"), w4);
    }
    conv(&mut p, &mut rng, "up1.conv", w2, w4, 3);
    norm(&mut p, "up1.in", w2);
    conv(&mut p, &mut rng, "up2.conv", w, w2, 3);
    norm(&mut p, "up2.in", w);
    conv(&mut p, &mut rng, "out.conv", cin, w, 7);
    p.insert("out.conv.b", init::conv_bias(&mut rng, cin, w * 49));
    Ok(p)
}

/// Graph nodes produced by a generator forward pass.
pub struct GeneratorForward {
    /// Unbounded adversarial image on the pixel scale (tanh-bounded into
    /// [0, 255], but not constrained to the budget).
    pub unbounded: TensorId,
    /// Output of the down-sampling stack, tapped for difference maps.
    pub down_features: TensorId,
}

/// Builds the generator forward computation on `graph`. `trainable`
/// controls whether parameters are bound for gradient collection.
pub fn forward_generator(
    graph: &mut Graph,
    params: &TensorMap,
    config: &GeneratorConfig,
    input: TensorId,
    trainable: bool,
) -> Result<GeneratorForward> {
    let shape = graph.value(input).shape().to_vec();
    if shape.len() != 4
        || shape[1] != config.input_channels
        || shape[2] != config.input_resolution
        || shape[3] != config.input_resolution
    {
        return Err(Error::InvalidInput(format!(
            "generator input shape {shape:?} does not match config (C={}, R={})",
            config.input_channels, config.input_resolution
        )));
    }
    let conv_in = |g: &mut Graph, name: &str, x: TensorId, stride: usize, pad: usize| {
        let w = g.param(params, &format!("{name}.conv.w"), trainable);
        let h = g.conv2d(x, w, None, stride, pad);
        let gm = g.param(params, &format!("{name}.in.g"), trainable);
        let bt = g.param(params, &format!("{name}.in.b"), trainable);
        g.instance_norm(h, gm, bt)
    };

    let h = conv_in(graph, "enc", input, 1, 3);
    let h = graph.relu(h);
    let h = conv_in(graph, "down1", h, 2, 1);
    let h = graph.relu(h);
    let h = conv_in(graph, "down2", h, 2, 1);
    let down_features = graph.relu(h);

    let mut h = down_features;
    for i in 0..config.num_residual_blocks {
        let skip = h;
        let w1 = graph.param(params, &format!("res{i}.conv1.w"), trainable);
        let c1 = graph.conv2d(h, w1, None, 1, 1);
        let g1 = graph.param(params, &format!("res{i}.in1.g"), trainable);
        let b1 = graph.param(params, &format!("res{i}.in1.b"), trainable);
        let n1 = graph.instance_norm(c1, g1, b1);
        let a1 = graph.relu(n1);
        let w2 = graph.param(params, &format!("res{i}.conv2.w"), trainable);
        let c2 = graph.conv2d(a1, w2, None, 1, 1);
        let g2 = graph.param(params, &format!("res{i}.in2.g"), trainable);
        let b2 = graph.param(params, &format!("res{i}.in2.b"), trainable);
        let n2 = graph.instance_norm(c2, g2, b2);
        h = graph.add(n2, skip);
    }

    let h = graph.upsample_nearest2(h);
    let h = conv_in(graph, "up1", h, 1, 1);
    let h = graph.relu(h);
    let h = graph.upsample_nearest2(h);
    let h = conv_in(graph, "up2", h, 1, 1);
    let h = graph.relu(h);
    let w_out = graph.param(params, "out.conv.w", trainable);
    let b_out = graph.param(params, "out.conv.b", trainable);
    let h = graph.conv2d(h, w_out, Some(b_out), 1, 3);
    let t = graph.tanh(h);
    // residual head: the network emits a bounded perturbation added onto
    // the input. Training starts near the identity so the budget clamp is
    // not saturated from step one.
    let delta = graph
        .custom(
            Arc::new(AffineOp {
                scale: config.output_scale,
                shift: 0.0,
            }),
            &[t],
        )
        .map_err(Error::Tensor)?;
    let unbounded = graph.add(input, delta);
    Ok(GeneratorForward {
        unbounded,
        down_features,
    })
}

/// Adds the budget projection node: clamp into the epsilon ball around
/// `reference`, then into the valid pixel range. Straight-through gradient.
pub fn project_in_graph(
    graph: &mut Graph,
    unbounded: TensorId,
    reference: &ArrayD<f64>,
    budget: PerturbationBudget,
) -> Result<TensorId> {
    graph
        .custom(
            Arc::new(ProjectOp {
                reference: reference.clone(),
                epsilon: budget.epsilon,
                pixel_min: PIXEL_MIN,
                pixel_max: PIXEL_MAX,
            }),
            &[unbounded],
        )
        .map_err(Error::Tensor)
}

/// Pure projection of a batch (no graph).
pub fn project(
    unbounded: &ArrayView4<f64>,
    reference: &ArrayView4<f64>,
    budget: PerturbationBudget,
) -> Result<ndarray::Array4<f64>> {
    if unbounded.dim() != reference.dim() {
        return Err(Error::InvalidInput(format!(
            "project: shape mismatch {:?} vs {:?}",
            unbounded.dim(),
            reference.dim()
        )));
    }
    let mut out = unbounded.to_owned();
    ndarray::Zip::from(&mut out).and(reference).for_each(|o, &r| {
        *o = crate::ops::project_pixel(*o, r, budget.epsilon, PIXEL_MIN, PIXEL_MAX);
    });
    Ok(out)
}

/// Runs the generator in inference mode over a batch: forward, then
/// project against the input itself.
pub fn generate(
    params: &TensorMap,
    config: &GeneratorConfig,
    batch: &ArrayView4<f64>,
    budget: PerturbationBudget,
) -> Result<ndarray::Array4<f64>> {
    let mut g = Graph::new();
    let input = g.leaf(batch.to_owned().into_dyn(), false);
    let fwd = forward_generator(&mut g, params, config, input, false)?;
    let projected = project_in_graph(&mut g, fwd.unbounded, &batch.to_owned().into_dyn(), budget)?;
    let out = g
        .value(projected)
        .clone()
        .into_dimensionality::<Ix4>()
        .expect("4-d output");
    Ok(out)
}

/// Payload stored alongside generator parameters in a checkpoint.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GeneratorCheckpoint {
    pub config: GeneratorConfig,
    pub train_config_hash: String,
    pub seed: u64,
}

pub fn save_generator(
    path: &Path,
    params: &TensorMap,
    payload: &GeneratorCheckpoint,
) -> Result<()> {
    checkpoint::save(path, "generator", payload, params)
}

pub fn load_generator(path: &Path) -> Result<(GeneratorCheckpoint, TensorMap)> {
    let (meta, params) = checkpoint::load(path)?;
    if meta.kind != "generator" {
        return Err(Error::Checkpoint(format!(
            "{}: expected a generator checkpoint, found `{}`",
            path.display(),
            meta.kind
        )));
    }
    let payload: GeneratorCheckpoint = serde_json::from_value(meta.payload)?;
    Ok((payload, params))
}

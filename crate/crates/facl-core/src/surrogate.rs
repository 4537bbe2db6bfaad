//! The classifier zoo: small architectures trained from scratch, with
//! named feature taps for mid-layer extraction.
//!
//! One VGG-style net plays the surrogate role (its mid tap sits after the
//! third pooling stage); ResNet-style and DenseNet-style nets serve as
//! black-box victims. All of them expose the same forward interface.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use facl_tensor::{init, Adam, AdamConfig, Graph, TensorId, TensorMap};
use ndarray::{Array1, Array2, Array4, ArrayView4, Axis, Ix2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::ops::NormalizeOp;

/// A named mid-layer extraction point of a classifier.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureTap {
    pub model_id: String,
    pub layer_name: String,
    pub feature_dim: usize,
}

/// Batch-norm statistics mode for a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    /// Use batch statistics; exposes them for running-average updates.
    Train,
    /// Use the stored running statistics.
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    VggSmall,
    VggTiny,
    ResnetSmall,
    DensenetSmall,
}

impl Arch {
    pub fn from_id(id: &str) -> Result<Arch> {
        match id {
            "vgg_small" => Ok(Arch::VggSmall),
            "vgg_tiny" => Ok(Arch::VggTiny),
            "resnet_small" => Ok(Arch::ResnetSmall),
            "densenet_small" => Ok(Arch::DensenetSmall),
            other => Err(Error::Config(format!("unknown architecture `{other}`"))),
        }
    }

    pub fn id(&self) -> &'static str {
        match self {
            Arch::VggSmall => "vgg_small",
            Arch::VggTiny => "vgg_tiny",
            Arch::ResnetSmall => "resnet_small",
            Arch::DensenetSmall => "densenet_small",
        }
    }

    pub fn all() -> &'static [Arch] {
        &[
            Arch::VggSmall,
            Arch::VggTiny,
            Arch::ResnetSmall,
            Arch::DensenetSmall,
        ]
    }

    fn vgg_widths(&self) -> [usize; 4] {
        match self {
            Arch::VggSmall => [16, 32, 64, 64],
            Arch::VggTiny => [4, 8, 8, 8],
            _ => unreachable!(),
        }
    }

    /// Input resolution must be a multiple of this.
    pub fn resolution_multiple(&self) -> usize {
        match self {
            Arch::VggSmall | Arch::VggTiny => 16,
            Arch::ResnetSmall => 4,
            Arch::DensenetSmall => 4,
        }
    }

    /// The named taps this architecture exposes at `resolution`, with the
    /// flattened dimensionality of each.
    pub fn taps(&self, resolution: usize, _num_classes: usize) -> Vec<(String, usize)> {
        match self {
            Arch::VggSmall | Arch::VggTiny => {
                let w = self.vgg_widths();
                let r = resolution;
                vec![
                    ("pool1".into(), w[0] * (r / 2) * (r / 2)),
                    ("pool2".into(), w[1] * (r / 4) * (r / 4)),
                    ("pool3".into(), w[2] * (r / 8) * (r / 8)),
                    ("conv4".into(), w[3] * (r / 8) * (r / 8)),
                    ("pool4".into(), w[3] * (r / 16) * (r / 16)),
                    ("fc1".into(), 128.min(w[3] * 8)),
                ]
            }
            Arch::ResnetSmall => {
                let r = resolution;
                vec![
                    ("stage1".into(), 16 * r * r),
                    ("stage2".into(), 32 * (r / 2) * (r / 2)),
                    ("stage3".into(), 64 * (r / 4) * (r / 4)),
                    ("gap".into(), 64),
                ]
            }
            Arch::DensenetSmall => {
                let r = resolution;
                vec![
                    ("trans1".into(), 20 * (r / 2) * (r / 2)),
                    ("trans2".into(), 22 * (r / 4) * (r / 4)),
                    ("gap".into(), 46),
                ]
            }
        }
    }
}

/// Everything needed to run a stored classifier.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassifierCheckpoint {
    pub arch: Arch,
    pub model_id: String,
    pub num_classes: usize,
    pub input_resolution: usize,
    /// Per-channel normalization statistics on the [0, 1] scale.
    pub norm_mean: Vec<f64>,
    pub norm_std: Vec<f64>,
    pub test_accuracy: f64,
    pub dataset_id: String,
    pub seed: u64,
}

/// A loaded classifier: payload plus parameters (and BN buffers).
#[derive(Debug, Clone)]
pub struct Classifier {
    pub info: ClassifierCheckpoint,
    pub params: TensorMap,
}

impl Classifier {
    pub fn tap(&self, layer_name: &str) -> Result<FeatureTap> {
        let taps = self.info.arch.taps(self.info.input_resolution, self.info.num_classes);
        let (name, dim) = taps
            .iter()
            .find(|(n, _)| n == layer_name)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown tap `{layer_name}` for {} (available: {})",
                    self.info.arch.id(),
                    taps.iter().map(|(n, _)| n.as_str()).collect::<Vec<_>>().join(", ")
                ))
            })?;
        Ok(FeatureTap {
            model_id: self.info.model_id.clone(),
            layer_name: name.clone(),
            feature_dim: *dim,
        })
    }
}

/// Graph nodes of one classifier forward pass.
pub struct ClassifierForward {
    pub logits: TensorId,
    /// Flattened (N, D) feature nodes keyed by tap name.
    pub taps: BTreeMap<String, TensorId>,
    /// (bn prefix, node id) pairs for running-stat updates in train mode.
    pub bn_nodes: Vec<(String, TensorId)>,
}

struct Builder<'a> {
    params: &'a TensorMap,
    mode: BnMode,
    trainable: bool,
    bn_nodes: Vec<(String, TensorId)>,
}

impl<'a> Builder<'a> {
    fn bn(&mut self, g: &mut Graph, name: &str, x: TensorId) -> TensorId {
        let gamma = g.param(self.params, &format!("{name}.g"), self.trainable);
        let beta = g.param(self.params, &format!("{name}.b"), self.trainable);
        match self.mode {
            BnMode::Train => {
                let out = g.batch_norm_train(x, gamma, beta);
                self.bn_nodes.push((name.to_string(), out));
                out
            }
            BnMode::Eval => {
                let rm = to_1d(self.params, &format!("{name}.rm"));
                let rv = to_1d(self.params, &format!("{name}.rv"));
                g.batch_norm_eval(x, gamma, beta, &rm, &rv)
            }
        }
    }

    fn conv(&mut self, g: &mut Graph, name: &str, x: TensorId, stride: usize, pad: usize) -> TensorId {
        let w = g.param(self.params, &format!("{name}.w"), self.trainable);
        g.conv2d(x, w, None, stride, pad)
    }

    fn conv_bn_relu(&mut self, g: &mut Graph, name: &str, x: TensorId, stride: usize) -> TensorId {
        let c = self.conv(g, &format!("{name}.conv"), x, stride, 1);
        let n = self.bn(g, &format!("{name}.bn"), c);
        g.relu(n)
    }
}

fn to_1d(params: &TensorMap, name: &str) -> Array1<f64> {
    params
        .get(name)
        .unwrap_or_else(|| panic!("missing buffer `{name}`"))
        .clone()
        .into_dimensionality::<ndarray::Ix1>()
        .expect("1-d buffer")
}

/// Initializes parameters and BN buffers for `arch`.
pub fn init_classifier(arch: Arch, num_classes: usize, resolution: usize, seed: u64) -> Result<TensorMap> {
    if resolution % arch.resolution_multiple() != 0 {
        return Err(Error::Config(format!(
            "{} requires resolution divisible by {}",
            arch.id(),
            arch.resolution_multiple()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = TensorMap::new();
    let conv = |p: &mut TensorMap, rng: &mut ChaCha8Rng, name: &str, co: usize, ci: usize, k: usize| {
        p.insert(format!("{name}.w"), init::conv_weight(rng, co, ci, k, k));
    };
    let bn = |p: &mut TensorMap, name: &str, c: usize| {
        p.insert(format!("{name}.g"), init::ones(&[c]));
        p.insert(format!("{name}.b"), init::zeros(&[c]));
        p.insert(format!("{name}.rm"), init::zeros(&[c]));
        p.insert(format!("{name}.rv"), init::ones(&[c]));
    };
    match arch {
        Arch::VggSmall | Arch::VggTiny => {
            let w = arch.vgg_widths();
            conv(&mut p, &mut rng, "b1c1.conv", w[0], 3, 3);
            bn(&mut p, "b1c1.bn", w[0]);
            conv(&mut p, &mut rng, "b1c2.conv", w[0], w[0], 3);
            bn(&mut p, "b1c2.bn", w[0]);
            conv(&mut p, &mut rng, "b2c1.conv", w[1], w[0], 3);
            bn(&mut p, "b2c1.bn", w[1]);
            conv(&mut p, &mut rng, "b2c2.conv", w[1], w[1], 3);
            bn(&mut p, "b2c2.bn", w[1]);
            conv(&mut p, &mut rng, "b3c1.conv", w[2], w[1], 3);
            bn(&mut p, "b3c1.bn", w[2]);
            conv(&mut p, &mut rng, "b3c2.conv", w[2], w[2], 3);
            bn(&mut p, "b3c2.bn", w[2]);
            conv(&mut p, &mut rng, "b4c1.conv", w[3], w[2], 3);
            bn(&mut p, "b4c1.bn", w[3]);
            let flat = w[3] * (resolution / 16) * (resolution / 16);
            let hidden = 128.min(w[3] * 8);
            p.insert("fc1.w", init::linear_weight(&mut rng, flat, hidden));
            p.insert("fc1.b", init::linear_bias(&mut rng, hidden, flat));
            p.insert("fc2.w", init::linear_weight(&mut rng, hidden, num_classes));
            p.insert("fc2.b", init::linear_bias(&mut rng, num_classes, hidden));
        }
        Arch::ResnetSmall => {
            conv(&mut p, &mut rng, "stem.conv", 16, 3, 3);
            bn(&mut p, "stem.bn", 16);
            let stage = |p: &mut TensorMap, rng: &mut ChaCha8Rng, name: &str, cin: usize, cout: usize| {
                conv(p, rng, &format!("{name}.c1.conv"), cout, cin, 3);
                bn(p, &format!("{name}.c1.bn"), cout);
                conv(p, rng, &format!("{name}.c2.conv"), cout, cout, 3);
                bn(p, &format!("{name}.c2.bn"), cout);
                if cin != cout {
                    conv(p, rng, &format!("{name}.skip.conv"), cout, cin, 1);
                    bn(p, &format!("{name}.skip.bn"), cout);
                }
            };
            stage(&mut p, &mut rng, "s1", 16, 16);
            stage(&mut p, &mut rng, "s2", 16, 32);
            stage(&mut p, &mut rng, "s3", 32, 64);
            p.insert("fc.w", init::linear_weight(&mut rng, 64, num_classes));
            p.insert("fc.b", init::linear_bias(&mut rng, num_classes, 64));
        }
        Arch::DensenetSmall => {
            const GROWTH: usize = 8;
            conv(&mut p, &mut rng, "stem.conv", 16, 3, 3);
            let mut c = 16;
            for b in 1..=3usize {
                for l in 0..3usize {
                    bn(&mut p, &format!("d{b}l{l}.bn"), c);
                    conv(&mut p, &mut rng, &format!("d{b}l{l}.conv"), GROWTH, c, 3);
                    c += GROWTH;
                }
                if b < 3 {
                    bn(&mut p, &format!("t{b}.bn"), c);
                    c /= 2;
                    // channel count after 1x1 compression
                    conv(&mut p, &mut rng, &format!("t{b}.conv"), c, c * 2, 1);
                }
            }
            bn(&mut p, "head.bn", c);
            p.insert("fc.w", init::linear_weight(&mut rng, c, num_classes));
            p.insert("fc.b", init::linear_bias(&mut rng, num_classes, c));
        }
    }
    Ok(p)
}

/// Builds the forward computation of a classifier on `graph`. The input is
/// raw 0-255 pixels; normalization happens inside using the stored stats.
pub fn forward_classifier(
    graph: &mut Graph,
    arch: Arch,
    params: &TensorMap,
    norm_mean: &[f64],
    norm_std: &[f64],
    input: TensorId,
    mode: BnMode,
    trainable: bool,
) -> Result<ClassifierForward> {
    let x = graph
        .custom(
            Arc::new(NormalizeOp {
                mean: norm_mean.to_vec(),
                std: norm_std.to_vec(),
            }),
            &[input],
        )
        .map_err(Error::Tensor)?;
    let mut b = Builder {
        params,
        mode,
        trainable,
        bn_nodes: Vec::new(),
    };
    let mut taps = BTreeMap::new();
    let logits = match arch {
        Arch::VggSmall | Arch::VggTiny => {
            let h = b.conv_bn_relu(graph, "b1c1", x, 1);
            let h = b.conv_bn_relu(graph, "b1c2", h, 1);
            let h = graph.maxpool2(h);
            taps.insert("pool1".into(), graph.flatten(h));
            let h2 = b.conv_bn_relu(graph, "b2c1", h, 1);
            let h2 = b.conv_bn_relu(graph, "b2c2", h2, 1);
            let h2 = graph.maxpool2(h2);
            taps.insert("pool2".into(), graph.flatten(h2));
            let h3 = b.conv_bn_relu(graph, "b3c1", h2, 1);
            let h3 = b.conv_bn_relu(graph, "b3c2", h3, 1);
            let h3 = graph.maxpool2(h3);
            taps.insert("pool3".into(), graph.flatten(h3));
            let h4 = b.conv_bn_relu(graph, "b4c1", h3, 1);
            taps.insert("conv4".into(), graph.flatten(h4));
            let h4 = graph.maxpool2(h4);
            taps.insert("pool4".into(), graph.flatten(h4));
            let flat = graph.flatten(h4);
            let w1 = graph.param(params, "fc1.w", trainable);
            let b1 = graph.param(params, "fc1.b", trainable);
            let f1 = graph.linear(flat, w1, b1);
            let f1 = graph.relu(f1);
            taps.insert("fc1".into(), f1);
            let w2 = graph.param(params, "fc2.w", trainable);
            let b2 = graph.param(params, "fc2.b", trainable);
            graph.linear(f1, w2, b2)
        }
        Arch::ResnetSmall => {
            let h = b.conv(graph, "stem.conv", x, 1, 1);
            let h = b.bn(graph, "stem.bn", h);
            let h = graph.relu(h);
            let stage = |g: &mut Graph, b: &mut Builder, name: &str, x: TensorId, stride: usize, changes: bool| {
                let c1 = b.conv(g, &format!("{name}.c1.conv"), x, stride, 1);
                let n1 = b.bn(g, &format!("{name}.c1.bn"), c1);
                let a1 = g.relu(n1);
                let c2 = b.conv(g, &format!("{name}.c2.conv"), a1, 1, 1);
                let n2 = b.bn(g, &format!("{name}.c2.bn"), c2);
                let skip = if changes {
                    let s = b.conv(g, &format!("{name}.skip.conv"), x, stride, 0);
                    b.bn(g, &format!("{name}.skip.bn"), s)
                } else {
                    x
                };
                let sum = g.add(n2, skip);
                g.relu(sum)
            };
            let s1 = stage(graph, &mut b, "s1", h, 1, false);
            taps.insert("stage1".into(), graph.flatten(s1));
            let s2 = stage(graph, &mut b, "s2", s1, 2, true);
            taps.insert("stage2".into(), graph.flatten(s2));
            let s3 = stage(graph, &mut b, "s3", s2, 2, true);
            taps.insert("stage3".into(), graph.flatten(s3));
            let gap = graph.global_avg_pool(s3);
            taps.insert("gap".into(), gap);
            let w = graph.param(params, "fc.w", trainable);
            let bb = graph.param(params, "fc.b", trainable);
            graph.linear(gap, w, bb)
        }
        Arch::DensenetSmall => {
            let mut h = b.conv(graph, "stem.conv", x, 1, 1);
            for blk in 1..=3usize {
                for l in 0..3usize {
                    let n = b.bn(graph, &format!("d{blk}l{l}.bn"), h);
                    let a = graph.relu(n);
                    let c = b.conv(graph, &format!("d{blk}l{l}.conv"), a, 1, 1);
                    h = graph.concat_channels(&[h, c]);
                }
                if blk < 3 {
                    let n = b.bn(graph, &format!("t{blk}.bn"), h);
                    let a = graph.relu(n);
                    let c = b.conv(graph, &format!("t{blk}.conv"), a, 1, 0);
                    h = graph.avgpool2(c);
                    taps.insert(format!("trans{blk}"), graph.flatten(h));
                }
            }
            let n = b.bn(graph, "head.bn", h);
            let a = graph.relu(n);
            let gap = graph.global_avg_pool(a);
            taps.insert("gap".into(), gap);
            let w = graph.param(params, "fc.w", trainable);
            let bb = graph.param(params, "fc.b", trainable);
            graph.linear(gap, w, bb)
        }
    };
    Ok(ClassifierForward {
        logits,
        taps,
        bn_nodes: b.bn_nodes,
    })
}

/// Argmax with ties broken toward the lowest class index.
pub fn argmax_label(logits_row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in logits_row.iter().enumerate() {
        if v > logits_row[best] {
            best = j;
        }
    }
    best
}

/// Runs the classifier in inference mode: predicted labels plus logits.
pub fn classify(model: &Classifier, batch: &ArrayView4<f64>) -> Result<(Vec<usize>, Array2<f64>)> {
    let mut g = Graph::new();
    let input = g.leaf(batch.to_owned().into_dyn(), false);
    let fwd = forward_classifier(
        &mut g,
        model.info.arch,
        &model.params,
        &model.info.norm_mean,
        &model.info.norm_std,
        input,
        BnMode::Eval,
        false,
    )?;
    let logits = g
        .value(fwd.logits)
        .clone()
        .into_dimensionality::<Ix2>()
        .expect("2-d logits");
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("non-finite logits".into()));
    }
    let labels = logits
        .axis_iter(Axis(0))
        .map(|row| argmax_label(row.as_slice().unwrap()))
        .collect();
    Ok((labels, logits))
}

/// Extracts flattened features at `tap` in inference mode (no gradients;
/// use [`forward_classifier`] directly inside a training graph).
pub fn extract_features(
    model: &Classifier,
    tap: &FeatureTap,
    batch: &ArrayView4<f64>,
) -> Result<Array2<f64>> {
    let mut g = Graph::new();
    let input = g.leaf(batch.to_owned().into_dyn(), false);
    let fwd = forward_classifier(
        &mut g,
        model.info.arch,
        &model.params,
        &model.info.norm_mean,
        &model.info.norm_std,
        input,
        BnMode::Eval,
        false,
    )?;
    let node = fwd
        .taps
        .get(&tap.layer_name)
        .ok_or_else(|| Error::Config(format!("unknown tap `{}`", tap.layer_name)))?;
    let feats = g
        .value(*node)
        .clone()
        .into_dimensionality::<Ix2>()
        .expect("2-d features");
    if feats.ncols() != tap.feature_dim {
        return Err(Error::Config(format!(
            "tap `{}` produced dim {} but declares {}",
            tap.layer_name,
            feats.ncols(),
            tap.feature_dim
        )));
    }
    Ok(feats)
}

/// Updates BN running statistics from the batch stats of a training pass.
pub fn update_bn_running_stats(params: &mut TensorMap, graph: &Graph, fwd: &ClassifierForward, momentum: f64, batch_count: usize) {
    // unbiased variance for the running buffer
    let unbias = if batch_count > 1 {
        batch_count as f64 / (batch_count as f64 - 1.0)
    } else {
        1.0
    };
    for (prefix, node) in &fwd.bn_nodes {
        let (mean, var) = graph.bn_batch_stats(*node).expect("bn node");
        let rm = params.get_mut(&format!("{prefix}.rm")).expect("rm buffer");
        for (r, &m) in rm.iter_mut().zip(mean.iter()) {
            *r = (1.0 - momentum) * *r + momentum * m;
        }
        let rv = params.get_mut(&format!("{prefix}.rv")).expect("rv buffer");
        for (r, &v) in rv.iter_mut().zip(var.iter()) {
            *r = (1.0 - momentum) * *r + momentum * v * unbias;
        }
    }
}

/// Training hyper-parameters for desk-scale classifiers.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SurrogateTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Std-dev of pixel noise added during training (0 disables).
    pub augment_noise: f64,
}

impl Default for SurrogateTrainConfig {
    fn default() -> Self {
        SurrogateTrainConfig {
            epochs: 6,
            batch_size: 32,
            learning_rate: 1e-3,
            seed: 0,
            augment_noise: 4.0,
        }
    }
}

/// Per-channel mean/std (on the [0, 1] scale) of a stack of images.
pub fn channel_stats(images: &ArrayView4<f64>) -> (Vec<f64>, Vec<f64>) {
    let (n, c, h, w) = images.dim();
    let count = (n * h * w) as f64;
    let mut mean = vec![0.0; c];
    let mut std = vec![0.0; c];
    for ch in 0..c {
        let mut s = 0.0;
        for i in 0..n {
            s += images.index_axis(Axis(0), i).index_axis(Axis(0), ch).sum();
        }
        mean[ch] = s / count / 255.0;
    }
    for ch in 0..c {
        let mut s = 0.0;
        for i in 0..n {
            s += images
                .index_axis(Axis(0), i)
                .index_axis(Axis(0), ch)
                .iter()
                .map(|v| {
                    let d = v / 255.0 - mean[ch];
                    d * d
                })
                .sum::<f64>();
        }
        std[ch] = (s / count).sqrt().max(1e-3);
    }
    (mean, std)
}

/// Top-1 accuracy (percent) of a model over a labelled stack.
pub fn accuracy(model: &Classifier, images: &ArrayView4<f64>, labels: &[usize], batch_size: usize) -> Result<f64> {
    let n = images.dim().0;
    let mut correct = 0usize;
    let mut i = 0;
    while i < n {
        let end = (i + batch_size).min(n);
        let batch = images.slice(ndarray::s![i..end, .., .., ..]);
        let (preds, _) = classify(model, &batch)?;
        correct += preds
            .iter()
            .zip(&labels[i..end])
            .filter(|(p, l)| p == l)
            .count();
        i = end;
    }
    Ok(100.0 * correct as f64 / n as f64)
}

/// Trains a classifier from scratch and reports its test accuracy.
///
/// Returns the trained [`Classifier`]; divergence (non-finite loss)
/// aborts with a training error naming the step.
pub fn train_surrogate(
    arch: Arch,
    model_id: &str,
    dataset_id: &str,
    num_classes: usize,
    resolution: usize,
    train_images: &ArrayView4<f64>,
    train_labels: &[usize],
    test_images: &ArrayView4<f64>,
    test_labels: &[usize],
    cfg: &SurrogateTrainConfig,
) -> Result<Classifier> {
    let mut params = init_classifier(arch, num_classes, resolution, cfg.seed)?;
    let (norm_mean, norm_std) = channel_stats(train_images);
    let mut adam = Adam::new(AdamConfig {
        lr: cfg.learning_rate,
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-8,
    });
    let n = train_images.dim().0;
    let mut order: Vec<usize> = (0..n).collect();
    // separate stream from init so changing epochs never perturbs init
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x1357_9bdf_2468_ace0);
    let noise = if cfg.augment_noise > 0.0 {
        Some(
            rand_distr::Normal::new(0.0, cfg.augment_noise)
                .map_err(|e| Error::Config(format!("bad augment_noise: {e}")))?,
        )
    } else {
        None
    };

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut start = 0;
        let mut step = 0usize;
        while start < n {
            let end = (start + cfg.batch_size).min(n);
            let idx = &order[start..end];
            let bsz = idx.len();
            let (c, h, w) = {
                let d = train_images.dim();
                (d.1, d.2, d.3)
            };
            let mut batch = Array4::<f64>::zeros((bsz, c, h, w));
            let mut labels = Vec::with_capacity(bsz);
            for (bi, &si) in idx.iter().enumerate() {
                batch
                    .index_axis_mut(Axis(0), bi)
                    .assign(&train_images.index_axis(Axis(0), si));
                labels.push(train_labels[si]);
            }
            if let Some(dist) = &noise {
                use rand_distr::Distribution;
                for v in batch.iter_mut() {
                    *v = (*v + dist.sample(&mut rng)).clamp(0.0, 255.0);
                }
            }
            let mut g = Graph::new();
            let input = g.leaf(batch.into_dyn(), false);
            let fwd = forward_classifier(
                &mut g, arch, &params, &norm_mean, &norm_std, input, BnMode::Train, true,
            )?;
            let loss = g.softmax_xent_mean(fwd.logits, &labels);
            let loss_v = g.scalar(loss);
            if !loss_v.is_finite() {
                return Err(Error::Training(format!(
                    "non-finite loss at epoch {epoch} step {step}"
                )));
            }
            g.backward(loss).map_err(Error::Tensor)?;
            adam.step(&mut params, &g);
            update_bn_running_stats(&mut params, &g, &fwd, 0.1, bsz * h * w);
            start = end;
            step += 1;
        }
        log::debug!("surrogate {model_id}: epoch {epoch} done");
    }

    let mut model = Classifier {
        info: ClassifierCheckpoint {
            arch,
            model_id: model_id.to_string(),
            num_classes,
            input_resolution: resolution,
            norm_mean,
            norm_std,
            test_accuracy: 0.0,
            dataset_id: dataset_id.to_string(),
            seed: cfg.seed,
        },
        params,
    };
    model.info.test_accuracy = accuracy(&model, test_images, test_labels, 64)?;
    Ok(model)
}

pub fn save_classifier(path: &Path, model: &Classifier) -> Result<()> {
    checkpoint::save(path, "classifier", &model.info, &model.params)
}

pub fn load_classifier(path: &Path) -> Result<Classifier> {
    let (meta, params) = checkpoint::load(path)?;
    if meta.kind != "classifier" {
        return Err(Error::Checkpoint(format!(
            "{}: expected a classifier checkpoint, found `{}`",
            path.display(),
            meta.kind
        )));
    }
    let info: ClassifierCheckpoint = serde_json::from_value(meta.payload)?;
    Ok(Classifier { info, params })
}

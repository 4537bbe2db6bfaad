//! The tape: a per-forward-pass op graph with reverse-mode gradients.

use std::sync::Arc;

use ndarray::{Array1, Array2, ArrayD, Axis, Ix2, Ix4, IxDyn};

use crate::kernels;
use crate::optim::TensorMap;
use crate::{Result, TensorError};

pub type TensorId = usize;

/// A domain-specific op plugged into the graph from outside this crate.
///
/// `backward` returns one gradient per input (or `None` for inputs that do
/// not receive gradient from this op).
pub trait CustomOp: Send + Sync {
    fn name(&self) -> &'static str;
    fn forward(&self, inputs: &[&ArrayD<f64>]) -> Result<ArrayD<f64>>;
    fn backward(
        &self,
        grad_out: &ArrayD<f64>,
        inputs: &[&ArrayD<f64>],
        output: &ArrayD<f64>,
    ) -> Result<Vec<Option<ArrayD<f64>>>>;
}

enum Op {
    Leaf,
    Add(TensorId, TensorId),
    Scale(TensorId, f64),
    Relu(TensorId),
    Tanh(TensorId),
    Conv2d {
        input: TensorId,
        weight: TensorId,
        bias: Option<TensorId>,
        stride: usize,
        pad: usize,
    },
    MaxPool2 {
        input: TensorId,
        argmax: Vec<u32>,
    },
    AvgPool2(TensorId),
    GlobalAvgPool(TensorId),
    Upsample2(TensorId),
    InstanceNorm {
        input: TensorId,
        gamma: TensorId,
        beta: TensorId,
        xhat: ArrayD<f64>,
        inv_std: Array2<f64>, // (N, C)
    },
    BatchNormTrain {
        input: TensorId,
        gamma: TensorId,
        beta: TensorId,
        xhat: ArrayD<f64>,
        inv_std: Array1<f64>, // (C,)
        batch_mean: Array1<f64>,
        batch_var: Array1<f64>, // biased
    },
    BatchNormEval {
        input: TensorId,
        gamma: TensorId,
        beta: TensorId,
        scale: Array1<f64>,   // gamma / sqrt(var + eps)
        mean: Array1<f64>,    // running mean
        inv_std: Array1<f64>, // 1 / sqrt(var + eps)
    },
    Linear {
        input: TensorId,
        weight: TensorId, // (Din, Dout)
        bias: TensorId,
    },
    Flatten {
        input: TensorId,
        input_shape: Vec<usize>,
    },
    ConcatChannels {
        inputs: Vec<TensorId>,
    },
    MeanAll(TensorId),
    CosineSimMean {
        a: TensorId,
        b: TensorId,
        eta: f64,
        sims: Array1<f64>,
        norm_a: Array1<f64>,
        norm_b: Array1<f64>,
    },
    SoftmaxXentMean {
        logits: TensorId,
        labels: Vec<usize>,
        probs: Array2<f64>,
    },
    Custom {
        op: Arc<dyn CustomOp>,
        inputs: Vec<TensorId>,
    },
}

/// A define-by-run computation graph holding values, grads, and ops.
pub struct Graph {
    values: Vec<ArrayD<f64>>,
    grads: Vec<Option<ArrayD<f64>>>,
    requires: Vec<bool>,
    ops: Vec<Op>,
    bindings: Vec<(String, TensorId)>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            values: Vec::new(),
            grads: Vec::new(),
            requires: Vec::new(),
            ops: Vec::new(),
            bindings: Vec::new(),
        }
    }

    fn push(&mut self, value: ArrayD<f64>, requires: bool, op: Op) -> TensorId {
        self.values.push(value);
        self.grads.push(None);
        self.requires.push(requires);
        self.ops.push(op);
        self.values.len() - 1
    }

    pub fn value(&self, id: TensorId) -> &ArrayD<f64> {
        &self.values[id]
    }

    pub fn grad(&self, id: TensorId) -> Option<&ArrayD<f64>> {
        self.grads[id].as_ref()
    }

    pub fn requires_grad(&self, id: TensorId) -> bool {
        self.requires[id]
    }

    /// Scalar value of a 0-d (or single-element) tensor.
    pub fn scalar(&self, id: TensorId) -> f64 {
        *self.values[id].iter().next().expect("non-empty tensor")
    }

    /// Parameters bound into this graph via [`Graph::param`], in order.
    pub fn bindings(&self) -> &[(String, TensorId)] {
        &self.bindings
    }

    pub fn leaf(&mut self, value: ArrayD<f64>, requires_grad: bool) -> TensorId {
        self.push(value, requires_grad, Op::Leaf)
    }

    /// Binds a named parameter from `store`. Trainable params are recorded
    /// so the optimizer can collect their gradients after `backward`.
    pub fn param(&mut self, store: &TensorMap, name: &str, trainable: bool) -> TensorId {
        let value = store
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter `{name}`"))
            .clone();
        let id = self.leaf(value, trainable);
        if trainable {
            self.bindings.push((name.to_string(), id));
        }
        id
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> TensorId {
        assert_eq!(
            self.values[a].shape(),
            self.values[b].shape(),
            "add shape mismatch"
        );
        let v = &self.values[a] + &self.values[b];
        let req = self.requires[a] || self.requires[b];
        self.push(v, req, Op::Add(a, b))
    }

    pub fn scale(&mut self, x: TensorId, alpha: f64) -> TensorId {
        let v = &self.values[x] * alpha;
        let req = self.requires[x];
        self.push(v, req, Op::Scale(x, alpha))
    }

    pub fn relu(&mut self, x: TensorId) -> TensorId {
        let v = self.values[x].mapv(|t| t.max(0.0));
        let req = self.requires[x];
        self.push(v, req, Op::Relu(x))
    }

    pub fn tanh(&mut self, x: TensorId) -> TensorId {
        let v = self.values[x].mapv(f64::tanh);
        let req = self.requires[x];
        self.push(v, req, Op::Tanh(x))
    }

    pub fn conv2d(
        &mut self,
        input: TensorId,
        weight: TensorId,
        bias: Option<TensorId>,
        stride: usize,
        pad: usize,
    ) -> TensorId {
        let x = self.values[input]
            .view()
            .into_dimensionality::<Ix4>()
            .expect("conv input must be 4-d");
        let w = self.values[weight]
            .view()
            .into_dimensionality::<Ix4>()
            .expect("conv weight must be 4-d");
        let b = bias.map(|b| {
            self.values[b]
                .view()
                .into_dimensionality::<ndarray::Ix1>()
                .expect("conv bias must be 1-d")
        });
        let out = kernels::conv2d_forward(&x, &w, b.as_ref(), stride, pad);
        let req = self.requires[input]
            || self.requires[weight]
            || bias.map(|b| self.requires[b]).unwrap_or(false);
        self.push(
            out.into_dyn(),
            req,
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                pad,
            },
        )
    }

    pub fn maxpool2(&mut self, input: TensorId) -> TensorId {
        let x = self.values[input]
            .view()
            .into_dimensionality::<Ix4>()
            .expect("pool input must be 4-d");
        let (out, argmax) = kernels::maxpool2_forward(&x);
        let req = self.requires[input];
        self.push(out.into_dyn(), req, Op::MaxPool2 { input, argmax })
    }

    pub fn avgpool2(&mut self, input: TensorId) -> TensorId {
        let x = self.values[input]
            .view()
            .into_dimensionality::<Ix4>()
            .expect("pool input must be 4-d");
        let out = kernels::avgpool2_forward(&x);
        let req = self.requires[input];
        self.push(out.into_dyn(), req, Op::AvgPool2(input))
    }

    /// (N, C, H, W) -> (N, C) spatial mean.
    pub fn global_avg_pool(&mut self, input: TensorId) -> TensorId {
        let x = self.values[input]
            .view()
            .into_dimensionality::<Ix4>()
            .expect("pool input must be 4-d");
        let (n, c, h, w) = x.dim();
        let mut out = Array2::<f64>::zeros((n, c));
        for i in 0..n {
            for ch in 0..c {
                out[(i, ch)] = x.index_axis(Axis(0), i).index_axis(Axis(0), ch).sum()
                    / (h * w) as f64;
            }
        }
        let req = self.requires[input];
        self.push(out.into_dyn(), req, Op::GlobalAvgPool(input))
    }

    pub fn upsample_nearest2(&mut self, input: TensorId) -> TensorId {
        let x = self.values[input]
            .view()
            .into_dimensionality::<Ix4>()
            .expect("upsample input must be 4-d");
        let out = kernels::upsample2_forward(&x);
        let req = self.requires[input];
        self.push(out.into_dyn(), req, Op::Upsample2(input))
    }

    /// Per-sample, per-channel normalization over the spatial axes.
    pub fn instance_norm(&mut self, input: TensorId, gamma: TensorId, beta: TensorId) -> TensorId {
        const EPS: f64 = 1e-5;
        let x = self.values[input]
            .view()
            .into_dimensionality::<Ix4>()
            .expect("norm input must be 4-d");
        let (n, c, h, w) = x.dim();
        let g = &self.values[gamma];
        let b = &self.values[beta];
        let mut xhat = ndarray::Array4::<f64>::zeros((n, c, h, w));
        let mut inv_std = Array2::<f64>::zeros((n, c));
        let mut out = ndarray::Array4::<f64>::zeros((n, c, h, w));
        let hw = (h * w) as f64;
        for i in 0..n {
            for ch in 0..c {
                let plane = x.index_axis(Axis(0), i);
                let plane = plane.index_axis(Axis(0), ch);
                let mean = plane.sum() / hw;
                let var = plane.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / hw;
                let is = 1.0 / (var + EPS).sqrt();
                inv_std[(i, ch)] = is;
                let (gc, bc) = (g[[ch]], b[[ch]]);
                for y in 0..h {
                    for xx in 0..w {
                        let xh = (plane[(y, xx)] - mean) * is;
                        xhat[(i, ch, y, xx)] = xh;
                        out[(i, ch, y, xx)] = gc * xh + bc;
                    }
                }
            }
        }
        let req = self.requires[input] || self.requires[gamma] || self.requires[beta];
        self.push(
            out.into_dyn(),
            req,
            Op::InstanceNorm {
                input,
                gamma,
                beta,
                xhat: xhat.into_dyn(),
                inv_std,
            },
        )
    }

    /// Batch normalization using batch statistics. Returns the node id; the
    /// batch mean/var (biased) are retrievable via [`Graph::bn_batch_stats`]
    /// for running-average updates.
    pub fn batch_norm_train(&mut self, input: TensorId, gamma: TensorId, beta: TensorId) -> TensorId {
        const EPS: f64 = 1e-5;
        let x = self.values[input]
            .view()
            .into_dimensionality::<Ix4>()
            .expect("norm input must be 4-d");
        let (n, c, h, w) = x.dim();
        let g = &self.values[gamma];
        let b = &self.values[beta];
        let count = (n * h * w) as f64;
        let mut mean = Array1::<f64>::zeros(c);
        let mut var = Array1::<f64>::zeros(c);
        for ch in 0..c {
            let mut s = 0.0;
            for i in 0..n {
                s += x.index_axis(Axis(0), i).index_axis(Axis(0), ch).sum();
            }
            mean[ch] = s / count;
            let mut v = 0.0;
            for i in 0..n {
                v += x
                    .index_axis(Axis(0), i)
                    .index_axis(Axis(0), ch)
                    .iter()
                    .map(|t| (t - mean[ch]) * (t - mean[ch]))
                    .sum::<f64>();
            }
            var[ch] = v / count;
        }
        let inv_std = var.mapv(|v| 1.0 / (v + EPS).sqrt());
        let mut xhat = ndarray::Array4::<f64>::zeros((n, c, h, w));
        let mut out = ndarray::Array4::<f64>::zeros((n, c, h, w));
        for i in 0..n {
            for ch in 0..c {
                let (gc, bc, m, is) = (g[[ch]], b[[ch]], mean[ch], inv_std[ch]);
                for y in 0..h {
                    for xx in 0..w {
                        let xh = (x[(i, ch, y, xx)] - m) * is;
                        xhat[(i, ch, y, xx)] = xh;
                        out[(i, ch, y, xx)] = gc * xh + bc;
                    }
                }
            }
        }
        let req = self.requires[input] || self.requires[gamma] || self.requires[beta];
        self.push(
            out.into_dyn(),
            req,
            Op::BatchNormTrain {
                input,
                gamma,
                beta,
                xhat: xhat.into_dyn(),
                inv_std,
                batch_mean: mean,
                batch_var: var,
            },
        )
    }

    /// Batch normalization with frozen statistics (inference mode).
    pub fn batch_norm_eval(
        &mut self,
        input: TensorId,
        gamma: TensorId,
        beta: TensorId,
        running_mean: &Array1<f64>,
        running_var: &Array1<f64>,
    ) -> TensorId {
        const EPS: f64 = 1e-5;
        let x = self.values[input]
            .view()
            .into_dimensionality::<Ix4>()
            .expect("norm input must be 4-d");
        let (n, c, h, w) = x.dim();
        let g = &self.values[gamma];
        let b = &self.values[beta];
        let scale: Array1<f64> =
            Array1::from_shape_fn(c, |ch| g[[ch]] / (running_var[ch] + EPS).sqrt());
        let mut out = ndarray::Array4::<f64>::zeros((n, c, h, w));
        for i in 0..n {
            for ch in 0..c {
                let (sc, m, bc) = (scale[ch], running_mean[ch], b[[ch]]);
                for y in 0..h {
                    for xx in 0..w {
                        out[(i, ch, y, xx)] = sc * (x[(i, ch, y, xx)] - m) + bc;
                    }
                }
            }
        }
        let req = self.requires[input] || self.requires[gamma] || self.requires[beta];
        let inv_std = running_var.mapv(|v| 1.0 / (v + EPS).sqrt());
        self.push(
            out.into_dyn(),
            req,
            Op::BatchNormEval {
                input,
                gamma,
                beta,
                scale,
                mean: running_mean.clone(),
                inv_std,
            },
        )
    }

    /// Batch statistics (mean, biased variance) saved by a `batch_norm_train` node.
    pub fn bn_batch_stats(&self, id: TensorId) -> Option<(&Array1<f64>, &Array1<f64>)> {
        match &self.ops[id] {
            Op::BatchNormTrain {
                batch_mean,
                batch_var,
                ..
            } => Some((batch_mean, batch_var)),
            _ => None,
        }
    }

    /// (N, Din) x (Din, Dout) + bias.
    pub fn linear(&mut self, input: TensorId, weight: TensorId, bias: TensorId) -> TensorId {
        let x = self.values[input]
            .view()
            .into_dimensionality::<Ix2>()
            .expect("linear input must be 2-d");
        let w = self.values[weight]
            .view()
            .into_dimensionality::<Ix2>()
            .expect("linear weight must be 2-d");
        let b = &self.values[bias];
        let mut out = x.dot(&w);
        for mut row in out.axis_iter_mut(Axis(0)) {
            for (j, v) in row.iter_mut().enumerate() {
                *v += b[[j]];
            }
        }
        let req = self.requires[input] || self.requires[weight] || self.requires[bias];
        self.push(out.into_dyn(), req, Op::Linear { input, weight, bias })
    }

    /// (N, ...) -> (N, prod(...)).
    pub fn flatten(&mut self, input: TensorId) -> TensorId {
        let shape = self.values[input].shape().to_vec();
        let n = shape[0];
        let rest: usize = shape[1..].iter().product();
        let v = self.values[input]
            .to_owned()
            .into_shape_with_order(IxDyn(&[n, rest]))
            .expect("flatten reshape");
        let req = self.requires[input];
        self.push(
            v,
            req,
            Op::Flatten {
                input,
                input_shape: shape,
            },
        )
    }

    /// Concatenates 4-d tensors along the channel axis.
    pub fn concat_channels(&mut self, inputs: &[TensorId]) -> TensorId {
        assert!(!inputs.is_empty());
        let views: Vec<_> = inputs
            .iter()
            .map(|&id| {
                self.values[id]
                    .view()
                    .into_dimensionality::<Ix4>()
                    .expect("concat input must be 4-d")
            })
            .collect();
        let out = ndarray::concatenate(Axis(1), &views).expect("concat shapes");
        let req = inputs.iter().any(|&id| self.requires[id]);
        self.push(
            out.into_dyn(),
            req,
            Op::ConcatChannels {
                inputs: inputs.to_vec(),
            },
        )
    }

    /// Mean over all elements -> 0-d scalar.
    pub fn mean_all(&mut self, input: TensorId) -> TensorId {
        let m = self.values[input].mean().expect("non-empty");
        let req = self.requires[input];
        self.push(
            ndarray::arr0(m).into_dyn(),
            req,
            Op::MeanAll(input),
        )
    }

    /// Mean over samples of the per-row cosine similarity between two
    /// (N, D) feature batches, with norm stabilizer `eta`.
    pub fn cosine_sim_mean(&mut self, a: TensorId, b: TensorId, eta: f64) -> TensorId {
        let av = self.values[a]
            .view()
            .into_dimensionality::<Ix2>()
            .expect("cosine input must be 2-d");
        let bv = self.values[b]
            .view()
            .into_dimensionality::<Ix2>()
            .expect("cosine input must be 2-d");
        assert_eq!(av.dim(), bv.dim(), "cosine shape mismatch");
        let n = av.nrows();
        let mut sims = Array1::<f64>::zeros(n);
        let mut norm_a = Array1::<f64>::zeros(n);
        let mut norm_b = Array1::<f64>::zeros(n);
        for i in 0..n {
            let (ra, rb) = (av.row(i), bv.row(i));
            let dot = ra.dot(&rb);
            let na = ra.dot(&ra).sqrt().max(eta);
            let nb = rb.dot(&rb).sqrt().max(eta);
            sims[i] = dot / (na * nb);
            norm_a[i] = na;
            norm_b[i] = nb;
        }
        let mean = sims.sum() / n as f64;
        let req = self.requires[a] || self.requires[b];
        self.push(
            ndarray::arr0(mean).into_dyn(),
            req,
            Op::CosineSimMean {
                a,
                b,
                eta,
                sims,
                norm_a,
                norm_b,
            },
        )
    }

    /// Mean softmax cross-entropy of (N, K) logits against integer labels.
    pub fn softmax_xent_mean(&mut self, logits: TensorId, labels: &[usize]) -> TensorId {
        let lv = self.values[logits]
            .view()
            .into_dimensionality::<Ix2>()
            .expect("logits must be 2-d");
        let (n, _k) = lv.dim();
        assert_eq!(n, labels.len(), "labels length mismatch");
        let mut probs = lv.to_owned();
        let mut loss = 0.0;
        for (i, mut row) in probs.axis_iter_mut(Axis(0)).enumerate() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|v| (v - max).exp());
            let sum: f64 = row.sum();
            row.mapv_inplace(|v| v / sum);
            loss -= row[labels[i]].max(1e-300).ln();
        }
        loss /= n as f64;
        let req = self.requires[logits];
        self.push(
            ndarray::arr0(loss).into_dyn(),
            req,
            Op::SoftmaxXentMean {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        )
    }

    /// Applies a domain-specific op.
    pub fn custom(&mut self, op: Arc<dyn CustomOp>, inputs: &[TensorId]) -> Result<TensorId> {
        let in_vals: Vec<&ArrayD<f64>> = inputs.iter().map(|&id| &self.values[id]).collect();
        let out = op.forward(&in_vals)?;
        let req = inputs.iter().any(|&id| self.requires[id]);
        Ok(self.push(
            out,
            req,
            Op::Custom {
                op,
                inputs: inputs.to_vec(),
            },
        ))
    }

    fn accum(grads: &mut [Option<ArrayD<f64>>], id: TensorId, delta: ArrayD<f64>) {
        match &mut grads[id] {
            Some(g) => *g += &delta,
            slot => *slot = Some(delta),
        }
    }

    /// Reverse pass from a scalar loss node. Gradients of leaves (where
    /// `requires_grad`) are kept; interior gradients are freed as consumed.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        let lv = &self.values[loss];
        if lv.len() != 1 {
            return Err(TensorError::InvalidArgument(
                "backward expects a scalar loss".into(),
            ));
        }
        if !lv.iter().next().unwrap().is_finite() {
            return Err(TensorError::NonFinite("loss".into()));
        }
        self.grads[loss] = Some(ArrayD::ones(lv.raw_dim()));
        for id in (0..=loss).rev() {
            if !self.requires[id] {
                self.grads[id] = None;
                continue;
            }
            let Some(gout) = self.grads[id].take() else {
                continue;
            };
            match &self.ops[id] {
                Op::Leaf => {
                    self.grads[id] = Some(gout);
                }
                Op::Add(a, b) => {
                    let (a, b) = (*a, *b);
                    if self.requires[a] {
                        Self::accum(&mut self.grads, a, gout.clone());
                    }
                    if self.requires[b] {
                        Self::accum(&mut self.grads, b, gout);
                    }
                }
                Op::Scale(x, alpha) => {
                    let (x, alpha) = (*x, *alpha);
                    Self::accum(&mut self.grads, x, gout * alpha);
                }
                Op::Relu(x) => {
                    let x = *x;
                    let mask = self.values[x].mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
                    Self::accum(&mut self.grads, x, gout * &mask);
                }
                Op::Tanh(x) => {
                    let x = *x;
                    let d = self.values[id].mapv(|y| 1.0 - y * y);
                    Self::accum(&mut self.grads, x, gout * &d);
                }
                Op::Conv2d {
                    input,
                    weight,
                    bias,
                    stride,
                    pad,
                } => {
                    let (input, weight, bias, stride, pad) = (*input, *weight, *bias, *stride, *pad);
                    let x = self.values[input].view().into_dimensionality::<Ix4>().unwrap();
                    let w = self.values[weight].view().into_dimensionality::<Ix4>().unwrap();
                    let go = gout.view().into_dimensionality::<Ix4>().unwrap();
                    let want_bias = bias.map(|b| self.requires[b]).unwrap_or(false);
                    let (dx, dw, db) =
                        kernels::conv2d_backward(&x, &w, &go, stride, pad, want_bias);
                    if self.requires[input] {
                        Self::accum(&mut self.grads, input, dx.into_dyn());
                    }
                    if self.requires[weight] {
                        Self::accum(&mut self.grads, weight, dw.into_dyn());
                    }
                    if let (Some(bid), Some(db)) = (bias, db) {
                        Self::accum(&mut self.grads, bid, db.into_dyn());
                    }
                }
                Op::MaxPool2 { input, argmax } => {
                    let input = *input;
                    let dim = self.values[input].shape();
                    let dim = (dim[0], dim[1], dim[2], dim[3]);
                    let go = gout.view().into_dimensionality::<Ix4>().unwrap();
                    let dx = kernels::maxpool2_backward(&go, argmax, dim);
                    Self::accum(&mut self.grads, input, dx.into_dyn());
                }
                Op::AvgPool2(input) => {
                    let input = *input;
                    let dim = self.values[input].shape();
                    let dim = (dim[0], dim[1], dim[2], dim[3]);
                    let go = gout.view().into_dimensionality::<Ix4>().unwrap();
                    let dx = kernels::avgpool2_backward(&go, dim);
                    Self::accum(&mut self.grads, input, dx.into_dyn());
                }
                Op::GlobalAvgPool(input) => {
                    let input = *input;
                    let shape = self.values[input].shape().to_vec();
                    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
                    let go = gout.view().into_dimensionality::<Ix2>().unwrap();
                    let mut dx = ndarray::Array4::<f64>::zeros((n, c, h, w));
                    let inv = 1.0 / (h * w) as f64;
                    for i in 0..n {
                        for ch in 0..c {
                            let g = go[(i, ch)] * inv;
                            dx.index_axis_mut(Axis(0), i)
                                .index_axis_mut(Axis(0), ch)
                                .fill(g);
                        }
                    }
                    Self::accum(&mut self.grads, input, dx.into_dyn());
                }
                Op::Upsample2(input) => {
                    let input = *input;
                    let go = gout.view().into_dimensionality::<Ix4>().unwrap();
                    let dx = kernels::upsample2_backward(&go);
                    Self::accum(&mut self.grads, input, dx.into_dyn());
                }
                Op::InstanceNorm {
                    input,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let (input, gamma, beta) = (*input, *gamma, *beta);
                    let xh = xhat.view().into_dimensionality::<Ix4>().unwrap();
                    let go = gout.view().into_dimensionality::<Ix4>().unwrap();
                    let (n, c, h, w) = xh.dim();
                    let hw = (h * w) as f64;
                    let g = &self.values[gamma];
                    let mut dgamma = Array1::<f64>::zeros(c);
                    let mut dbeta = Array1::<f64>::zeros(c);
                    let mut dx = ndarray::Array4::<f64>::zeros((n, c, h, w));
                    for i in 0..n {
                        for ch in 0..c {
                            let gc = g[[ch]];
                            let is = inv_std[(i, ch)];
                            let mut sum_dy = 0.0;
                            let mut sum_dy_xh = 0.0;
                            for y in 0..h {
                                for xx in 0..w {
                                    let dy = go[(i, ch, y, xx)];
                                    sum_dy += dy;
                                    sum_dy_xh += dy * xh[(i, ch, y, xx)];
                                    dgamma[ch] += dy * xh[(i, ch, y, xx)];
                                    dbeta[ch] += dy;
                                }
                            }
                            let (m_dy, m_dy_xh) = (sum_dy / hw, sum_dy_xh / hw);
                            for y in 0..h {
                                for xx in 0..w {
                                    let dy = go[(i, ch, y, xx)];
                                    dx[(i, ch, y, xx)] = gc
                                        * is
                                        * (dy - m_dy - xh[(i, ch, y, xx)] * m_dy_xh);
                                }
                            }
                        }
                    }
                    if self.requires[input] {
                        Self::accum(&mut self.grads, input, dx.into_dyn());
                    }
                    if self.requires[gamma] {
                        Self::accum(&mut self.grads, gamma, dgamma.into_dyn());
                    }
                    if self.requires[beta] {
                        Self::accum(&mut self.grads, beta, dbeta.into_dyn());
                    }
                }
                Op::BatchNormTrain {
                    input,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                    ..
                } => {
                    let (input, gamma, beta) = (*input, *gamma, *beta);
                    let xh = xhat.view().into_dimensionality::<Ix4>().unwrap();
                    let go = gout.view().into_dimensionality::<Ix4>().unwrap();
                    let (n, c, h, w) = xh.dim();
                    let count = (n * h * w) as f64;
                    let g = &self.values[gamma];
                    let mut dgamma = Array1::<f64>::zeros(c);
                    let mut dbeta = Array1::<f64>::zeros(c);
                    for i in 0..n {
                        for ch in 0..c {
                            for y in 0..h {
                                for xx in 0..w {
                                    let dy = go[(i, ch, y, xx)];
                                    dgamma[ch] += dy * xh[(i, ch, y, xx)];
                                    dbeta[ch] += dy;
                                }
                            }
                        }
                    }
                    if self.requires[input] {
                        let mut dx = ndarray::Array4::<f64>::zeros((n, c, h, w));
                        for ch in 0..c {
                            let gc = g[[ch]];
                            let is = inv_std[ch];
                            let (m_dy, m_dy_xh) = (dbeta[ch] / count, dgamma[ch] / count);
                            for i in 0..n {
                                for y in 0..h {
                                    for xx in 0..w {
                                        let dy = go[(i, ch, y, xx)];
                                        dx[(i, ch, y, xx)] = gc
                                            * is
                                            * (dy - m_dy - xh[(i, ch, y, xx)] * m_dy_xh);
                                    }
                                }
                            }
                        }
                        Self::accum(&mut self.grads, input, dx.into_dyn());
                    }
                    if self.requires[gamma] {
                        Self::accum(&mut self.grads, gamma, dgamma.into_dyn());
                    }
                    if self.requires[beta] {
                        Self::accum(&mut self.grads, beta, dbeta.into_dyn());
                    }
                }
                Op::BatchNormEval {
                    input,
                    gamma,
                    beta,
                    scale,
                    mean,
                    inv_std,
                } => {
                    let (input, gamma, beta) = (*input, *gamma, *beta);
                    let go = gout.view().into_dimensionality::<Ix4>().unwrap();
                    let (n, c, h, w) = go.dim();
                    if self.requires[input] {
                        let mut dx = ndarray::Array4::<f64>::zeros((n, c, h, w));
                        for i in 0..n {
                            for ch in 0..c {
                                let sc = scale[ch];
                                for y in 0..h {
                                    for xx in 0..w {
                                        dx[(i, ch, y, xx)] = go[(i, ch, y, xx)] * sc;
                                    }
                                }
                            }
                        }
                        Self::accum(&mut self.grads, input, dx.into_dyn());
                    }
                    if self.requires[gamma] || self.requires[beta] {
                        let x = self.values[input].view().into_dimensionality::<Ix4>().unwrap();
                        let mut dgamma = Array1::<f64>::zeros(c);
                        let mut dbeta = Array1::<f64>::zeros(c);
                        for i in 0..n {
                            for ch in 0..c {
                                for y in 0..h {
                                    for xx in 0..w {
                                        let dy = go[(i, ch, y, xx)];
                                        dgamma[ch] +=
                                            dy * (x[(i, ch, y, xx)] - mean[ch]) * inv_std[ch];
                                        dbeta[ch] += dy;
                                    }
                                }
                            }
                        }
                        if self.requires[gamma] {
                            Self::accum(&mut self.grads, gamma, dgamma.into_dyn());
                        }
                        if self.requires[beta] {
                            Self::accum(&mut self.grads, beta, dbeta.into_dyn());
                        }
                    }
                }
                Op::Linear { input, weight, bias } => {
                    let (input, weight, bias) = (*input, *weight, *bias);
                    let x = self.values[input].view().into_dimensionality::<Ix2>().unwrap();
                    let w = self.values[weight].view().into_dimensionality::<Ix2>().unwrap();
                    let go = gout.view().into_dimensionality::<Ix2>().unwrap();
                    if self.requires[input] {
                        let dx = go.dot(&w.t());
                        Self::accum(&mut self.grads, input, dx.into_dyn());
                    }
                    if self.requires[weight] {
                        let dw = x.t().dot(&go);
                        Self::accum(&mut self.grads, weight, dw.into_dyn());
                    }
                    if self.requires[bias] {
                        let db = go.sum_axis(Axis(0));
                        Self::accum(&mut self.grads, bias, db.into_dyn());
                    }
                }
                Op::Flatten { input, input_shape } => {
                    let input = *input;
                    let dx = gout
                        .into_shape_with_order(IxDyn(input_shape))
                        .expect("unflatten");
                    Self::accum(&mut self.grads, input, dx);
                }
                Op::ConcatChannels { inputs } => {
                    let inputs = inputs.clone();
                    let go = gout.view().into_dimensionality::<Ix4>().unwrap();
                    let mut offset = 0;
                    for id_in in inputs {
                        let c = self.values[id_in].shape()[1];
                        if self.requires[id_in] {
                            let slice = go
                                .slice(ndarray::s![.., offset..offset + c, .., ..])
                                .to_owned();
                            Self::accum(&mut self.grads, id_in, slice.into_dyn());
                        }
                        offset += c;
                    }
                }
                Op::MeanAll(input) => {
                    let input = *input;
                    let g = gout.iter().next().copied().unwrap_or(0.0);
                    let len = self.values[input].len() as f64;
                    let dx = ArrayD::from_elem(self.values[input].raw_dim(), g / len);
                    Self::accum(&mut self.grads, input, dx);
                }
                Op::CosineSimMean {
                    a,
                    b,
                    eta,
                    sims,
                    norm_a,
                    norm_b,
                } => {
                    let (a, b, eta) = (*a, *b, *eta);
                    let g = gout.iter().next().copied().unwrap_or(0.0);
                    let av = self.values[a].view().into_dimensionality::<Ix2>().unwrap();
                    let bv = self.values[b].view().into_dimensionality::<Ix2>().unwrap();
                    let n = av.nrows();
                    let gs = g / n as f64;
                    let mut da = Array2::<f64>::zeros(av.dim());
                    let mut db = Array2::<f64>::zeros(bv.dim());
                    for i in 0..n {
                        let (ra, rb) = (av.row(i), bv.row(i));
                        let (na, nb, s) = (norm_a[i], norm_b[i], sims[i]);
                        let denom = na * nb;
                        for j in 0..ra.len() {
                            // d sim / d a_j; the norm term vanishes where the
                            // stabilizer clamp is active.
                            let mut ga = rb[j] / denom;
                            if na > eta {
                                ga -= s * ra[j] / (na * na);
                            }
                            da[(i, j)] = gs * ga;
                            let mut gb = ra[j] / denom;
                            if nb > eta {
                                gb -= s * rb[j] / (nb * nb);
                            }
                            db[(i, j)] = gs * gb;
                        }
                    }
                    if self.requires[a] {
                        Self::accum(&mut self.grads, a, da.into_dyn());
                    }
                    if self.requires[b] {
                        Self::accum(&mut self.grads, b, db.into_dyn());
                    }
                }
                Op::SoftmaxXentMean {
                    logits,
                    labels,
                    probs,
                } => {
                    let logits = *logits;
                    let g = gout.iter().next().copied().unwrap_or(0.0);
                    let n = labels.len();
                    let mut dl = probs.clone();
                    for (i, &lab) in labels.iter().enumerate() {
                        dl[(i, lab)] -= 1.0;
                    }
                    dl.mapv_inplace(|v| v * g / n as f64);
                    Self::accum(&mut self.grads, logits, dl.into_dyn());
                }
                Op::Custom { op, inputs } => {
                    let op = Arc::clone(op);
                    let inputs = inputs.clone();
                    let in_vals: Vec<&ArrayD<f64>> =
                        inputs.iter().map(|&i| &self.values[i]).collect();
                    let dparents = op.backward(&gout, &in_vals, &self.values[id])?;
                    for (pid, d) in inputs.iter().zip(dparents) {
                        if let Some(d) = d {
                            if self.requires[*pid] {
                                Self::accum(&mut self.grads, *pid, d);
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

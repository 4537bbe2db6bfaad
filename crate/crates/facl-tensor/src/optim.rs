//! Named parameter storage and the Adam optimizer.

use std::collections::BTreeMap;

use ndarray::ArrayD;

use crate::graph::Graph;

/// Ordered name -> tensor storage for parameters and buffers.
///
/// Iteration order is the sorted name order, which keeps checkpoint layout
/// and optimizer traversal stable across runs.
#[derive(Debug, Clone, Default)]
pub struct TensorMap {
    entries: BTreeMap<String, ArrayD<f64>>,
}

impl TensorMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: ArrayD<f64>) {
        self.entries.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&ArrayD<f64>> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ArrayD<f64>> {
        self.entries.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ArrayD<f64>)> {
        self.entries.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total element count across all tensors.
    pub fn num_elements(&self) -> usize {
        self.entries.values().map(|v| v.len()).sum()
    }

    /// A cheap order-sensitive digest of all values; used by tests to prove
    /// parameters were (or were not) mutated.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        for (name, v) in &self.entries {
            for b in name.as_bytes() {
                h = (h ^ *b as u64).wrapping_mul(0x100000001b3);
            }
            for x in v.iter() {
                for b in x.to_le_bytes() {
                    h = (h ^ b as u64).wrapping_mul(0x100000001b3);
                }
            }
        }
        h
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. Moment buffers are keyed by parameter name.
pub struct Adam {
    cfg: AdamConfig,
    m: BTreeMap<String, ArrayD<f64>>,
    v: BTreeMap<String, ArrayD<f64>>,
    t: u64,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Adam {
            cfg,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
            t: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// Applies one update using the gradients bound in `graph` (see
    /// [`Graph::param`]). Parameters without a gradient are skipped.
    pub fn step(&mut self, params: &mut TensorMap, graph: &Graph) {
        self.t += 1;
        let bc1 = 1.0 - self.cfg.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.cfg.beta2.powi(self.t as i32);
        for (name, id) in graph.bindings() {
            let Some(grad) = graph.grad(*id) else {
                continue;
            };
            let p = params
                .get_mut(name)
                .unwrap_or_else(|| panic!("optimizer: unknown parameter `{name}`"));
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(p.raw_dim()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(p.raw_dim()));
            ndarray::Zip::from(p)
                .and(m)
                .and(v)
                .and(grad)
                .for_each(|p, m, v, &g| {
                    *m = self.cfg.beta1 * *m + (1.0 - self.cfg.beta1) * g;
                    *v = self.cfg.beta2 * *v + (1.0 - self.cfg.beta2) * g * g;
                    let mhat = *m / bc1;
                    let vhat = *v / bc2;
                    *p -= self.cfg.lr * mhat / (vhat.sqrt() + self.cfg.eps);
                });
        }
    }
}

//! Parameter registry and optimizers.
//!
//! Every learnable or frozen tensor of a model lives in one [`ParamStore`] in
//! registration order. That order is what checkpoints serialise and what the
//! trainable-parameter count enumerates.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Gradients, Tape, Tensor, Var};
use crate::error::{CilmpError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct ParamEntry {
    pub name: String,
    pub value: Tensor,
    pub frozen: bool,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

/// Parameters pushed onto one tape, indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Binding {
    vars: Vec<Var>,
}

impl Binding {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}

impl std::ops::Index<ParamId> for Binding {
    type Output = Var;
    fn index(&self, id: ParamId) -> &Var {
        &self.vars[id.0]
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.entries.push(ParamEntry {
            name: name.into(),
            value,
            frozen: false,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + Clone {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn is_frozen(&self, id: ParamId) -> bool {
        self.entries[id.0].frozen
    }

    /// Overwrites a parameter value. Frozen parameters refuse the write.
    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let e = &mut self.entries[id.0];
        if e.frozen {
            return Err(CilmpError::Frozen(e.name.clone()));
        }
        if e.value.shape() != value.shape() {
            return Err(CilmpError::dim("ParamStore::set", e.value.shape(), value.shape()));
        }
        e.value = value;
        Ok(())
    }

    pub(crate) fn set_unchecked(&mut self, id: ParamId, value: Tensor) {
        self.entries[id.0].value = value;
    }

    pub fn freeze(&mut self, ids: impl IntoIterator<Item = ParamId>) {
        for id in ids {
            self.entries[id.0].frozen = true;
        }
    }

    /// Pushes every parameter onto `tape`: trainable ones as differentiable
    /// leaves, frozen ones as constants.
    pub fn bind(&self, tape: &mut Tape) -> Binding {
        let vars = self
            .entries
            .iter()
            .map(|e| {
                if e.frozen {
                    tape.constant(e.value.clone())
                } else {
                    tape.param(e.value.clone())
                }
            })
            .collect();
        Binding { vars }
    }

    /// Pushes every parameter as a constant, for inference.
    pub fn bind_constants(&self, tape: &mut Tape) -> Binding {
        Binding {
            vars: self.entries.iter().map(|e| tape.constant(e.value.clone())).collect(),
        }
    }

    /// Pushes every parameter as a constant except those in `overrides`,
    /// which are bound to the given vars.
    pub fn bind_with(&self, tape: &mut Tape, overrides: &[(ParamId, Var)]) -> Binding {
        let mut binding = self.bind_constants(tape);
        for &(id, v) in overrides {
            binding.vars[id.0] = v;
        }
        binding
    }

    pub fn trainable_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| !e.frozen)
            .map(|e| e.value.numel())
            .sum()
    }

    pub fn total_count(&self) -> usize {
        self.entries.iter().map(|e| e.value.numel()).sum()
    }

    /// 64-bit digest of the little-endian bytes of the selected parameters.
    pub fn checksum(&self, ids: impl IntoIterator<Item = ParamId>) -> u64 {
        let mut h = Sha256::new();
        for id in ids {
            let e = &self.entries[id.0];
            h.update(e.name.as_bytes());
            h.update(e.value.to_le_bytes());
        }
        digest_to_u64(&h.finalize())
    }
}

pub(crate) fn digest_to_u64(d: &[u8]) -> u64 {
    let mut b = [0u8; 8];
    b.copy_from_slice(&d[..8]);
    u64::from_le_bytes(b)
}

/// SHA-256 of raw bytes folded to 64 bits.
pub fn checksum_bytes(bytes: &[u8]) -> u64 {
    digest_to_u64(&Sha256::digest(bytes))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerConfig {
    Sgd {
        lr: f64,
        #[serde(default = "default_momentum")]
        momentum: f64,
    },
    Adam {
        lr: f64,
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_adam_eps")]
        eps: f64,
    },
}

fn default_momentum() -> f64 {
    0.9
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_adam_eps() -> f64 {
    1e-8
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig::Sgd {
            lr: 0.0025,
            momentum: 0.9,
        }
    }
}

/// First-order optimizer over a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Optimizer {
    config: OptimizerConfig,
    first: Vec<Option<Vec<f64>>>,
    second: Vec<Option<Vec<f64>>>,
    steps: u64,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig) -> Self {
        Optimizer {
            config,
            first: Vec::new(),
            second: Vec::new(),
            steps: 0,
        }
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    /// Applies one update to every parameter that received a gradient.
    pub fn step(&mut self, store: &mut ParamStore, binding: &Binding, grads: &Gradients) -> Result<()> {
        let updates: Vec<(ParamId, &Tensor)> = store
            .ids()
            .filter_map(|id| grads.get(binding.var(id)).map(|g| (id, g)))
            .collect();
        self.apply(store, &updates)
    }

    /// Applies explicit `(parameter, gradient)` pairs. Any frozen target is an error
    /// and nothing is written.
    pub fn apply(&mut self, store: &mut ParamStore, updates: &[(ParamId, &Tensor)]) -> Result<()> {
        for (id, g) in updates {
            if store.is_frozen(*id) {
                return Err(CilmpError::Frozen(store.name(*id).to_string()));
            }
            if g.shape() != store.get(*id).shape() {
                return Err(CilmpError::dim("optimizer", store.get(*id).shape(), g.shape()));
            }
            if !g.is_finite() {
                return Err(CilmpError::Numerical(format!(
                    "non-finite gradient for `{}`",
                    store.name(*id)
                )));
            }
        }
        if self.first.len() < store.len() {
            self.first.resize(store.len(), None);
            self.second.resize(store.len(), None);
        }
        self.steps += 1;
        for (id, g) in updates {
            let mut value = store.get(*id).clone();
            let n = value.numel();
            match self.config {
                OptimizerConfig::Sgd { lr, momentum } => {
                    let v = self.first[id.0].get_or_insert_with(|| vec![0.0; n]);
                    for ((w, vi), gi) in value.data_mut().iter_mut().zip(v.iter_mut()).zip(g.data()) {
                        *vi = momentum * *vi + gi;
                        *w -= lr * *vi;
                    }
                }
                OptimizerConfig::Adam { lr, beta1, beta2, eps } => {
                    let m = self.first[id.0].get_or_insert_with(|| vec![0.0; n]);
                    let s = self.second[id.0].get_or_insert_with(|| vec![0.0; n]);
                    let t = self.steps as i32;
                    let c1 = 1.0 - beta1.powi(t);
                    let c2 = 1.0 - beta2.powi(t);
                    for (((w, mi), si), gi) in value
                        .data_mut()
                        .iter_mut()
                        .zip(m.iter_mut())
                        .zip(s.iter_mut())
                        .zip(g.data())
                    {
                        *mi = beta1 * *mi + (1.0 - beta1) * gi;
                        *si = beta2 * *si + (1.0 - beta2) * gi * gi;
                        *w -= lr * (*mi / c1) / ((*si / c2).sqrt() + eps);
                    }
                }
            }
            store.set_unchecked(*id, value);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frozen_parameters_bind_as_constants_and_refuse_updates() {
        let mut s = ParamStore::new();
        let a = s.add("a", Tensor::vector(vec![1.0, 2.0]));
        let b = s.add("b", Tensor::vector(vec![3.0]));
        s.freeze([a]);
        assert_eq!(s.trainable_count(), 1);

        let mut t = Tape::new();
        let bind = s.bind(&mut t);
        assert!(!t.requires_grad(bind[a]));
        assert!(t.requires_grad(bind[b]));

        let mut opt = Optimizer::new(OptimizerConfig::default());
        let g = Tensor::vector(vec![1.0, 1.0]);
        assert!(matches!(opt.apply(&mut s, &[(a, &g)]), Err(CilmpError::Frozen(_))));
        assert!(s.set(a, Tensor::vector(vec![0.0, 0.0])).is_err());
    }

    #[test]
    fn sgd_momentum_matches_hand_recursion() {
        let mut s = ParamStore::new();
        let a = s.add("a", Tensor::scalar(1.0));
        let mut opt = Optimizer::new(OptimizerConfig::Sgd { lr: 0.1, momentum: 0.5 });
        let g = Tensor::scalar(2.0);
        opt.apply(&mut s, &[(a, &g)]).unwrap();
        // v = 2, w = 1 - 0.2
        assert!((s.get(a).item() - 0.8).abs() < 1e-15);
        opt.apply(&mut s, &[(a, &g)]).unwrap();
        // v = 0.5*2 + 2 = 3, w = 0.8 - 0.3
        assert!((s.get(a).item() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn checksum_tracks_values() {
        let mut s = ParamStore::new();
        let a = s.add("a", Tensor::vector(vec![1.0, 2.0]));
        let c0 = s.checksum([a]);
        assert_eq!(c0, s.checksum([a]));
        s.set(a, Tensor::vector(vec![1.0, 2.000_000_1])).unwrap();
        assert_ne!(c0, s.checksum([a]));
    }
}

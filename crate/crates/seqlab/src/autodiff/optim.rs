//! Named parameter storage and the Adam update rule.
//!
//! Parameters live outside any one computation graph so they survive across
//! sentences and epochs; graphs borrow them as leaves via `Graph::param`.
//! Frozen parameters never receive gradient and Adam leaves their bytes
//! untouched.

use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Parameter {
    pub name: String,
    pub tensor: Tensor,
    pub frozen: bool,
}

#[derive(Debug, Default, Clone, Serialize, Deserialize)]
pub struct ParamStore {
    slots: Vec<Parameter>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn register(&mut self, name: &str, tensor: Tensor) -> ParamId {
        self.insert(name, tensor, false)
    }

    pub fn register_frozen(&mut self, name: &str, tensor: Tensor) -> ParamId {
        self.insert(name, tensor, true)
    }

    fn insert(&mut self, name: &str, tensor: Tensor, frozen: bool) -> ParamId {
        assert!(
            self.slots.iter().all(|p| p.name != name),
            "duplicate parameter name {name:?}"
        );
        let id = ParamId(self.slots.len());
        self.slots.push(Parameter { name: name.to_string(), tensor, frozen });
        id
    }

    /// Reuse the named parameter if the store already holds it (validating
    /// shape and freeze flag), otherwise register a fresh one from `make`.
    /// Lets a deserialized store flow back through model construction.
    pub fn obtain(
        &mut self,
        name: &str,
        shape: &[usize],
        frozen: bool,
        make: impl FnOnce() -> Tensor,
    ) -> Result<ParamId> {
        if let Some(pid) = self.lookup(name) {
            let p = self.get(pid);
            if p.tensor.shape() != shape {
                return Err(Error::Config(format!(
                    "stored parameter `{name}` has shape {:?}, expected {:?}",
                    p.tensor.shape(),
                    shape
                )));
            }
            if p.frozen != frozen {
                return Err(Error::Config(format!(
                    "stored parameter `{name}` frozen={}, expected frozen={frozen}",
                    p.frozen
                )));
            }
            return Ok(pid);
        }
        let t = make();
        assert_eq!(t.shape(), shape, "initializer shape for `{name}`");
        Ok(self.insert(name, t, frozen))
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.slots[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.slots[id.0]
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.slots.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.slots.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    /// Total number of scalar values across non-frozen parameters.
    pub fn trainable_numel(&self) -> usize {
        self.slots.iter().filter(|p| !p.frozen).map(|p| p.tensor.numel()).sum()
    }
}

/// Gradient accumulator aligned with a `ParamStore`, used to sum gradients
/// over the sentences of a batch before a single optimizer step.
#[derive(Debug)]
pub struct GradBuffer {
    grads: Vec<Option<Tensor>>,
}

impl GradBuffer {
    pub fn new(store: &ParamStore) -> Self {
        GradBuffer { grads: vec![None; store.len()] }
    }

    pub fn zero(&mut self) {
        for g in &mut self.grads {
            *g = None;
        }
    }

    /// Add `scale * grad` into the slot for `pid`.
    pub fn accumulate(&mut self, pid: ParamId, grad: &Tensor, scale: f64) {
        match &mut self.grads[pid.0] {
            Some(g) => {
                for (gi, ci) in g.data_mut().iter_mut().zip(grad.data()) {
                    *gi += scale * ci;
                }
            }
            None => {
                let data = grad.data().iter().map(|v| scale * v).collect();
                self.grads[pid.0] = Some(Tensor::new(grad.shape().to_vec(), data));
            }
        }
    }

    pub fn get(&self, pid: ParamId) -> Option<&Tensor> {
        self.grads[pid.0].as_ref()
    }

    /// Global L2 norm over every accumulated gradient.
    pub fn global_norm(&self) -> f64 {
        let sq: f64 = self
            .grads
            .iter()
            .flatten()
            .flat_map(|g| g.data())
            .map(|v| v * v)
            .sum();
        sq.sqrt()
    }

    /// Rescale all gradients so the global norm is at most `max_norm`.
    pub fn clip_global_norm(&mut self, max_norm: f64) {
        let norm = self.global_norm();
        if norm > max_norm {
            let s = max_norm / norm;
            for g in self.grads.iter_mut().flatten() {
                for v in g.data_mut() {
                    *v *= s;
                }
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.grads.iter().flatten().all(|g| g.all_finite())
    }
}

/// Adam with bias correction. First and second moment estimates are kept
/// per parameter slot; frozen slots are skipped entirely.
#[derive(Debug)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: u64,
    m: Vec<Option<Tensor>>,
    v: Vec<Option<Tensor>>,
}

impl Adam {
    pub fn new(store: &ParamStore, learning_rate: f64) -> Self {
        Adam {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            m: vec![None; store.len()],
            v: vec![None; store.len()],
        }
    }

    /// One update over every non-frozen parameter that has gradient.
    pub fn step(&mut self, store: &mut ParamStore, grads: &GradBuffer) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (i, slot) in store.slots.iter_mut().enumerate() {
            if slot.frozen {
                continue;
            }
            let Some(g) = grads.grads[i].as_ref() else { continue };
            if g.shape() != slot.tensor.shape() {
                return Err(Error::Numeric(format!(
                    "gradient shape {:?} does not match parameter `{}` {:?}",
                    g.shape(),
                    slot.name,
                    slot.tensor.shape()
                )));
            }
            let m = self.m[i].get_or_insert_with(|| Tensor::zeros(slot.tensor.shape()));
            let v = self.v[i].get_or_insert_with(|| Tensor::zeros(slot.tensor.shape()));
            let (b1, b2, eps, lr) = (self.beta1, self.beta2, self.epsilon, self.learning_rate);
            let gd = g.data();
            let md = m.data_mut();
            for (mj, gj) in md.iter_mut().zip(gd) {
                *mj = b1 * *mj + (1.0 - b1) * gj;
            }
            let vd = v.data_mut();
            for (vj, gj) in vd.iter_mut().zip(gd) {
                *vj = b2 * *vj + (1.0 - b2) * gj * gj;
            }
            let pd = slot.tensor.data_mut();
            for j in 0..pd.len() {
                let mhat = m.data()[j] / bc1;
                let vhat = v.data()[j] / bc2;
                pd[j] -= lr * mhat / (vhat.sqrt() + eps);
            }
            if !slot.tensor.all_finite() {
                return Err(Error::Numeric(format!(
                    "parameter `{}` became non-finite during optimizer step {}",
                    slot.name, self.step
                )));
            }
        }
        Ok(())
    }
}

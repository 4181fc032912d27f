//! Trainable parameters, their gradient accumulators and optimizer state.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

#[cfg(not(feature = "std"))]
use num_traits::Float;

use crate::error::{bail, Result};
use crate::scalar::Real;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// How a parameter is updated after a backward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Update {
    Adam,
    /// Row-orthonormal weight moved along the Stiefel manifold.
    Stiefel,
    /// Buffers (running statistics, power-iteration vectors) and frozen
    /// weights. They are checkpointed but never receive gradients.
    None,
}

#[derive(Debug, Clone)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Vec<T>,
    pub adam_m: Vec<T>,
    pub adam_v: Vec<T>,
    pub step: u64,
    pub update: Update,
    /// Double-precision master copy, kept for Stiefel weights so the
    /// orthonormality constraint survives single-precision storage.
    pub master: Option<Vec<f64>>,
}

impl<T: Real> Param<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>, update: Update) -> Self {
        let n = value.len();
        Param {
            name: name.into(),
            value,
            grad: vec![T::zero(); n],
            adam_m: vec![T::zero(); n],
            adam_v: vec![T::zero(); n],
            step: 0,
            master: None,
            update,
        }
    }

    pub fn with_master(mut self, master: Vec<f64>) -> Self {
        self.master = Some(master);
        self
    }

    pub fn trainable(&self) -> bool {
        self.update != Update::None
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = T::zero());
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig { lr, beta1: 0.5, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepOutcome {
    Applied,
    /// The gradient held NaN or ±∞; the value was left untouched.
    SkippedNonFinite,
}

/// One bias-corrected Adam step. The gradient is cleared either way.
pub fn adam_step<T: Real>(p: &mut Param<T>, cfg: &AdamConfig) -> StepOutcome {
    if p.grad.iter().any(|g| !g.is_finite()) {
        p.zero_grad();
        return StepOutcome::SkippedNonFinite;
    }
    p.step += 1;
    let t = p.step as i32;
    let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
    let bc1 = T::of(1.0 - cfg.beta1.powi(t));
    let bc2 = T::of(1.0 - cfg.beta2.powi(t));
    let (lr, eps) = (T::of(cfg.lr), T::of(cfg.eps));
    let value = p.value.data_mut();
    for i in 0..value.len() {
        let g = p.grad[i];
        p.adam_m[i] = b1 * p.adam_m[i] + (T::one() - b1) * g;
        p.adam_v[i] = b2 * p.adam_v[i] + (T::one() - b2) * g * g;
        let m_hat = p.adam_m[i] / bc1;
        let v_hat = p.adam_v[i] / bc2;
        value[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        p.grad[i] = T::zero();
    }
    StepOutcome::Applied
}

/// Identifies a store inside a [`crate::Graph`]; each network owns a store
/// with a distinct tag.
pub type StoreTag = u32;

#[derive(Debug, Clone)]
pub struct ParamStore<T> {
    tag: StoreTag,
    params: Vec<Param<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new(tag: StoreTag) -> Self {
        ParamStore { tag, params: Vec::new() }
    }

    pub fn tag(&self) -> StoreTag {
        self.tag
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>, update: Update) -> ParamId {
        self.params.push(Param::new(name, value, update));
        ParamId(self.params.len() - 1)
    }

    pub fn push(&mut self, param: Param<T>) -> ParamId {
        self.params.push(param);
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(Param::zero_grad);
    }

    /// Adds `grad` into the accumulator of `id`.
    pub fn accumulate(&mut self, id: ParamId, grad: &[T]) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.grad.len() != grad.len() {
            bail!(Internal, "gradient for {} has {} entries, expected {}", p.name, grad.len(), p.grad.len());
        }
        for (a, &g) in p.grad.iter_mut().zip(grad) {
            *a += g;
        }
        Ok(())
    }

    /// Adam on every `Update::Adam` parameter; returns the names of
    /// parameters whose step was skipped for a non-finite gradient.
    pub fn adam_step_all(&mut self, cfg: &AdamConfig) -> Vec<String> {
        let mut skipped = Vec::new();
        for p in self.params.iter_mut().filter(|p| p.update == Update::Adam) {
            if adam_step(p, cfg) == StepOutcome::SkippedNonFinite {
                skipped.push(p.name.clone());
            }
        }
        skipped
    }

    pub fn total_values(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }
}

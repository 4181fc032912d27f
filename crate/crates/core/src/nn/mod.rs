//! Layers on top of the tape: convolutions, the three normalizations, and
//! spectral normalization by persistent power iteration.

pub mod kernels;

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

#[cfg(not(feature = "std"))]
use num_traits::Float;

use crate::error::{bail, Result};
use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore, Update};
use crate::rng::{self, Stream};
use crate::scalar::Real;
use crate::tensor::Tensor;

/// Standard deviation of the Gaussian weight initialization.
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics, running-stat and power-iteration updates.
    Train,
    /// Running statistics, frozen power-iteration vectors.
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormKind {
    Batch,
    Instance,
    Spectral,
    None,
}

impl NormKind {
    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s.trim().to_ascii_lowercase().as_str() {
            "batch" | "bn" => NormKind::Batch,
            "instance" | "in" => NormKind::Instance,
            "spectral" | "sn" => NormKind::Spectral,
            "none" => NormKind::None,
            other => bail!(Config, "unknown normalization {other:?}"),
        })
    }

    pub fn as_str(self) -> &'static str {
        match self {
            NormKind::Batch => "batch",
            NormKind::Instance => "instance",
            NormKind::Spectral => "spectral",
            NormKind::None => "none",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormSpec {
    pub kind: NormKind,
    pub eps: f64,
    /// Running-statistics momentum for batch normalization.
    pub momentum: f64,
}

impl NormSpec {
    pub fn new(kind: NormKind) -> Self {
        NormSpec { kind, eps: 1e-5, momentum: 0.1 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eps > 0.0) {
            bail!(Config, "normalization eps must be positive, got {}", self.eps);
        }
        Ok(())
    }
}

pub fn gaussian<T: Real>(rng: &mut Stream, shape: &[usize], std: f64) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::of(std * rng::normal(rng)))
}

/// Relative change of `σ̂` between power iterations below which the
/// estimate is taken as converged; see [`power_iterate_converged`] for the
/// error this implies (about 4e-4 on `σ`).
pub const SN_TOL: f64 = 1e-6;

/// Power-iteration state for one weight: the persistent left vector `u`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SpectralNorm {
    pub u: ParamId,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SigmaEstimate {
    pub sigma: f64,
    /// The weight is (numerically) zero; it is passed through unscaled.
    pub degenerate: bool,
    /// Power iterations spent on this estimate.
    pub iters: usize,
}

fn weight_rows<T: Real>(w: &Tensor<T>) -> (usize, usize) {
    let rows = w.shape()[0];
    (rows, w.len() / rows.max(1))
}

/// The current `u` and `v = Wᵀu` for a weight read as `m × n` rows, so
/// `σ̂ = ‖v‖`.
struct PowerState {
    m: usize,
    n: usize,
    u: Vec<f64>,
    v: Vec<f64>,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Dot product with eight independent accumulators, so the loop vectorizes
/// while the summation order stays fixed.
fn dot8<T: Real>(w: &[T], v: &[f64]) -> f64 {
    let mut acc = [0.0; 8];
    let (cw, cv) = (w.chunks_exact(8), v.chunks_exact(8));
    let tail: f64 = cw.remainder().iter().zip(cv.remainder()).map(|(x, y)| x.f64() * y).sum();
    for (x, y) in cw.zip(cv) {
        for k in 0..8 {
            acc[k] += x[k].f64() * y[k];
        }
    }
    acc.iter().sum::<f64>() + tail
}

impl PowerState {
    fn new<T: Real>(w: &Tensor<T>, u: &Tensor<T>) -> Self {
        let (m, n) = weight_rows(w);
        let u: Vec<f64> = u.data().iter().map(|v| v.f64()).collect();
        let mut v = alloc::vec![0.0; n];
        for (i, &ui) in u.iter().enumerate() {
            for (vj, wij) in v.iter_mut().zip(&w.data()[i * n..(i + 1) * n]) {
                *vj += ui * wij.f64();
            }
        }
        PowerState { m, n, u, v }
    }

    /// `u ← W v / ‖W v‖`, `v ← Wᵀu` in a single pass over the rows of `W`;
    /// `false` if the weight annihilates `v`.
    fn iterate<T: Real>(&mut self, w: &[T]) -> bool {
        let n = self.n;
        let mut next = alloc::vec![0.0; n];
        for i in 0..self.m {
            let row = &w[i * n..(i + 1) * n];
            let s = dot8(row, &self.v);
            self.u[i] = s;
            for (a, x) in next.iter_mut().zip(row) {
                *a += s * x.f64();
            }
        }
        let nu = norm(&self.u);
        if !(nu > 1e-300) {
            return false;
        }
        self.u.iter_mut().for_each(|x| *x /= nu);
        next.iter_mut().for_each(|x| *x /= nu);
        self.v = next;
        true
    }

    fn sigma(&self, iters: usize) -> SigmaEstimate {
        let sigma = norm(&self.v) / norm(&self.u).max(1e-300);
        SigmaEstimate { sigma, degenerate: !(sigma > 1e-12), iters }
    }

    fn store<T: Real>(&self, store: &mut ParamStore<T>, sn: SpectralNorm) {
        let ut = store.get_mut(sn.u).value.data_mut();
        for (d, &s) in ut.iter_mut().zip(&self.u) {
            *d = T::of(s);
        }
    }
}

fn degenerate(iters: usize) -> SigmaEstimate {
    SigmaEstimate { sigma: 0.0, degenerate: true, iters }
}

/// Runs `iters` power iterations on `w` (reshaped to `out × rest`) starting
/// from the stored `u`, writes `u` back, and returns `σ̂ = ‖Wᵀu‖`.
/// `iters == 0` only evaluates the estimate.
pub fn power_iterate<T: Real>(store: &mut ParamStore<T>, w: ParamId, sn: SpectralNorm, iters: usize) -> SigmaEstimate {
    let wt = store.value(w);
    let mut st = PowerState::new(wt, store.value(sn.u));
    for k in 0..iters {
        if !st.iterate(wt.data()) {
            return degenerate(k);
        }
    }
    if iters > 0 {
        st.store(store, sn);
    }
    st.sigma(iters)
}

/// Iterates until `σ̂` changes by less than `tol` (relative) between
/// iterations, with at least `min_iters` iterations and at most 20 000.
///
/// If a single unconverged direction with eigenvalue gap `δ` remains, the
/// change per iteration is about `2δ·err` with `err ≤ δ`, so a change below
/// `tol` bounds the relative error of `σ̂²` by `√(tol/2)`.
pub fn power_iterate_converged<T: Real>(store: &mut ParamStore<T>, w: ParamId, sn: SpectralNorm, min_iters: usize, tol: f64) -> SigmaEstimate {
    let wt = store.value(w);
    let mut st = PowerState::new(wt, store.value(sn.u));
    let mut k = 0;
    let mut est = st.sigma(0);
    while k < 20_000 {
        if !st.iterate(wt.data()) {
            return degenerate(k);
        }
        k += 1;
        let next = st.sigma(k);
        let done = k >= min_iters && (next.degenerate || (next.sigma - est.sigma).abs() <= tol * next.sigma);
        est = next;
        if done {
            break;
        }
    }
    st.store(store, sn);
    est
}

/// `W / σ̂(W)` as a standalone tensor, together with the estimate. A zero
/// weight comes back unchanged with `degenerate` set.
pub fn spectral_normalize<T: Real>(store: &mut ParamStore<T>, w: ParamId, sn: SpectralNorm, iters: usize) -> (Tensor<T>, SigmaEstimate) {
    let est = power_iterate(store, w, sn, iters);
    let wt = store.value(w);
    if est.degenerate {
        return (wt.clone(), est);
    }
    let inv = T::of(1.0 / est.sigma);
    (wt.map(|v| v * inv), est)
}

/// Adds a power-iteration vector for weight `w` to the store, iterated to
/// convergence so `σ̂` is accurate before the first step.
pub fn add_spectral_norm<T: Real>(store: &mut ParamStore<T>, w: ParamId, rng: &mut Stream) -> SpectralNorm {
    let name = format!("{}.sn_u", store.get(w).name);
    let (m, _) = weight_rows(store.value(w));
    let raw = rng::normals(rng, m);
    let nrm = raw.iter().map(|x| x * x).sum::<f64>().sqrt();
    let u = Tensor::from_fn(&[m], |i| T::of(raw[i] / nrm));
    let sn = SpectralNorm { u: store.add(name, u, Update::None) };
    power_iterate_converged(store, w, sn, 1, SN_TOL);
    sn
}

/// Convolution (or transposed convolution) with optional bias and optional
/// spectral normalization of its kernel.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
    pub transposed: bool,
    pub sn: Option<SpectralNorm>,
}

#[derive(Debug, Clone, Copy)]
pub struct ConvSpec {
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub bias: bool,
    pub transposed: bool,
    pub spectral: bool,
}

impl ConvSpec {
    pub fn conv(c_in: usize, c_out: usize, k: usize, stride: usize, pad: usize) -> Self {
        ConvSpec { c_in, c_out, k, stride, pad, bias: false, transposed: false, spectral: false }
    }

    pub fn deconv(c_in: usize, c_out: usize, k: usize, stride: usize, pad: usize) -> Self {
        ConvSpec { transposed: true, ..Self::conv(c_in, c_out, k, stride, pad) }
    }

    pub fn with_bias(self) -> Self {
        ConvSpec { bias: true, ..self }
    }

    pub fn spectral(self, on: bool) -> Self {
        ConvSpec { spectral: on, ..self }
    }
}

impl Conv2d {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, spec: ConvSpec, rng: &mut Stream) -> Self {
        let shape = if spec.transposed {
            [spec.c_in, spec.c_out, spec.k, spec.k]
        } else {
            [spec.c_out, spec.c_in, spec.k, spec.k]
        };
        let w = store.add(format!("{name}.weight"), gaussian(rng, &shape, INIT_STD), Update::Adam);
        let b = spec.bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[spec.c_out]), Update::Adam));
        let sn = spec.spectral.then(|| add_spectral_norm(store, w, rng));
        Conv2d { w, b, stride: spec.stride, pad: spec.pad, transposed: spec.transposed, sn }
    }

    /// The kernel as it enters the tape: raw, or divided by `σ̂` (held
    /// constant for the step). Training passes re-converge `u` from its
    /// previous value, since optimizer steps can rotate the top singular
    /// direction faster than one iteration per step follows; evaluation
    /// uses the stored `u` as is.
    pub fn weight<T: Real>(&self, g: &mut Graph<T>, store: &mut ParamStore<T>, mode: Mode) -> Var {
        match self.sn {
            Some(sn) => {
                let est = match mode {
                    Mode::Train => power_iterate_converged(store, self.w, sn, 1, SN_TOL),
                    Mode::Eval => power_iterate(store, self.w, sn, 0),
                };
                let scale = if est.degenerate { T::one() } else { T::of(1.0 / est.sigma) };
                g.param_scaled(store, self.w, scale)
            }
            None => g.param(store, self.w),
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &mut ParamStore<T>, x: Var, mode: Mode) -> Result<Var> {
        let w = self.weight(g, store, mode);
        let b = self.b.map(|b| g.param(store, b));
        if self.transposed {
            g.deconv2d(x, w, b, self.stride, self.pad)
        } else {
            g.conv2d(x, w, b, self.stride, self.pad)
        }
    }
}

/// Batch or instance normalization with learned per-channel `γ, β`.
#[derive(Debug, Clone)]
pub struct Norm {
    pub spec: NormSpec,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: Option<ParamId>,
    pub running_var: Option<ParamId>,
}

impl Norm {
    /// `None` for kinds that add no layer (`none`, and `spectral`, which acts
    /// on the convolutions instead).
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, spec: NormSpec, channels: usize) -> Option<Self> {
        if !matches!(spec.kind, NormKind::Batch | NormKind::Instance) {
            return None;
        }
        let gamma = store.add(format!("{name}.gamma"), Tensor::full(&[channels], T::one()), Update::Adam);
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(&[channels]), Update::Adam);
        let (running_mean, running_var) = if spec.kind == NormKind::Batch {
            (
                Some(store.add(format!("{name}.running_mean"), Tensor::zeros(&[channels]), Update::None)),
                Some(store.add(format!("{name}.running_var"), Tensor::full(&[channels], T::one()), Update::None)),
            )
        } else {
            (None, None)
        };
        Some(Norm { spec, gamma, beta, running_mean, running_var })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &mut ParamStore<T>, x: Var, mode: Mode) -> Result<Var> {
        match (self.spec.kind, mode) {
            (NormKind::Instance, _) => {
                let gamma = g.param(store, self.gamma);
                let beta = g.param(store, self.beta);
                g.instance_norm(x, gamma, beta, self.spec.eps)
            }
            (NormKind::Batch, Mode::Train) => {
                let gamma = g.param(store, self.gamma);
                let beta = g.param(store, self.beta);
                let (y, mean, var) = g.batch_norm(x, gamma, beta, self.spec.eps)?;
                let (n, _, h, w) = g.value(x).dims4()?;
                let count = (n * h * w) as f64;
                let unbias = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
                let mom = T::of(self.spec.momentum);
                let (rm, rv) = (self.running_mean.expect("batch norm"), self.running_var.expect("batch norm"));
                for (r, &m) in store.get_mut(rm).value.data_mut().iter_mut().zip(&mean) {
                    *r = (T::one() - mom) * *r + mom * m;
                }
                for (r, &v) in store.get_mut(rv).value.data_mut().iter_mut().zip(&var) {
                    *r = (T::one() - mom) * *r + mom * v * T::of(unbias);
                }
                Ok(y)
            }
            (NormKind::Batch, Mode::Eval) => {
                let (rm, rv) = (self.running_mean.expect("batch norm"), self.running_var.expect("batch norm"));
                let eps = T::of(self.spec.eps);
                let gm = store.value(self.gamma).data();
                let bt = store.value(self.beta).data();
                let mean = store.value(rm).data();
                let var = store.value(rv).data();
                let scale: Vec<T> = gm.iter().zip(var).map(|(&g, &v)| g / (v + eps).sqrt()).collect();
                let shift: Vec<T> = bt.iter().zip(mean).zip(&scale).map(|((&b, &m), &s)| b - m * s).collect();
                g.channel_affine(x, &scale, &shift)
            }
            (kind, _) => bail!(Internal, "norm layer of kind {}", kind.as_str()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation {
    Relu,
    LeakyRelu(f64),
    Tanh,
    Sigmoid,
    Identity,
}

impl Activation {
    pub fn apply<T: Real>(self, g: &mut Graph<T>, x: Var) -> Var {
        match self {
            Activation::Relu => g.relu(x),
            Activation::LeakyRelu(s) => g.leaky_relu(x, s),
            Activation::Tanh => g.tanh(x),
            Activation::Sigmoid => g.sigmoid(x),
            Activation::Identity => x,
        }
    }
}

/// Name listing for diagnostics.
pub fn describe<T: Real>(store: &ParamStore<T>) -> Vec<String> {
    store.iter().map(|(_, p)| format!("{} {:?}", p.name, p.value.shape())).collect()
}

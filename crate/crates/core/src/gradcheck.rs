//! Central finite-difference checks of every backward rule, in double
//! precision.
//!
//! Each suite builds a small problem from a seed, computes the analytic
//! gradient of a random projection of its output with respect to every
//! input and trainable parameter, and compares it against
//! `(f(θ+h) − f(θ−h))/2h` on a random subset of coordinates.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::index::sample;
use rand::RngCore;

#[cfg(not(feature = "std"))]
use num_traits::Float;

use crate::error::Result;
use crate::features::{FeatureExtractor, LayerTag, DEFAULT_RIDGE};
use crate::graph::{Fault, Graph, Ridge, Var, DIFFERENTIABLE_OPS};
use crate::linalg::{Mat, SpectralFn};
use crate::losses::{self, GeneratorLoss, LossWeights};
use crate::networks::{self, Generator, GeneratorSpec, PatchDiscriminator, PatchSpec, SpdDiscriminator, SpdSpec};
use crate::nn::{Mode, NormKind, NormSpec};
use crate::params::{ParamStore, Update};
use crate::rng::{self, Stream};
use crate::spdnet::random_semi_orthogonal;
use crate::tensor::Tensor;

/// Finite-difference step.
pub const STEP: f64 = 1e-6;
/// Pass threshold on the relative error.
pub const TOLERANCE: f64 = 1e-3;
/// Coordinates sampled per checked tensor.
pub const COORDS_PER_TENSOR: usize = 16;
/// Seeds every suite runs with by default.
pub const DEFAULT_SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

/// `‖a − n‖ / max(‖a‖, ‖n‖, 1e-5)`; the floor sits above the roundoff
/// of a central difference, so tensors whose true gradient is zero pass.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    norm(&diff) / norm(analytic).max(norm(numeric)).max(1e-5)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Scope {
    Layer,
    Network,
    Loss,
}

impl Scope {
    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "layer" => Scope::Layer,
            "network" => Scope::Network,
            "loss" => Scope::Loss,
            other => crate::error::bail!(InvalidInput, "unknown gradcheck scope {other:?}"),
        })
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Scope::Layer => "layer",
            Scope::Network => "network",
            Scope::Loss => "loss",
        }
    }
}

/// Outcome of one suite on one seed.
#[derive(Debug, Clone)]
pub struct Check {
    pub max_rel_error: f64,
    /// Ops recorded on the tape.
    pub ops: Vec<&'static str>,
}

type SuiteFn = fn(&mut Stream, Option<Fault>) -> Result<Check>;

#[derive(Clone, Copy)]
pub struct Suite {
    pub name: &'static str,
    pub scope: Scope,
    run: SuiteFn,
}

impl Suite {
    pub fn run(&self, seed: u64, fault: Option<Fault>) -> Result<Check> {
        let mut r = rng::stream(rng::derive(seed, self.name));
        (self.run)(&mut r, fault)
    }
}

impl core::fmt::Debug for Suite {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.debug_struct("Suite").field("name", &self.name).field("scope", &self.scope).finish()
    }
}

#[derive(Debug, Clone)]
pub struct SuiteReport {
    pub name: &'static str,
    pub scope: Scope,
    pub seeds: usize,
    pub max_rel_error: f64,
    pub error: Option<String>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.error.is_none() && self.max_rel_error < TOLERANCE
    }
}

#[derive(Debug, Clone)]
pub struct Report {
    pub suites: Vec<SuiteReport>,
    /// Differentiable ops no suite exercised (only meaningful for a run over
    /// every scope).
    pub uncovered: Vec<&'static str>,
    /// Worst error of any suite whose tape recorded the op.
    pub per_op: Vec<(&'static str, f64)>,
}

impl Report {
    pub fn passed(&self) -> bool {
        self.suites.iter().all(SuiteReport::passed) && self.uncovered.is_empty()
    }

    pub fn max_rel_error(&self) -> f64 {
        self.suites.iter().map(|s| s.max_rel_error).fold(0.0, f64::max)
    }

    pub fn lines(&self) -> Vec<String> {
        let mut out = vec![format!("{:<28} {:<8} {:>5} {:>12}  status", "suite", "scope", "seeds", "max_rel_err")];
        for s in &self.suites {
            let status = match (&s.error, s.passed()) {
                (Some(e), _) => format!("ERROR {e}"),
                (None, true) => "ok".into(),
                (None, false) => "FAIL".into(),
            };
            out.push(format!("{:<28} {:<8} {:>5} {:>12.3e}  {}", s.name, s.scope.as_str(), s.seeds, s.max_rel_error, status));
        }
        out.push(format!("{:<28} {:>12}", "op", "max_rel_err"));
        for (op, e) in &self.per_op {
            out.push(format!("{:<28} {:>12.3e}", op, e));
        }
        if !self.uncovered.is_empty() {
            out.push(format!("uncovered ops: {}", self.uncovered.join(", ")));
        }
        out
    }
}

/// Runs every registered suite within `scope` (all when `None`) over
/// `seeds`.
pub fn run(scope: Option<Scope>, seeds: &[u64], fault: Option<Fault>) -> Report {
    let mut covered = BTreeSet::new();
    let mut per_op: BTreeMap<&'static str, f64> = BTreeMap::new();
    let mut suites = Vec::new();
    for suite in registry().into_iter().filter(|s| scope.is_none_or(|sc| sc == s.scope)) {
        let mut worst: f64 = 0.0;
        let mut error = None;
        let mut ops = BTreeSet::new();
        for &seed in seeds {
            match suite.run(seed, fault) {
                Ok(c) => {
                    worst = if c.max_rel_error.is_nan() { f64::INFINITY } else { worst.max(c.max_rel_error) };
                    ops.extend(c.ops);
                }
                Err(e) => {
                    error = Some(format!("seed {seed}: {e}"));
                    break;
                }
            }
        }
        for op in ops.iter().filter(|op| DIFFERENTIABLE_OPS.contains(op)) {
            let e = per_op.entry(op).or_insert(0.0);
            *e = e.max(if error.is_some() { f64::INFINITY } else { worst });
        }
        covered.extend(ops);
        suites.push(SuiteReport { name: suite.name, scope: suite.scope, seeds: seeds.len(), max_rel_error: worst, error });
    }
    let uncovered = if scope.is_none() {
        DIFFERENTIABLE_OPS.iter().copied().filter(|op| !covered.contains(op)).collect()
    } else {
        Vec::new()
    };
    Report { suites, uncovered, per_op: per_op.into_iter().collect() }
}

pub fn find(name: &str) -> Option<Suite> {
    registry().into_iter().find(|s| s.name == name)
}

fn randn(r: &mut Stream, shape: &[usize], scale: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| scale * rng::normal(r))
}

fn rand_in(r: &mut Stream, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng::uniform(r, lo, hi))
}

/// `Q diag(λ) Qᵀ` with random orthogonal `Q`.
fn spd_with_spectrum(r: &mut Stream, values: &[f64]) -> Mat {
    let n = values.len();
    let q = random_semi_orthogonal(n, n, r);
    q.t_matmul(&Mat::from_diag(values)).matmul(&q).symmetrized()
}

fn spd_batch(r: &mut Stream, n: usize, dim: usize, lo: f64, hi: f64) -> Tensor<f64> {
    let mats: Vec<Mat> = (0..n)
        .map(|_| {
            let vals: Vec<f64> = (0..dim).map(|_| rng::uniform(r, lo, hi)).collect();
            spd_with_spectrum(r, &vals)
        })
        .collect();
    Tensor::from_mats(&mats).expect("square")
}

/// Projects a node onto a fixed random direction so every output entry
/// contributes to the checked scalar.
fn project(g: &mut Graph<f64>, out: Var, dir: &Tensor<f64>) -> Result<Var> {
    if g.value(out).len() == 1 {
        return Ok(out);
    }
    let d = g.input(dir.clone());
    let m = g.mul(out, d)?;
    Ok(g.sum(m))
}

fn perturb(store: &mut ParamStore<f64>, id: crate::ParamId, i: usize, delta: f64) {
    let p = store.get_mut(id);
    p.value.data_mut()[i] += delta;
    if let Some(m) = &mut p.master {
        m[i] += delta;
    }
}

/// Core checker: `inputs` become gradient-carrying leaves, `store` (when
/// given) contributes its trainable parameters, and `build` produces the
/// node to differentiate.
fn check<N>(
    r: &mut Stream,
    fault: Option<Fault>,
    net: &mut N,
    store_of: fn(&mut N) -> Option<&mut ParamStore<f64>>,
    check_params: bool,
    inputs: Vec<Tensor<f64>>,
    build: impl Fn(&mut Graph<f64>, &mut N, &[Var]) -> Result<Var>,
) -> Result<Check> {
    let fresh = |fault: Option<Fault>| {
        let mut g = Graph::new();
        if let Some(f) = fault {
            g.inject_fault(f);
        }
        g
    };
    let mut g = fresh(fault);
    let vars: Vec<Var> = inputs.iter().map(|t| g.input_with_grad(t.clone())).collect();
    let out = build(&mut g, net, &vars)?;
    let dir = randn(r, g.shape(out), 1.0);
    let root = project(&mut g, out, &dir)?;
    let ops = g.op_names();
    let grads = g.backward(root)?;

    let eval = |net: &mut N, inputs: &[Tensor<f64>]| -> Result<f64> {
        let mut g = fresh(None);
        let vars: Vec<Var> = inputs.iter().map(|t| g.input_with_grad(t.clone())).collect();
        let out = build(&mut g, net, &vars)?;
        let root = project(&mut g, out, &dir)?;
        Ok(g.value(root).item())
    };

    let mut worst: f64 = 0.0;
    let mut inputs = inputs;
    for k in 0..inputs.len() {
        let analytic_full = grads.wrt(vars[k]).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; inputs[k].len()]);
        let n = inputs[k].len();
        let idx = sample(r, n, n.min(COORDS_PER_TENSOR)).into_vec();
        let (mut a, mut num) = (Vec::new(), Vec::new());
        for &i in &idx {
            let orig = inputs[k].data()[i];
            inputs[k].data_mut()[i] = orig + STEP;
            let fp = eval(net, &inputs)?;
            inputs[k].data_mut()[i] = orig - STEP;
            let fm = eval(net, &inputs)?;
            inputs[k].data_mut()[i] = orig;
            a.push(analytic_full[i]);
            num.push((fp - fm) / (2.0 * STEP));
        }
        worst = worst.max(relative_error(&a, &num));
    }

    if check_params {
        if let Some(store) = store_of(net) {
            store.zero_grad();
            grads.accumulate_into(store)?;
        }
        let ids: Vec<(crate::ParamId, usize, Vec<f64>)> = match store_of(net) {
            Some(store) => store.iter().filter(|(_, p)| p.trainable()).map(|(id, p)| (id, p.value.len(), p.grad.clone())).collect(),
            None => Vec::new(),
        };
        for (id, n, analytic_full) in ids {
            let idx = sample(r, n, n.min(COORDS_PER_TENSOR)).into_vec();
            let (mut a, mut num) = (Vec::new(), Vec::new());
            for &i in &idx {
                perturb(store_of(net).expect("store"), id, i, STEP);
                let fp = eval(net, &inputs)?;
                perturb(store_of(net).expect("store"), id, i, -2.0 * STEP);
                let fm = eval(net, &inputs)?;
                perturb(store_of(net).expect("store"), id, i, STEP);
                a.push(analytic_full[i]);
                num.push((fp - fm) / (2.0 * STEP));
            }
            worst = worst.max(relative_error(&a, &num));
        }
        if let Some(store) = store_of(net) {
            store.zero_grad();
        }
    }
    Ok(Check { max_rel_error: worst, ops })
}

fn no_store(_: &mut ()) -> Option<&mut ParamStore<f64>> {
    None
}

/// Checks a pure function of its inputs.
fn check_fn(r: &mut Stream, fault: Option<Fault>, inputs: Vec<Tensor<f64>>, build: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var>) -> Result<Check> {
    check(r, fault, &mut (), no_store, false, inputs, |g, _, v| build(g, v))
}

macro_rules! suite {
    ($name:expr, $scope:ident, $f:expr) => {
        Suite { name: $name, scope: Scope::$scope, run: $f }
    };
}

pub fn registry() -> Vec<Suite> {
    vec![
        suite!("conv2d", Layer, |r, f| {
            let ins = vec![randn(r, &[2, 3, 7, 6], 1.0), randn(r, &[4, 3, 3, 3], 0.5), randn(r, &[4], 0.5)];
            check_fn(r, f, ins, |g, v| g.conv2d(v[0], v[1], Some(v[2]), 2, 1))
        }),
        suite!("deconv2d", Layer, |r, f| {
            let ins = vec![randn(r, &[2, 3, 4, 5], 1.0), randn(r, &[3, 2, 4, 4], 0.5), randn(r, &[2], 0.5)];
            check_fn(r, f, ins, |g, v| g.deconv2d(v[0], v[1], Some(v[2]), 2, 1))
        }),
        suite!("batch_norm", Layer, |r, f| {
            let ins = vec![randn(r, &[3, 2, 3, 3], 1.0), rand_in(r, &[2], 0.5, 1.5), randn(r, &[2], 0.5)];
            check_fn(r, f, ins, |g, v| Ok(g.batch_norm(v[0], v[1], v[2], 1e-5)?.0))
        }),
        suite!("instance_norm", Layer, |r, f| {
            let ins = vec![randn(r, &[2, 3, 3, 4], 1.0), rand_in(r, &[3], 0.5, 1.5), randn(r, &[3], 0.5)];
            check_fn(r, f, ins, |g, v| g.instance_norm(v[0], v[1], v[2], 1e-5))
        }),
        suite!("affine_channel_affine", Layer, |r, f| {
            let ins = vec![randn(r, &[2, 3, 2, 2], 1.0)];
            check_fn(r, f, ins, |g, v| {
                let a = g.affine(v[0], -1.7, 0.3);
                g.channel_affine(a, &[50.0, 110.0, -3.0], &[50.0, 0.0, 1.0])
            })
        }),
        suite!("add_sub_mul", Layer, |r, f| {
            let ins = vec![randn(r, &[2, 5], 1.0), randn(r, &[2, 5], 1.0), randn(r, &[2, 5], 1.0)];
            check_fn(r, f, ins, |g, v| {
                let s = g.add(v[0], v[1])?;
                let d = g.sub(s, v[2])?;
                g.mul(d, v[0])
            })
        }),
        suite!("activations", Layer, |r, f| {
            let ins = vec![randn(r, &[3, 7], 1.0)];
            check_fn(r, f, ins, |g, v| {
                let a = g.relu(v[0]);
                let b = g.leaky_relu(v[0], 0.2);
                let c = g.tanh(v[0]);
                let d = g.sigmoid(v[0]);
                let e = g.abs(v[0]);
                let s = g.square(v[0]);
                let mut acc = g.add(a, b)?;
                for t in [c, d, e, s] {
                    acc = g.add(acc, t)?;
                }
                Ok(acc)
            })
        }),
        suite!("log", Layer, |r, f| {
            let ins = vec![rand_in(r, &[4, 3], 0.2, 3.0)];
            check_fn(r, f, ins, |g, v| Ok(g.log_clamped(v[0], 1e-12)))
        }),
        suite!("reductions", Layer, |r, f| {
            let ins = vec![randn(r, &[3, 2, 2, 2], 1.0)];
            check_fn(r, f, ins, |g, v| {
                let sm = g.sample_mean(v[0])?;
                let sq = g.square(sm);
                let s = g.sum(sq);
                let m = g.mean(v[0]);
                let m2 = g.square(m);
                g.add(s, m2)
            })
        }),
        suite!("concat", Layer, |r, f| {
            let ins = vec![randn(r, &[2, 1, 3, 3], 1.0), randn(r, &[2, 3, 3, 3], 1.0)];
            check_fn(r, f, ins, |g, v| g.concat_channels(v[0], v[1]))
        }),
        suite!("blur", Layer, |r, f| {
            // Radius 10 on a 9×8 map folds the reflection more than once.
            let k = losses::build_blur_kernel();
            let ins = vec![randn(r, &[1, 2, 9, 8], 1.0)];
            check_fn(r, f, ins, move |g, v| g.blur(v[0], &k.weights, k.radius))
        }),
        suite!("gram_fixed_ridge", Layer, |r, f| {
            let ins = vec![randn(r, &[2, 4, 3, 3], 1.0)];
            check_fn(r, f, ins, |g, v| g.gram(v[0], Ridge::Fixed(1e-3)))
        }),
        suite!("gram_relative_ridge", Layer, |r, f| {
            let ins = vec![randn(r, &[2, 5, 2, 3], 1.0)];
            check_fn(r, f, ins, |g, v| g.gram(v[0], Ridge::Relative { scale: 0.1, floor: 1e-10 }))
        }),
        suite!("bimap", Layer, |r, f| {
            let w = random_semi_orthogonal(3, 5, r);
            let ins = vec![spd_batch(r, 2, 5, 0.5, 2.0), Tensor::new(&[3, 5], w.into_vec())?];
            check_fn(r, f, ins, |g, v| g.bimap(v[0], v[1]))
        }),
        suite!("reeig", Layer, |r, f| {
            // Eigenvalues kept well away from the threshold so the clamp's
            // kink is never straddled by a finite-difference step.
            let mats: Vec<Mat> = (0..2).map(|_| spd_with_spectrum(r, &[2.1, 1.4, 0.9, 0.2, 0.05])).collect();
            let ins = vec![Tensor::from_mats(&mats)?];
            check_fn(r, f, ins, |g, v| g.spectral(v[0], SpectralFn::Rectify(0.5)))
        }),
        suite!("logeig", Layer, |r, f| {
            let ins = vec![spd_batch(r, 2, 4, 0.3, 3.0)];
            check_fn(r, f, ins, |g, v| g.spectral(v[0], SpectralFn::Log))
        }),
        suite!("frobenius_head", Layer, |r, f| {
            let s = Mat::from_vec(3, 3, rng::normals(r, 9))?.symmetrized();
            let s = Tensor::new(&[3, 3], s.into_vec())?;
            let ins = vec![randn(r, &[2, 3, 3], 1.0), s, randn(r, &[1], 1.0)];
            check_fn(r, f, ins, |g, v| g.frobenius_head(v[0], v[1], v[2]))
        }),
        suite!("spd_stack", Layer, |r, f| {
            let mut d = SpdDiscriminator::<f64>::new(SpdSpec { dims: vec![6, 4, 3, 2], reeig_eps: 1e-4 }, r.next_u64())?;
            randomize_head(&mut d, r);
            let ins = vec![spd_batch(r, 2, 6, 0.5, 2.0)];
            check(r, f, &mut d, |d| Some(&mut d.store), true, ins, |g, d, v| Ok(d.forward(g, v[0])?.score))
        }),
        suite!("generator_instance", Network, |r, f| {
            let spec = GeneratorSpec { base_width: 2, residual_blocks: 1, norm: NormSpec::new(NormKind::Instance), zero_init_residual: false };
            let mut gen = Generator::<f64>::new(spec, r.next_u64())?;
            scale_store(&mut gen.store, 10.0);
            let ins = vec![rand_in(r, &[2, 1, 8, 8], -1.0, 1.0)];
            check(r, f, &mut gen, |n| Some(&mut n.store), true, ins, |g, n, v| n.forward(g, v[0], Mode::Train))
        }),
        suite!("generator_batch", Network, |r, f| {
            let spec = GeneratorSpec { base_width: 2, residual_blocks: 1, norm: NormSpec::new(NormKind::Batch), zero_init_residual: false };
            let mut gen = Generator::<f64>::new(spec, r.next_u64())?;
            scale_store(&mut gen.store, 10.0);
            let ins = vec![rand_in(r, &[2, 1, 8, 8], -1.0, 1.0)];
            check(r, f, &mut gen, |n| Some(&mut n.store), true, ins, |g, n, v| n.forward(g, v[0], Mode::Train))
        }),
        suite!("patch_disc_instance", Network, |r, f| {
            let spec = PatchSpec { norm: NormSpec::new(NormKind::Instance), slope: 0.2 };
            let mut d = PatchDiscriminator::<f64>::new(spec, r.next_u64())?;
            scale_store(&mut d.store, 5.0);
            let ins = vec![rand_in(r, &[1, 1, 32, 32], -1.0, 1.0), rand_in(r, &[1, 3, 32, 32], -1.0, 1.0)];
            check(r, f, &mut d, |n| Some(&mut n.store), true, ins, |g, n, v| n.forward(g, v[0], v[1], Mode::Train))
        }),
        suite!("patch_disc_spectral", Network, |r, f| {
            // Input sensitivities only: σ̂ is a per-step constant, so weight
            // gradients are those of the scaled kernel by construction.
            let mut d = PatchDiscriminator::<f64>::new(PatchSpec::default(), r.next_u64())?;
            let ins = vec![rand_in(r, &[1, 1, 32, 32], -1.0, 1.0), rand_in(r, &[1, 3, 32, 32], -1.0, 1.0)];
            check(r, f, &mut d, |n| Some(&mut n.store), false, ins, |g, n, v| n.forward(g, v[0], v[1], Mode::Eval))
        }),
        suite!("spd_disc_from_features", Network, |r, f| {
            let mut d = SpdDiscriminator::<f64>::new(SpdSpec::default(), r.next_u64())?;
            randomize_head(&mut d, r);
            let ins = vec![rand_in(r, &[2, 32, 6, 6], 0.0, 1.0)];
            check(r, f, &mut d, |d| Some(&mut d.store), true, ins, |g, d, v| {
                let gram = g.gram(v[0], DEFAULT_RIDGE)?;
                Ok(d.forward(g, gram)?.score)
            })
        }),
        suite!("gan_loss_d", Loss, |r, f| {
            let ins = vec![rand_in(r, &[2, 1, 3, 3], 0.05, 0.95), rand_in(r, &[2, 1, 3, 3], 0.05, 0.95)];
            check_fn(r, f, ins, |g, v| losses::gan_loss_d(g, v[0], v[1]))
        }),
        suite!("gan_loss_g", Loss, |r, f| {
            let ins = vec![rand_in(r, &[3, 1, 2, 2], 0.05, 0.95)];
            check_fn(r, f, ins, |g, v| {
                let a = losses::gan_loss_g(g, v[0], GeneratorLoss::NonSaturating)?;
                let b = losses::gan_loss_g(g, v[0], GeneratorLoss::Literal)?;
                let b = g.affine(b, 0.5, 0.0);
                g.add(a, b)
            })
        }),
        suite!("l1_loss", Loss, |r, f| {
            let ins = vec![randn(r, &[2, 3, 3, 3], 1.0), randn(r, &[2, 3, 3, 3], 1.0)];
            check_fn(r, f, ins, |g, v| losses::l1_loss(g, v[0], v[1]))
        }),
        suite!("color_loss", Loss, |r, f| {
            let k = losses::build_blur_kernel();
            let ins = vec![randn(r, &[1, 3, 12, 12], 30.0), randn(r, &[1, 3, 12, 12], 30.0)];
            check_fn(r, f, ins, move |g, v| losses::color_loss(g, v[0], v[1], &k))
        }),
        suite!("multi_dis_full_objective", Loss, |r, f| {
            let ins = vec![rand_in(r, &[], 0.1, 2.0), rand_in(r, &[], 0.1, 2.0), rand_in(r, &[], 0.1, 2.0), rand_in(r, &[], 0.1, 2.0)];
            check_fn(r, f, ins, |g, v| {
                let w = LossWeights::default();
                let md = losses::multi_dis_loss(g, v[0], Some(v[1]), &w)?;
                losses::full_objective(g, v[2], Some(v[3]), md, &w)
            })
        }),
        suite!("spd_gan_loss", Loss, |r, f| {
            let mut d = SpdDiscriminator::<f64>::new(SpdSpec::default(), r.next_u64())?;
            randomize_head(&mut d, r);
            let mut ex = FeatureExtractor::<f64>::surrogate(7);
            let real = rand_in(r, &[2, 3, 24, 24], -1.0, 1.0);
            let real_gram = {
                let mut g = Graph::new();
                let x = g.input(real);
                let fm = ex.extract(&mut g, x, LayerTag::Stage3)?;
                let gm = g.gram(fm, DEFAULT_RIDGE)?;
                g.value(gm).clone()
            };
            let ins = vec![rand_in(r, &[2, 3, 24, 24], -1.0, 1.0)];
            let mut pair = (d, ex);
            check(r, f, &mut pair, |p| Some(&mut p.0.store), true, ins, move |g, p, v| {
                let fm = p.1.extract(g, v[0], LayerTag::Stage3)?;
                let fake = g.gram(fm, DEFAULT_RIDGE)?;
                let real = g.input(real_gram.clone());
                let (dl, gl) = losses::spd_gan_loss(g, &p.0, real, fake, GeneratorLoss::NonSaturating)?;
                let dl = g.affine(dl, 0.3, 0.0);
                g.add(dl, gl)
            })
        }),
        suite!("objective_through_generator", Loss, |r, f| {
            let spec = GeneratorSpec { base_width: 2, residual_blocks: 1, norm: NormSpec::new(NormKind::Instance), zero_init_residual: false };
            let seed = r.next_u64();
            let mut gen = Generator::<f64>::new(spec, seed)?;
            scale_store(&mut gen.store, 10.0);
            let pd = PatchDiscriminator::<f64>::new(PatchSpec { norm: NormSpec::new(NormKind::Instance), slope: 0.2 }, seed)?;
            let ins = vec![rand_in(r, &[1, 1, 32, 32], -1.0, 1.0), rand_in(r, &[1, 3, 32, 32], -1.0, 1.0)];
            let kernel = losses::build_blur_kernel();
            let mut nets = (gen, pd);
            check(r, f, &mut nets, |n| Some(&mut n.0.store), true, ins, move |g, n, v| {
                g.freeze(networks::PATCH_DISC_TAG);
                let out = n.0.forward(g, v[0], Mode::Train)?;
                let scores = n.1.forward(g, v[0], out, Mode::Train)?;
                let adv = losses::gan_loss_g(g, scores, GeneratorLoss::NonSaturating)?;
                let l1 = losses::l1_loss(g, v[1], out)?;
                let lab_fake = networks::decode_lab(g, out)?;
                let lab_real = networks::decode_lab(g, v[1])?;
                let color = losses::color_loss(g, lab_real, lab_fake, &kernel)?;
                let w = LossWeights { lambda_i: 0.3, ..LossWeights::default() };
                let md = losses::multi_dis_loss(g, adv, None, &w)?;
                losses::full_objective(g, l1, Some(color), md, &w)
            })
        }),
    ]
}

/// Random symmetric head so gradients through LogEig are non-trivial.
fn randomize_head(d: &mut SpdDiscriminator<f64>, r: &mut Stream) {
    let k = d.stack.output_dim();
    let s = Mat::from_vec(k, k, rng::normals(r, k * k)).expect("sized").symmetrized();
    d.store.get_mut(d.s).value.data_mut().copy_from_slice(s.as_slice());
    d.store.get_mut(d.b).value.data_mut()[0] = 0.1 * rng::normal(r);
}

/// Scales every Adam weight; the default 0.02 initialization leaves tiny
/// networks nearly constant, which makes the check uninformative.
fn scale_store(store: &mut ParamStore<f64>, factor: f64) {
    for p in store.iter_mut().filter(|p| p.update == Update::Adam && p.name.ends_with(".weight")) {
        p.value.data_mut().iter_mut().for_each(|v| *v *= factor);
    }
}

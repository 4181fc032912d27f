//! Reverse-mode differentiation tape.
//!
//! A [`Graph`] records every op eagerly: the value is computed when the node
//! is created and whatever the backward pass needs is stored on the node.
//! Nodes only ever refer to earlier nodes, so walking the tape backwards is a
//! valid reverse topological order.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{bail, Error, Result};
use crate::linalg::{spectral_backward, sym_eig, EigPair, Mat, SpectralFn};
use crate::nn::kernels::{self, ConvGeom, NormCache};
use crate::params::{ParamId, ParamStore, StoreTag};
use crate::scalar::Real;
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ridge added to Gram matrices so they are strictly positive definite.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Ridge {
    Fixed(f64),
    /// `max(scale · tr(G)/C, floor)`
    Relative { scale: f64, floor: f64 },
}

#[derive(Debug, Clone)]
enum Op<T> {
    Input,
    Param { tag: StoreTag, id: ParamId },
    Conv { x: Var, w: Var, b: Option<Var>, geom: ConvGeom, c_out: usize },
    Deconv { x: Var, w: Var, b: Option<Var>, geom: ConvGeom, c_in: usize },
    BatchNorm { x: Var, gamma: Var, beta: Var, cache: NormCache<T> },
    InstanceNorm { x: Var, gamma: Var, beta: Var, cache: NormCache<T> },
    /// `a·x + b` with constants.
    Affine { x: Var, a: T },
    ChannelAffine { x: Var, scale: Vec<T> },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Relu { x: Var },
    LeakyRelu { x: Var, slope: T },
    Tanh { x: Var },
    Sigmoid { x: Var },
    Abs { x: Var },
    Square { x: Var },
    /// `ln(max(x, floor))`
    Log { x: Var, floor: T },
    Sum { x: Var },
    Mean { x: Var },
    /// Mean over every axis but the first.
    SampleMean { x: Var },
    Concat { a: Var, b: Var },
    Blur { x: Var, kernel: Vec<T>, radius: usize },
    Gram { x: Var, ridge: Ridge },
    BiMap { x: Var, w: Var, weight: Mat },
    Spectral { x: Var, f: SpectralFn, eigs: Vec<EigPair> },
    FrobHead { x: Var, s: Var, b: Var },
}

impl<T> Op<T> {
    fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Input | Param { .. } => vec![],
            Conv { x, w, b, .. } | Deconv { x, w, b, .. } => {
                let mut v = vec![*x, *w];
                v.extend(b.iter().copied());
                v
            }
            BatchNorm { x, gamma, beta, .. } | InstanceNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Add { a, b } | Sub { a, b } | Mul { a, b } | Concat { a, b } => vec![*a, *b],
            BiMap { x, w, .. } => vec![*x, *w],
            FrobHead { x, s, b } => vec![*x, *s, *b],
            Affine { x, .. }
            | ChannelAffine { x, .. }
            | Relu { x }
            | LeakyRelu { x, .. }
            | Tanh { x }
            | Sigmoid { x }
            | Abs { x }
            | Square { x }
            | Log { x, .. }
            | Sum { x }
            | Mean { x }
            | SampleMean { x }
            | Blur { x, .. }
            | Gram { x, .. }
            | Spectral { x, .. } => vec![*x],
        }
    }

    fn name(&self) -> &'static str {
        use Op::*;
        match self {
            Input => "input",
            Param { .. } => "param",
            Conv { .. } => "conv2d",
            Deconv { .. } => "deconv2d",
            BatchNorm { .. } => "batch_norm",
            InstanceNorm { .. } => "instance_norm",
            Affine { .. } => "affine",
            ChannelAffine { .. } => "channel_affine",
            Add { .. } => "add",
            Sub { .. } => "sub",
            Mul { .. } => "mul",
            Relu { .. } => "relu",
            LeakyRelu { .. } => "leaky_relu",
            Tanh { .. } => "tanh",
            Sigmoid { .. } => "sigmoid",
            Abs { .. } => "abs",
            Square { .. } => "square",
            Log { .. } => "log",
            Sum { .. } => "sum",
            Mean { .. } => "mean",
            SampleMean { .. } => "sample_mean",
            Concat { .. } => "concat",
            Blur { .. } => "blur",
            Gram { .. } => "gram",
            BiMap { .. } => "bimap",
            Spectral { f: SpectralFn::Log, .. } => "logeig",
            Spectral { f: SpectralFn::Rectify(_), .. } => "reeig",
            Spectral { .. } => "spectral_fn",
            FrobHead { .. } => "frobenius_head",
        }
    }
}

#[derive(Debug, Clone)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

#[derive(Debug, Clone, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    frozen: Vec<StoreTag>,
    fault: Option<Fault>,
}

/// Deliberate backward-pass defects, used to confirm that the gradient
/// checker actually catches broken derivatives.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    /// Drops the `Ḡᵀ W X` term of the BiMap weight gradient.
    BiMapWeightGrad,
}

/// Result of [`Graph::backward`]: one optional gradient per node.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    params: Vec<(StoreTag, ParamId, usize)>,
}

impl<T: Real> Gradients<T> {
    pub fn wrt(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adds every parameter gradient that belongs to `store` into its
    /// accumulators. Returns how many parameters received a gradient.
    pub fn accumulate_into(&self, store: &mut ParamStore<T>) -> Result<usize> {
        let mut touched = 0;
        for &(tag, id, node) in &self.params {
            if tag != store.tag() {
                continue;
            }
            if let Some(g) = &self.grads[node] {
                store.accumulate(id, g)?;
                touched += 1;
            }
        }
        Ok(touched)
    }
}

fn axpy<T: Real>(dst: &mut [T], src: &[T], a: T) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += a * s;
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), frozen: Vec::new(), fault: None }
    }

    /// Parameters of `tag` are read as constants from now on: no gradient
    /// is computed for them.
    pub fn freeze(&mut self, tag: StoreTag) {
        if !self.frozen.contains(&tag) {
            self.frozen.push(tag);
        }
    }

    pub fn inject_fault(&mut self, fault: Fault) {
        self.fault = Some(fault);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Names of the ops recorded so far, in tape order.
    pub fn op_names(&self) -> Vec<&'static str> {
        self.nodes.iter().map(|n| n.op.name()).collect()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        let requires_grad = op.inputs().iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn ensure_finite(&self, v: &Tensor<T>, what: &str) -> Result<()> {
        if !v.all_finite() {
            bail!(InvalidInput, "{what}: non-finite values");
        }
        Ok(())
    }

    /// Constant leaf.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node { value, op: Op::Input, requires_grad: false });
        Var(self.nodes.len() - 1)
    }

    /// Leaf whose gradient is wanted (for gradient checks and input
    /// sensitivities).
    pub fn input_with_grad(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node { value, op: Op::Input, requires_grad: true });
        Var(self.nodes.len() - 1)
    }

    /// Reads a parameter into the tape.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let p = store.get(id);
        let requires_grad = p.trainable() && !self.frozen.contains(&store.tag());
        self.nodes.push(Node { value: p.value.clone(), op: Op::Param { tag: store.tag(), id }, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Reads a parameter scaled by a constant (spectral normalization uses
    /// this with `1/σ`, treating σ as constant for the step).
    pub fn param_scaled(&mut self, store: &ParamStore<T>, id: ParamId, scale: T) -> Var {
        let p = self.param(store, id);
        if scale == T::one() {
            p
        } else {
            self.affine(p, scale, T::zero())
        }
    }

    /// Cross-correlation; `w` is `C_out × C_in × k × k`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (n, c, h, wd) = self.value(x).dims4()?;
        let (c_out, c_in, k, k2) = self.value(w).dims4()?;
        if c_in != c || k != k2 {
            bail!(Dimension, "conv2d: input has {} channels, kernel {:?}", c, self.shape(w));
        }
        if let Some(b) = b {
            if self.value(b).len() != c_out {
                bail!(Dimension, "conv2d: bias has {} entries for {} outputs", self.value(b).len(), c_out);
            }
        }
        let Some(geom) = ConvGeom::new(c, h, wd, k, stride, pad) else {
            bail!(Dimension, "conv2d: kernel {k} stride {stride} pad {pad} leaves no output for {h}×{wd}");
        };
        let out = kernels::conv_forward(
            self.value(x).data(),
            n,
            &geom,
            self.value(w).data(),
            c_out,
            b.map(|b| self.value(b).data()),
        );
        let value = Tensor::new(&[n, c_out, geom.h_out, geom.w_out], out)?;
        Ok(self.push(value, Op::Conv { x, w, b, geom, c_out }))
    }

    /// Transposed convolution, the adjoint of [`Graph::conv2d`] with the same
    /// kernel; `w` is `C_in × C_out × k × k` where `C_in` matches `x`.
    pub fn deconv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (n, c, h, wd) = self.value(x).dims4()?;
        let (c_in, c_out, k, k2) = self.value(w).dims4()?;
        if c_in != c || k != k2 || stride == 0 {
            bail!(Dimension, "deconv2d: input has {} channels, kernel {:?}", c, self.shape(w));
        }
        let (Some(ho), Some(wo)) = (kernels::deconv_out(h, k, stride, pad), kernels::deconv_out(wd, k, stride, pad)) else {
            bail!(Dimension, "deconv2d: kernel {k} stride {stride} pad {pad} leaves no output for {h}×{wd}");
        };
        // Geometry of the conv this op is the adjoint of: output space → input space.
        let geom = ConvGeom::new(c_out, ho, wo, k, stride, pad).filter(|g| g.h_out == h && g.w_out == wd);
        let Some(geom) = geom else {
            bail!(Internal, "deconv2d geometry does not invert");
        };
        let (kr, kc) = (geom.col_rows(), geom.col_cols());
        let wv = self.value(w).data();
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); n * c_out * ho * wo];
        let mut cols = vec![T::zero(); kr * kc];
        for s in 0..n {
            // cols = Wᵀ · x[s]
            T::gemm(kr, c_in, kc, T::one(), wv, (1, kr as isize), &xv[s * c_in * kc..(s + 1) * c_in * kc], (kc as isize, 1), T::zero(), &mut cols, (kc as isize, 1));
            kernels::col2im(&cols, &geom, &mut out[s * c_out * ho * wo..(s + 1) * c_out * ho * wo]);
        }
        if let Some(b) = b {
            let bv = self.value(b).data();
            if bv.len() != c_out {
                bail!(Dimension, "deconv2d: bias has {} entries for {} outputs", bv.len(), c_out);
            }
            for s in 0..n {
                for (co, &bias) in bv.iter().enumerate() {
                    let base = (s * c_out + co) * ho * wo;
                    out[base..base + ho * wo].iter_mut().for_each(|v| *v += bias);
                }
            }
        }
        let value = Tensor::new(&[n, c_out, ho, wo], out)?;
        Ok(self.push(value, Op::Deconv { x, w, b, geom, c_in }))
    }

    fn norm_args(&self, x: Var, gamma: Var, beta: Var) -> Result<(usize, usize, usize, usize)> {
        let dims = self.value(x).dims4()?;
        if self.value(gamma).len() != dims.1 || self.value(beta).len() != dims.1 {
            bail!(Dimension, "normalization affine parameters do not match {} channels", dims.1);
        }
        Ok(dims)
    }

    /// Training-mode batch normalization; returns the node and the batch
    /// mean/variance (biased) per channel for running statistics.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, Vec<T>, Vec<T>)> {
        let dims = self.norm_args(x, gamma, beta)?;
        if dims.0 < 2 {
            bail!(Config, "batch normalization in training mode needs at least 2 samples, got {}", dims.0);
        }
        let (out, cache) = kernels::batch_norm_forward(self.value(x).data(), dims, self.value(gamma).data(), self.value(beta).data(), T::of(eps));
        let (mean, var) = (cache.mean.clone(), cache.var.clone());
        let value = Tensor::new(self.shape(x), out)?;
        Ok((self.push(value, Op::BatchNorm { x, gamma, beta, cache }), mean, var))
    }

    pub fn instance_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let dims = self.norm_args(x, gamma, beta)?;
        if dims.2 * dims.3 < 2 {
            bail!(Config, "instance normalization needs at least 2 spatial positions, got {}×{}", dims.2, dims.3);
        }
        let (out, cache) = kernels::instance_norm_forward(self.value(x).data(), dims, self.value(gamma).data(), self.value(beta).data(), T::of(eps));
        let value = Tensor::new(self.shape(x), out)?;
        Ok(self.push(value, Op::InstanceNorm { x, gamma, beta, cache }))
    }

    /// `a·x + b` elementwise with constant `a`, `b`.
    pub fn affine(&mut self, x: Var, a: T, b: T) -> Var {
        let value = self.value(x).map(|v| a * v + b);
        self.push(value, Op::Affine { x, a })
    }

    /// `scale[c]·x + shift[c]` per channel of a rank-4 tensor, constants.
    pub fn channel_affine(&mut self, x: Var, scale: &[T], shift: &[T]) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if scale.len() != c || shift.len() != c {
            bail!(Dimension, "channel_affine: {} channels, {} scales, {} shifts", c, scale.len(), shift.len());
        }
        let mut value = self.value(x).clone();
        let hw = h * w;
        for (i, v) in value.data_mut().iter_mut().enumerate() {
            let ch = (i / hw) % c;
            *v = scale[ch] * *v + shift[ch];
        }
        let _ = n;
        Ok(self.push(value, Op::ChannelAffine { x, scale: scale.to_vec() }))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            bail!(Dimension, "{what}: shapes {:?} and {:?}", self.shape(a), self.shape(b));
        }
        Ok(())
    }

    fn zip(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let av = self.value(a);
        let data = av.data().iter().zip(self.value(b).data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(av.shape(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let v = self.zip(a, b, |x, y| x + y);
        Ok(self.push(v, Op::Add { a, b }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let v = self.zip(a, b, |x, y| x - y);
        Ok(self.push(v, Op::Sub { a, b }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let v = self.zip(a, b, |x, y| x * y);
        Ok(self.push(v, Op::Mul { a, b }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|t| if t > T::zero() { t } else { T::zero() });
        self.push(v, Op::Relu { x })
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let s = T::of(slope);
        let v = self.value(x).map(|t| if t > T::zero() { t } else { s * t });
        self.push(v, Op::LeakyRelu { x, slope: s })
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|t| t.tanh());
        self.push(v, Op::Tanh { x })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.value(x).map(sigmoid);
        self.push(v, Op::Sigmoid { x })
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|t| t.abs());
        self.push(v, Op::Abs { x })
    }

    pub fn square(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|t| t * t);
        self.push(v, Op::Square { x })
    }

    /// `ln(max(x, floor))`; the gradient is zero where the floor is active.
    pub fn log_clamped(&mut self, x: Var, floor: f64) -> Var {
        let fl = T::of(floor);
        let v = self.value(x).map(|t| t.max(fl).ln());
        self.push(v, Op::Log { x, floor: fl })
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum { x })
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.data().iter().copied().sum::<T>() / T::of(v.len() as f64);
        self.push(Tensor::scalar(s), Op::Mean { x })
    }

    /// Per-sample mean: `N × …` to `N`.
    pub fn sample_mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let n = match v.shape().first() {
            Some(&n) if n > 0 => n,
            _ => bail!(Dimension, "sample_mean of shape {:?}", v.shape()),
        };
        let m = v.len() / n;
        let out = v.data().chunks(m).map(|c| c.iter().copied().sum::<T>() / T::of(m as f64)).collect();
        let value = Tensor::new(&[n], out)?;
        Ok(self.push(value, Op::SampleMean { x }))
    }

    /// Channel concatenation of two rank-4 tensors.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (na, ca, ha, wa) = self.value(a).dims4()?;
        let (nb, cb, hb, wb) = self.value(b).dims4()?;
        if (na, ha, wa) != (nb, hb, wb) {
            bail!(Dimension, "concat: {:?} and {:?}", self.shape(a), self.shape(b));
        }
        let hw = ha * wa;
        let mut data = Vec::with_capacity(na * (ca + cb) * hw);
        for s in 0..na {
            data.extend_from_slice(&self.value(a).data()[s * ca * hw..(s + 1) * ca * hw]);
            data.extend_from_slice(&self.value(b).data()[s * cb * hw..(s + 1) * cb * hw]);
        }
        let value = Tensor::new(&[na, ca + cb, ha, wa], data)?;
        Ok(self.push(value, Op::Concat { a, b }))
    }

    /// Depthwise blur with a square kernel of side `2·radius + 1`, reflect
    /// padded so the output keeps the input's size.
    pub fn blur(&mut self, x: Var, kernel: &[T], radius: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if kernel.len() != (2 * radius + 1).pow(2) {
            bail!(Dimension, "blur kernel has {} taps for radius {}", kernel.len(), radius);
        }
        let out = kernels::blur_forward(self.value(x).data(), n * c, h, w, kernel, radius);
        let value = Tensor::new(self.shape(x), out)?;
        Ok(self.push(value, Op::Blur { x, kernel: kernel.to_vec(), radius }))
    }

    /// Per-sample Gram matrix `F Fᵀ/(H·W) + δI` of an `N × C × H × W` map,
    /// giving `N × C × C`.
    pub fn gram(&mut self, x: Var, ridge: Ridge) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let hw = h * w;
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); n * c * c];
        for s in 0..n {
            let f = &xv[s * c * hw..(s + 1) * c * hw];
            let g = &mut out[s * c * c..(s + 1) * c * c];
            T::gemm(c, hw, c, T::of(1.0 / hw as f64), f, (hw as isize, 1), f, (1, hw as isize), T::zero(), g, (c as isize, 1));
            let trace: f64 = (0..c).map(|i| g[i * c + i].f64()).sum();
            let (delta, _) = ridge_for(ridge, trace, c);
            for i in 0..c {
                g[i * c + i] += T::of(delta);
            }
        }
        let value = Tensor::new(&[n, c, c], out)?;
        Ok(self.push(value, Op::Gram { x, ridge }))
    }

    /// `W X Wᵀ` per sample; `x` is `N × d_in × d_in`, `w` is `d_out × d_in`.
    pub fn bimap(&mut self, x: Var, w: Var) -> Result<Var> {
        let ws = self.value(w).shape();
        if ws.len() != 2 {
            bail!(Dimension, "bimap: weight of shape {:?}", ws);
        }
        let wm = to_mat(self.value(w));
        self.bimap_with_weight(x, w, wm)
    }

    /// [`Graph::bimap`] evaluated with an explicit double-precision copy of
    /// the weight `w` holds.
    pub fn bimap_with_weight(&mut self, x: Var, w: Var, weight: Mat) -> Result<Var> {
        let (n, d_in) = self.value(x).dims_mats()?;
        let ws = self.value(w).shape();
        if ws.len() != 2 || ws[0] != weight.rows() || ws[1] != weight.cols() || ws[1] != d_in {
            bail!(Dimension, "bimap: weight {:?} against {}×{} input", ws, d_in, d_in);
        }
        let mut outs = Vec::with_capacity(n);
        for s in 0..n {
            let xm = self.value(x).mat(s);
            outs.push(weight.matmul(&xm).matmul_t(&weight).symmetrized());
        }
        let value = Tensor::from_mats(&outs)?;
        Ok(self.push(value, Op::BiMap { x, w, weight }))
    }

    /// `U f(Λ) Uᵀ` per sample, computed in double precision from the
    /// symmetric part of each matrix.
    pub fn spectral(&mut self, x: Var, f: SpectralFn) -> Result<Var> {
        let (n, _) = self.value(x).dims_mats()?;
        let mut outs = Vec::with_capacity(n);
        let mut eigs = Vec::with_capacity(n);
        for s in 0..n {
            let e = sym_eig(&self.value(x).mat(s))?;
            if f == SpectralFn::Log {
                if let Some(&min) = e.values.last() {
                    if min <= 0.0 {
                        bail!(Domain, "LogEig on a matrix with eigenvalue {:e}; a ReEig layer must precede it", min);
                    }
                }
            }
            outs.push(e.compose(|l| f.apply(l)));
            eigs.push(e);
        }
        let value = Tensor::from_mats(&outs)?;
        Ok(self.push(value, Op::Spectral { x, f, eigs }))
    }

    /// `⟨S, X_n⟩_F + b` per sample, giving a length-`N` vector.
    pub fn frobenius_head(&mut self, x: Var, s: Var, b: Var) -> Result<Var> {
        let (n, d) = self.value(x).dims_mats()?;
        if self.value(s).len() != d * d || self.value(b).len() != 1 {
            bail!(Dimension, "frobenius head: S {:?}, b {:?} for {}×{} inputs", self.shape(s), self.shape(b), d, d);
        }
        let sv = self.value(s).data();
        let bias = self.value(b).data()[0];
        let xv = self.value(x).data();
        let out: Vec<T> = (0..n)
            .map(|i| xv[i * d * d..(i + 1) * d * d].iter().zip(sv).map(|(&a, &b)| a * b).sum::<T>() + bias)
            .collect();
        let value = Tensor::new(&[n], out)?;
        Ok(self.push(value, Op::FrobHead { x, s, b }))
    }

    /// Backpropagates from the scalar `root` (seed gradient 1).
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        if self.value(root).len() != 1 {
            bail!(InvalidInput, "backward needs a scalar root, got shape {:?}", self.shape(root));
        }
        self.backward_with(root, Tensor::scalar(T::one()))
    }

    /// Backpropagates a given seed gradient from `root`.
    pub fn backward_with(&self, root: Var, seed: Tensor<T>) -> Result<Gradients<T>> {
        if seed.shape() != self.shape(root) {
            bail!(Dimension, "seed gradient {:?} for node of shape {:?}", seed.shape(), self.shape(root));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(seed.into_data());
        let mut params = Vec::new();
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if let Op::Param { tag, id } = node.op {
                if node.requires_grad {
                    params.push((tag, id, idx));
                }
                continue;
            }
            if !node.requires_grad {
                continue;
            }
            let Some(gout) = grads[idx].take() else { continue };
            for i in node.op.inputs() {
                if i.0 >= idx {
                    return Err(Error::Internal(format!("node {idx} ({}) reads later node {}: tape has a cycle", node.op.name(), i.0)));
                }
            }
            self.backward_node(idx, &gout, &mut grads)?;
            grads[idx] = Some(gout);
        }
        params.reverse();
        Ok(Gradients { grads, params })
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<T>>], v: Var) -> Option<&'g mut Vec<T>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let len = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); len]))
    }

    fn backward_node(&self, idx: usize, g: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        let node = &self.nodes[idx];
        let out = node.value.data();
        match &node.op {
            Op::Input | Op::Param { .. } => {}
            Op::Conv { x, w, b, geom, c_out } => {
                let n = self.shape(*x)[0];
                let mut dx = self.slot(grads, *x).map(core::mem::take);
                let mut dw = self.slot(grads, *w).map(core::mem::take);
                let mut db = b.and_then(|b| self.slot(grads, b)).map(core::mem::take);
                kernels::conv_backward(
                    self.value(*x).data(),
                    n,
                    geom,
                    self.value(*w).data(),
                    *c_out,
                    g,
                    dx.as_deref_mut(),
                    dw.as_deref_mut(),
                    db.as_deref_mut(),
                );
                restore(grads, *x, dx);
                restore(grads, *w, dw);
                if let Some(b) = b {
                    restore(grads, *b, db);
                }
            }
            Op::Deconv { x, w, b, geom, c_in } => {
                // deconv(x) = col2im(Wᵀ x); with y-space geometry `geom`:
                // dx = W · im2col(dy), dW += x · im2col(dy)ᵀ.
                let n = self.shape(*x)[0];
                let (kr, kc) = (geom.col_rows(), geom.col_cols());
                let y_len = geom.c_in * geom.h * geom.w;
                let wv = self.value(*w).data();
                let xv = self.value(*x).data();
                let mut cols = vec![T::zero(); kr * kc];
                let mut dx = self.slot(grads, *x).map(core::mem::take);
                let mut dw = self.slot(grads, *w).map(core::mem::take);
                for s in 0..n {
                    kernels::im2col(&g[s * y_len..(s + 1) * y_len], geom, &mut cols);
                    if let Some(dx) = dx.as_deref_mut() {
                        T::gemm(*c_in, kr, kc, T::one(), wv, (kr as isize, 1), &cols, (kc as isize, 1), T::one(), &mut dx[s * c_in * kc..(s + 1) * c_in * kc], (kc as isize, 1));
                    }
                    if let Some(dw) = dw.as_deref_mut() {
                        T::gemm(*c_in, kc, kr, T::one(), &xv[s * c_in * kc..(s + 1) * c_in * kc], (kc as isize, 1), &cols, (1, kc as isize), T::one(), dw, (kr as isize, 1));
                    }
                }
                restore(grads, *x, dx);
                restore(grads, *w, dw);
                if let Some(b) = b {
                    if let Some(db) = self.slot(grads, *b) {
                        let hw = geom.h * geom.w;
                        for s in 0..n {
                            for (co, d) in db.iter_mut().enumerate() {
                                let base = (s * geom.c_in + co) * hw;
                                *d += g[base..base + hw].iter().copied().sum::<T>();
                            }
                        }
                    }
                }
            }
            Op::BatchNorm { x, gamma, beta, cache } | Op::InstanceNorm { x, gamma, beta, cache } => {
                let dims = self.value(*x).dims4()?;
                let gv = self.value(*gamma).data().to_vec();
                let mut dx = self.slot(grads, *x).map(core::mem::take);
                let mut dg = self.slot(grads, *gamma).map(core::mem::take);
                let mut dbeta = self.slot(grads, *beta).map(core::mem::take);
                if matches!(node.op, Op::BatchNorm { .. }) {
                    kernels::batch_norm_backward(g, dims, &gv, cache, dx.as_deref_mut(), dg.as_deref_mut(), dbeta.as_deref_mut());
                } else {
                    kernels::instance_norm_backward(g, dims, &gv, cache, dx.as_deref_mut(), dg.as_deref_mut(), dbeta.as_deref_mut());
                }
                restore(grads, *x, dx);
                restore(grads, *gamma, dg);
                restore(grads, *beta, dbeta);
            }
            Op::Affine { x, a } => {
                if let Some(d) = self.slot(grads, *x) {
                    axpy(d, g, *a);
                }
            }
            Op::ChannelAffine { x, scale } => {
                let (_, c, h, w) = self.value(*x).dims4()?;
                let hw = h * w;
                if let Some(d) = self.slot(grads, *x) {
                    for (i, (dv, &gv)) in d.iter_mut().zip(g).enumerate() {
                        *dv += scale[(i / hw) % c] * gv;
                    }
                }
            }
            Op::Add { a, b } => {
                if let Some(d) = self.slot(grads, *a) {
                    axpy(d, g, T::one());
                }
                if let Some(d) = self.slot(grads, *b) {
                    axpy(d, g, T::one());
                }
            }
            Op::Sub { a, b } => {
                if let Some(d) = self.slot(grads, *a) {
                    axpy(d, g, T::one());
                }
                if let Some(d) = self.slot(grads, *b) {
                    axpy(d, g, -T::one());
                }
            }
            Op::Mul { a, b } => {
                let (av, bv) = (self.value(*a).data().to_vec(), self.value(*b).data().to_vec());
                if let Some(d) = self.slot(grads, *a) {
                    for i in 0..d.len() {
                        d[i] += g[i] * bv[i];
                    }
                }
                if let Some(d) = self.slot(grads, *b) {
                    for i in 0..d.len() {
                        d[i] += g[i] * av[i];
                    }
                }
            }
            Op::Relu { x } => self.unary(grads, *x, g, |xv, _| if xv > T::zero() { T::one() } else { T::zero() }),
            Op::LeakyRelu { x, slope } => {
                let s = *slope;
                self.unary(grads, *x, g, |xv, _| if xv > T::zero() { T::one() } else { s })
            }
            Op::Tanh { x } => self.unary_out(grads, *x, g, out, |y| T::one() - y * y),
            Op::Sigmoid { x } => self.unary_out(grads, *x, g, out, |y| y * (T::one() - y)),
            Op::Abs { x } => self.unary(grads, *x, g, |xv, _| {
                if xv > T::zero() {
                    T::one()
                } else if xv < T::zero() {
                    -T::one()
                } else {
                    T::zero()
                }
            }),
            Op::Square { x } => self.unary(grads, *x, g, |xv, _| T::of(2.0) * xv),
            Op::Log { x, floor } => {
                let fl = *floor;
                self.unary(grads, *x, g, |xv, _| if xv > fl { T::one() / xv } else { T::zero() })
            }
            Op::Sum { x } => {
                if let Some(d) = self.slot(grads, *x) {
                    d.iter_mut().for_each(|v| *v += g[0]);
                }
            }
            Op::Mean { x } => {
                if let Some(d) = self.slot(grads, *x) {
                    let k = g[0] / T::of(d.len() as f64);
                    d.iter_mut().for_each(|v| *v += k);
                }
            }
            Op::SampleMean { x } => {
                if let Some(d) = self.slot(grads, *x) {
                    let m = d.len() / g.len();
                    let inv = T::of(1.0 / m as f64);
                    for (chunk, &gs) in d.chunks_mut(m).zip(g) {
                        chunk.iter_mut().for_each(|v| *v += gs * inv);
                    }
                }
            }
            Op::Concat { a, b } => {
                let (n, ca, h, w) = self.value(*a).dims4()?;
                let cb = self.shape(*b)[1];
                let hw = h * w;
                if let Some(d) = self.slot(grads, *a) {
                    for s in 0..n {
                        axpy(&mut d[s * ca * hw..(s + 1) * ca * hw], &g[s * (ca + cb) * hw..(s * (ca + cb) + ca) * hw], T::one());
                    }
                }
                if let Some(d) = self.slot(grads, *b) {
                    for s in 0..n {
                        axpy(&mut d[s * cb * hw..(s + 1) * cb * hw], &g[(s * (ca + cb) + ca) * hw..(s + 1) * (ca + cb) * hw], T::one());
                    }
                }
            }
            Op::Blur { x, kernel, radius } => {
                let (n, c, h, w) = self.value(*x).dims4()?;
                if let Some(d) = self.slot(grads, *x) {
                    kernels::blur_backward(g, n * c, h, w, kernel, *radius, d);
                }
            }
            Op::Gram { x, ridge } => {
                let (n, c, h, w) = self.value(*x).dims4()?;
                let hw = h * w;
                let xv = self.value(*x).data().to_vec();
                if let Some(d) = self.slot(grads, *x) {
                    for s in 0..n {
                        let mut gs = g[s * c * c..(s + 1) * c * c].to_vec();
                        let f = &xv[s * c * hw..(s + 1) * c * hw];
                        let raw_trace = f.iter().map(|v| v.f64() * v.f64()).sum::<f64>() / hw as f64;
                        if let (_, Some(k)) = ridge_for(*ridge, raw_trace, c) {
                            let tg: T = (0..c).map(|i| gs[i * c + i]).sum();
                            for i in 0..c {
                                gs[i * c + i] += T::of(k) * tg;
                            }
                        }
                        // d/dF of F Fᵀ/hw is (Ḡ + Ḡᵀ) F / hw
                        let sym: Vec<T> = (0..c * c).map(|ij| gs[ij] + gs[(ij % c) * c + ij / c]).collect();
                        T::gemm(c, c, hw, T::of(1.0 / hw as f64), &sym, (c as isize, 1), &xv[s * c * hw..(s + 1) * c * hw], (hw as isize, 1), T::one(), &mut d[s * c * hw..(s + 1) * c * hw], (hw as isize, 1));
                    }
                }
            }
            Op::BiMap { x, w, weight } => {
                let (n, d_in) = self.value(*x).dims_mats()?;
                let wm = weight;
                let d_out = wm.rows();
                let mut dw_acc = Mat::zeros(d_out, d_in);
                let mut dx_parts = Vec::with_capacity(n);
                for s in 0..n {
                    // The forward output is symmetrized, so only the symmetric
                    // part of the incoming gradient reaches W and X.
                    let gm = Mat::from_vec(d_out, d_out, g[s * d_out * d_out..(s + 1) * d_out * d_out].iter().map(|v| v.f64()).collect())?.symmetrized();
                    let xm = self.value(*x).mat(s);
                    let (dx, mut dw) = crate::spdnet::bimap_backward(&xm, wm, &gm);
                    if self.fault == Some(Fault::BiMapWeightGrad) {
                        dw = gm.matmul(wm).matmul_t(&xm);
                    }
                    dw_acc = dw_acc.add(&dw);
                    dx_parts.push(dx);
                }
                if let Some(d) = self.slot(grads, *x) {
                    for (s, m) in dx_parts.iter().enumerate() {
                        for (dv, &mv) in d[s * d_in * d_in..(s + 1) * d_in * d_in].iter_mut().zip(m.as_slice()) {
                            *dv += T::of(mv);
                        }
                    }
                }
                if let Some(d) = self.slot(grads, *w) {
                    for (dv, &mv) in d.iter_mut().zip(dw_acc.as_slice()) {
                        *dv += T::of(mv);
                    }
                }
            }
            Op::Spectral { x, f, eigs } => {
                let (_, dim) = self.value(*x).dims_mats()?;
                if eigs.is_empty() {
                    bail!(Internal, "spectral layer has no cached decomposition");
                }
                if let Some(d) = self.slot(grads, *x) {
                    for (s, e) in eigs.iter().enumerate() {
                        let gm = Mat::from_vec(dim, dim, g[s * dim * dim..(s + 1) * dim * dim].iter().map(|v| v.f64()).collect())?;
                        let dx = spectral_backward(e, *f, &gm);
                        for (dv, &mv) in d[s * dim * dim..(s + 1) * dim * dim].iter_mut().zip(dx.as_slice()) {
                            *dv += T::of(mv);
                        }
                    }
                }
            }
            Op::FrobHead { x, s, b } => {
                let (n, d) = self.value(*x).dims_mats()?;
                let xv = self.value(*x).data().to_vec();
                let sv = self.value(*s).data().to_vec();
                if let Some(dx) = self.slot(grads, *x) {
                    for i in 0..n {
                        axpy(&mut dx[i * d * d..(i + 1) * d * d], &sv, g[i]);
                    }
                }
                if let Some(ds) = self.slot(grads, *s) {
                    for i in 0..n {
                        axpy(ds, &xv[i * d * d..(i + 1) * d * d], g[i]);
                    }
                }
                if let Some(db) = self.slot(grads, *b) {
                    db[0] += g.iter().copied().sum::<T>();
                }
            }
        }
        Ok(())
    }

    fn unary(&self, grads: &mut [Option<Vec<T>>], x: Var, g: &[T], df: impl Fn(T, T) -> T) {
        let xv = self.value(x).data().to_vec();
        if let Some(d) = self.slot(grads, x) {
            for i in 0..d.len() {
                d[i] += g[i] * df(xv[i], g[i]);
            }
        }
    }

    fn unary_out(&self, grads: &mut [Option<Vec<T>>], x: Var, g: &[T], out: &[T], df: impl Fn(T) -> T) {
        if let Some(d) = self.slot(grads, x) {
            for i in 0..d.len() {
                d[i] += g[i] * df(out[i]);
            }
        }
    }

    /// Records nothing; checks a tensor for non-finite values.
    pub fn check_finite(&self, v: Var, what: &str) -> Result<()> {
        self.ensure_finite(self.value(v), what)
    }
}

fn restore<T>(grads: &mut [Option<Vec<T>>], v: Var, g: Option<Vec<T>>) {
    if let Some(g) = g {
        grads[v.0] = Some(g);
    }
}

fn to_mat<T: Real>(t: &Tensor<T>) -> Mat {
    let s = t.shape();
    Mat::from_vec(s[0], s[1], t.data().iter().map(|v| v.f64()).collect()).expect("rank-2 weight")
}

/// Names of every op with a backward rule, as reported by
/// [`Graph::op_names`].
pub const DIFFERENTIABLE_OPS: &[&str] = &[
    "conv2d",
    "deconv2d",
    "batch_norm",
    "instance_norm",
    "affine",
    "channel_affine",
    "add",
    "sub",
    "mul",
    "relu",
    "leaky_relu",
    "tanh",
    "sigmoid",
    "abs",
    "square",
    "log",
    "sum",
    "mean",
    "sample_mean",
    "concat",
    "blur",
    "gram",
    "bimap",
    "reeig",
    "logeig",
    "frobenius_head",
];

/// Ridge value for a Gram matrix with un-ridged trace `trace`, and the
/// coefficient `∂δ/∂tr` when the ridge depends on the trace.
pub fn ridge_for(ridge: Ridge, trace: f64, c: usize) -> (f64, Option<f64>) {
    match ridge {
        Ridge::Fixed(d) => (d, None),
        Ridge::Relative { scale, floor } => {
            let r = scale * trace / c as f64;
            if r >= floor {
                (r, Some(scale / c as f64))
            } else {
                (floor, None)
            }
        }
    }
}

pub fn sigmoid<T: Real>(t: T) -> T {
    if t >= T::zero() {
        T::one() / (T::one() + (-t).exp())
    } else {
        let e = t.exp();
        e / (T::one() + e)
    }
}

//! The generator, the patch discriminator and the SPD discriminator.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{bail, Result};
use crate::graph::{Graph, Var};
use crate::nn::{Conv2d, ConvSpec, Mode, Norm, NormKind, NormSpec};
use crate::params::{ParamId, ParamStore, StoreTag, Update};
use crate::rng::{self, Stream};
use crate::scalar::Real;
use crate::spdnet::{SpdNetStack, StackTrace, REEIG_EPS};
use crate::tensor::Tensor;

pub const GENERATOR_TAG: StoreTag = 1;
pub const PATCH_DISC_TAG: StoreTag = 2;
pub const SPD_DISC_TAG: StoreTag = 3;

/// Channel decode of the generator's tanh output to L*a*b*.
pub const LAB_SCALE: [f64; 3] = [50.0, 110.0, 110.0];
pub const LAB_SHIFT: [f64; 3] = [50.0, 0.0, 0.0];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeneratorSpec {
    pub base_width: usize,
    pub residual_blocks: usize,
    pub norm: NormSpec,
    /// Start every residual branch at zero so each block is the identity.
    pub zero_init_residual: bool,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        GeneratorSpec { base_width: 32, residual_blocks: 9, norm: NormSpec::new(NormKind::Instance), zero_init_residual: false }
    }
}

#[derive(Debug, Clone)]
struct Block {
    conv: Conv2d,
    norm: Option<Norm>,
}

impl Block {
    fn new<T: Real>(store: &mut ParamStore<T>, name: &str, spec: ConvSpec, norm: NormSpec, rng: &mut Stream) -> Self {
        let conv = Conv2d::new(store, &format!("{name}.conv"), spec, rng);
        let norm = Norm::new(store, &format!("{name}.norm"), norm, spec.c_out);
        Block { conv, norm }
    }

    fn forward<T: Real>(&self, g: &mut Graph<T>, store: &mut ParamStore<T>, x: Var, mode: Mode, relu: bool) -> Result<Var> {
        let mut y = self.conv.forward(g, store, x, mode)?;
        if let Some(n) = &self.norm {
            y = n.forward(g, store, y, mode)?;
        }
        Ok(if relu { g.relu(y) } else { y })
    }
}

#[derive(Debug, Clone)]
struct ResBlock {
    a: Block,
    b: Block,
}

/// Encoder (two stride-2 conv blocks), residual trunk, decoder (two stride-2
/// transposed-conv blocks) and a 1×1 conv + tanh head with 3 outputs.
#[derive(Debug, Clone)]
pub struct Generator<T> {
    pub spec: GeneratorSpec,
    pub store: ParamStore<T>,
    enc: [Block; 2],
    res: Vec<ResBlock>,
    dec: [Block; 2],
    head: Conv2d,
}

impl<T: Real> Generator<T> {
    pub fn new(spec: GeneratorSpec, seed: u64) -> Result<Self> {
        spec.norm.validate()?;
        if spec.norm.kind == NormKind::Spectral {
            bail!(Config, "spectral normalization is reserved for discriminators");
        }
        if spec.base_width == 0 {
            bail!(Config, "generator width must be positive");
        }
        let mut store = ParamStore::new(GENERATOR_TAG);
        let mut r = rng::stream(rng::derive(seed, "generator"));
        let (w1, w2) = (spec.base_width, 2 * spec.base_width);
        let n = spec.norm;
        let enc = [
            Block::new(&mut store, "gen.enc1", ConvSpec::conv(1, w1, 3, 2, 1), n, &mut r),
            Block::new(&mut store, "gen.enc2", ConvSpec::conv(w1, w2, 3, 2, 1), n, &mut r),
        ];
        let mut res = Vec::with_capacity(spec.residual_blocks);
        for i in 0..spec.residual_blocks {
            let a = Block::new(&mut store, &format!("gen.res{i}.a"), ConvSpec::conv(w2, w2, 3, 1, 1), n, &mut r);
            let b = Block::new(&mut store, &format!("gen.res{i}.b"), ConvSpec::conv(w2, w2, 3, 1, 1), n, &mut r);
            if spec.zero_init_residual {
                store.get_mut(b.conv.w).value.data_mut().iter_mut().for_each(|v| *v = T::zero());
            }
            res.push(ResBlock { a, b });
        }
        let dec = [
            Block::new(&mut store, "gen.dec1", ConvSpec::deconv(w2, w1, 4, 2, 1), n, &mut r),
            Block::new(&mut store, "gen.dec2", ConvSpec::deconv(w1, w1, 4, 2, 1), n, &mut r),
        ];
        let head = Conv2d::new(&mut store, "gen.head", ConvSpec::conv(w1, 3, 1, 1, 0).with_bias(), &mut r);
        Ok(Generator { spec, store, enc, res, dec, head })
    }

    /// Gray `N×1×H×W` (tanh-coded lightness) to `N×3×H×W` in `(−1, 1)`.
    pub fn forward(&mut self, g: &mut Graph<T>, x: Var, mode: Mode) -> Result<Var> {
        let (_, c, h, w) = g.value(x).dims4()?;
        if c != 1 {
            bail!(Dimension, "generator expects a single gray channel, got {c}");
        }
        if h % 4 != 0 || w % 4 != 0 || h == 0 || w == 0 {
            bail!(Config, "image size {h}×{w} is not divisible by 4");
        }
        let st = &mut self.store;
        let mut y = x;
        for b in &self.enc {
            y = b.forward(g, st, y, mode, true)?;
        }
        for rb in &self.res {
            let t = rb.a.forward(g, st, y, mode, true)?;
            let t = rb.b.forward(g, st, t, mode, false)?;
            y = g.add(y, t)?;
        }
        for b in &self.dec {
            y = b.forward(g, st, y, mode, true)?;
        }
        let y = self.head.forward(g, st, y, mode)?;
        Ok(g.tanh(y))
    }

    /// Convenience forward outside a training graph.
    pub fn run(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let v = g.input(x.clone());
        let y = self.forward(&mut g, v, mode)?;
        Ok(g.value(y).clone())
    }
}

/// Tanh-coded output to L*a*b* on the tape.
pub fn decode_lab<T: Real>(g: &mut Graph<T>, t: Var) -> Result<Var> {
    let scale: Vec<T> = LAB_SCALE.iter().map(|&v| T::of(v)).collect();
    let shift: Vec<T> = LAB_SHIFT.iter().map(|&v| T::of(v)).collect();
    g.channel_affine(t, &scale, &shift)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PatchSpec {
    pub norm: NormSpec,
    pub slope: f64,
}

impl Default for PatchSpec {
    fn default() -> Self {
        PatchSpec { norm: NormSpec::new(NormKind::Spectral), slope: 0.2 }
    }
}

/// Kernel 4, strides (2,2,2,1,1), channels (64,128,256,512,1), padding 1.
pub const PATCH_SCHEDULE: [(usize, usize); 5] = [(64, 2), (128, 2), (256, 2), (512, 1), (1, 1)];
pub const PATCH_KERNEL: usize = 4;

/// Side of the score map for a square input of side `size`.
pub fn patch_map_side(size: usize) -> Option<usize> {
    let mut s = size;
    for &(_, stride) in &PATCH_SCHEDULE {
        let span = (s + 2).checked_sub(PATCH_KERNEL)?;
        s = span / stride + 1;
    }
    Some(s)
}

/// Five-layer patch discriminator over gray ‖ color (4 channels).
#[derive(Debug, Clone)]
pub struct PatchDiscriminator<T> {
    pub spec: PatchSpec,
    pub store: ParamStore<T>,
    pub layers: Vec<Conv2d>,
    norms: Vec<Option<Norm>>,
}

impl<T: Real> PatchDiscriminator<T> {
    pub fn new(spec: PatchSpec, seed: u64) -> Result<Self> {
        spec.norm.validate()?;
        let mut store = ParamStore::new(PATCH_DISC_TAG);
        let mut r = rng::stream(rng::derive(seed, "patch-discriminator"));
        let spectral = spec.norm.kind == NormKind::Spectral;
        let mut layers = Vec::new();
        let mut norms = Vec::new();
        let mut c_in = 4;
        for (i, &(c_out, stride)) in PATCH_SCHEDULE.iter().enumerate() {
            let name = format!("patch.layer{}", i + 1);
            let cs = ConvSpec::conv(c_in, c_out, PATCH_KERNEL, stride, 1).with_bias().spectral(spectral);
            layers.push(Conv2d::new(&mut store, &name, cs, &mut r));
            let inner = (1..=3).contains(&i);
            norms.push(if inner { Norm::new(&mut store, &format!("{name}.norm"), spec.norm, c_out) } else { None });
            c_in = c_out;
        }
        Ok(PatchDiscriminator { spec, store, layers, norms })
    }

    /// Sigmoid scores `N×1×h×w` for a gray condition and a color candidate.
    pub fn forward(&mut self, g: &mut Graph<T>, gray: Var, color: Var, mode: Mode) -> Result<Var> {
        let x = g.concat_channels(gray, color)?;
        let (_, c, _, _) = g.value(x).dims4()?;
        if c != 4 {
            bail!(Dimension, "patch discriminator expects gray + 3-channel color, got {c} channels");
        }
        let mut y = x;
        let last = self.layers.len() - 1;
        for (i, conv) in self.layers.iter().enumerate() {
            y = conv.forward(g, &mut self.store, y, mode)?;
            if let Some(n) = &self.norms[i] {
                y = n.forward(g, &mut self.store, y, mode)?;
            }
            y = if i == last { g.sigmoid(y) } else { g.leaky_relu(y, self.spec.slope) };
        }
        Ok(y)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpdSpec {
    /// Matrix size entering each bloc and the final size.
    pub dims: Vec<usize>,
    pub reeig_eps: f64,
}

impl Default for SpdSpec {
    fn default() -> Self {
        SpdSpec { dims: vec![32, 16, 8, 4], reeig_eps: REEIG_EPS }
    }
}

impl SpdSpec {
    /// The default dimension chain truncated to `blocs` blocs.
    pub fn with_blocs(blocs: usize) -> Self {
        let mut s = SpdSpec::default();
        s.dims.truncate(blocs + 1);
        s
    }
}

/// SPD stack, LogEig and `sigmoid(⟨S, ·⟩_F + b)`.
#[derive(Debug, Clone)]
pub struct SpdDiscriminator<T> {
    pub spec: SpdSpec,
    pub store: ParamStore<T>,
    pub stack: SpdNetStack,
    pub s: ParamId,
    pub b: ParamId,
}

/// Output of one SPD discriminator evaluation.
#[derive(Debug, Clone)]
pub struct SpdScore {
    pub score: Var,
    pub trace: StackTrace,
}

impl<T: Real> SpdDiscriminator<T> {
    pub fn new(spec: SpdSpec, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new(SPD_DISC_TAG);
        let mut r = rng::stream(rng::derive(seed, "spd-discriminator"));
        let stack = SpdNetStack::new(&mut store, "spd", &spec.dims, spec.reeig_eps, &mut r)?;
        let d = stack.output_dim();
        let s = store.add("spd.head.s", Tensor::zeros(&[d, d]), Update::Adam);
        let b = store.add("spd.head.b", Tensor::zeros(&[1]), Update::Adam);
        Ok(SpdDiscriminator { spec, store, stack, s, b })
    }

    pub fn input_dim(&self) -> usize {
        self.stack.input_dim()
    }

    /// Scores `N` for a batch of Gram matrices `N×C×C`.
    pub fn forward(&self, g: &mut Graph<T>, gram: Var) -> Result<SpdScore> {
        let trace = self.stack.forward(g, &self.store, gram)?;
        let s = g.param(&self.store, self.s);
        let b = g.param(&self.store, self.b);
        let z = g.frobenius_head(trace.logeig, s, b)?;
        Ok(SpdScore { score: g.sigmoid(z), trace })
    }

    /// Keeps `S` symmetric after an optimizer step.
    pub fn symmetrize_head(&mut self) {
        let d = self.stack.output_dim();
        let v = self.store.get_mut(self.s).value.data_mut();
        for i in 0..d {
            for j in i + 1..d {
                let m = (v[i * d + j] + v[j * d + i]) * T::of(0.5);
                v[i * d + j] = m;
                v[j * d + i] = m;
            }
        }
    }

    /// Adam on the head, Stiefel steps on the BiMap weights.
    pub fn step(&mut self, adam: &crate::params::AdamConfig) -> Result<Vec<alloc::string::String>> {
        self.stack.stiefel_update(&mut self.store, adam.lr)?;
        let skipped = self.store.adam_step_all(adam);
        self.symmetrize_head();
        Ok(skipped)
    }
}

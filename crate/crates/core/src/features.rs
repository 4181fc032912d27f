//! Frozen feature extractor and Gram descriptors for the SPD discriminator.

use alloc::format;
use alloc::vec::Vec;

#[cfg(not(feature = "std"))]
use num_traits::Float;

use crate::error::{bail, Result};
use crate::graph::{ridge_for, Graph, Ridge, Var};
use crate::linalg::{Mat, SpdMatrix, SymMatrix};
use crate::nn::{Conv2d, ConvSpec, Mode};
use crate::params::{ParamStore, StoreTag};
use crate::rng;
use crate::scalar::Real;
use crate::tensor::Tensor;

pub const EXTRACTOR_TAG: StoreTag = 4;

/// Ridge used unless configured otherwise: `1e-5·tr(G)/C`, never below
/// `1e-10`.
pub const DEFAULT_RIDGE: Ridge = Ridge::Relative { scale: 1e-5, floor: 1e-10 };

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LayerTag {
    Stage1,
    Stage2,
    #[default]
    Stage3,
}

impl LayerTag {
    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s.trim().to_ascii_lowercase().as_str() {
            "stage1" | "stage-1" | "1" => LayerTag::Stage1,
            "stage2" | "stage-2" | "2" => LayerTag::Stage2,
            "stage3" | "stage-3" | "3" => LayerTag::Stage3,
            other => bail!(InvalidInput, "unknown feature layer tag {other:?}"),
        })
    }

    pub fn as_str(self) -> &'static str {
        match self {
            LayerTag::Stage1 => "stage1",
            LayerTag::Stage2 => "stage2",
            LayerTag::Stage3 => "stage3",
        }
    }

    pub fn depth(self) -> usize {
        match self {
            LayerTag::Stage1 => 1,
            LayerTag::Stage2 => 2,
            LayerTag::Stage3 => 3,
        }
    }

    pub fn channels(self) -> usize {
        STAGE_CHANNELS[self.depth() - 1]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ExtractorKind {
    #[default]
    Surrogate,
    /// Feature maps precomputed elsewhere and read from files.
    Imported,
}

impl ExtractorKind {
    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s.trim().to_ascii_lowercase().as_str() {
            "surrogate" => ExtractorKind::Surrogate,
            "imported" => ExtractorKind::Imported,
            other => bail!(Config, "unknown extractor kind {other:?}"),
        })
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ExtractorKind::Surrogate => "surrogate",
            ExtractorKind::Imported => "imported",
        }
    }
}

const STAGE_CHANNELS: [usize; 3] = [8, 16, 32];

/// Three bias-free `conv3×3 → relu` stages (8, 16, 32 channels; the second
/// and third downsample by 2). Weights are drawn once from the seed and
/// never trained.
#[derive(Debug, Clone)]
pub struct FeatureExtractor<T> {
    pub kind: ExtractorKind,
    pub seed: u64,
    pub store: ParamStore<T>,
    stages: Vec<Conv2d>,
}

impl<T: Real> FeatureExtractor<T> {
    pub fn surrogate(seed: u64) -> Self {
        let mut store = ParamStore::new(EXTRACTOR_TAG);
        let mut r = rng::stream(rng::derive(seed, "extractor"));
        let mut stages = Vec::new();
        let mut c_in = 3;
        for (i, &c_out) in STAGE_CHANNELS.iter().enumerate() {
            let stride = if i == 0 { 1 } else { 2 };
            let conv = Conv2d::new(&mut store, &format!("extractor.stage{}", i + 1), ConvSpec::conv(c_in, c_out, 3, stride, 1), &mut r);
            // He scaling keeps activations O(1) through the relu stack.
            let std = (2.0 / (c_in * 9) as f64).sqrt();
            let w = store.get_mut(conv.w);
            for v in w.value.data_mut() {
                *v = T::of(std * rng::normal(&mut r));
            }
            w.update = crate::params::Update::None;
            stages.push(conv);
            c_in = c_out;
        }
        FeatureExtractor { kind: ExtractorKind::Surrogate, seed, store, stages }
    }

    /// An extractor whose features are supplied from files; [`extract`]
    /// refuses to run on it.
    ///
    /// [`extract`]: FeatureExtractor::extract
    pub fn imported() -> Self {
        FeatureExtractor { kind: ExtractorKind::Imported, seed: 0, store: ParamStore::new(EXTRACTOR_TAG), stages: Vec::new() }
    }

    /// Feature map at `tag` for a 1- or 3-channel image batch (gray input is
    /// replicated to three channels).
    pub fn extract(&mut self, g: &mut Graph<T>, x: Var, tag: LayerTag) -> Result<Var> {
        if self.kind == ExtractorKind::Imported {
            bail!(Config, "imported features are read from feature-map files, not computed");
        }
        g.freeze(EXTRACTOR_TAG);
        let (_, c, _, _) = g.value(x).dims4()?;
        let mut cur = match c {
            3 => x,
            1 => {
                let two = g.concat_channels(x, x)?;
                g.concat_channels(two, x)?
            }
            _ => bail!(Dimension, "feature extraction expects 1 or 3 channels, got {c}"),
        };
        for conv in &self.stages[..tag.depth()] {
            cur = conv.forward(g, &mut self.store, cur, Mode::Eval)?;
            cur = g.relu(cur);
        }
        Ok(cur)
    }

    /// Convenience wrapper evaluating outside any training graph.
    pub fn features(&mut self, x: &Tensor<T>, tag: LayerTag) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let v = g.input(x.clone());
        let f = self.extract(&mut g, v, tag)?;
        Ok(g.value(f).clone())
    }
}

/// Gram matrices of a feature batch on the tape.
pub fn gram<T: Real>(g: &mut Graph<T>, features: Var, ridge: Ridge) -> Result<Var> {
    g.gram(features, ridge)
}

/// A single Gram matrix with its provenance.
#[derive(Debug, Clone)]
pub struct GramDescriptor {
    pub matrix: SpdMatrix,
    pub tag: LayerTag,
    /// Spatial divisor `H·W`.
    pub divisor: usize,
    pub ridge: f64,
}

impl GramDescriptor {
    /// `M Mᵀ/(H·W) + δI` for one `C × H × W` feature map, in double
    /// precision.
    pub fn from_features<T: Real>(features: &Tensor<T>, tag: LayerTag, ridge: Ridge) -> Result<Self> {
        let (c, hw) = match features.shape() {
            [c, h, w] => (*c, h * w),
            [1, c, h, w] => (*c, h * w),
            s => bail!(Dimension, "gram expects one C×H×W feature map, got {:?}", s),
        };
        if hw == 0 || c == 0 {
            bail!(Dimension, "gram of an empty feature map");
        }
        let m = Mat::from_vec(c, hw, features.data().iter().map(|v| v.f64()).collect())?;
        let mut g = m.matmul_t(&m).scale(1.0 / hw as f64).symmetrized();
        let (delta, _) = ridge_for(ridge, g.trace(), c);
        for i in 0..c {
            g.as_mut_slice()[i * c + i] += delta;
        }
        let matrix = SpdMatrix::new(SymMatrix::new(g)?)?;
        Ok(GramDescriptor { matrix, tag, divisor: hw, ridge: delta })
    }

    pub fn dim(&self) -> usize {
        self.matrix.dim()
    }
}

//! Training configuration as a flat `key = value` text file.
//!
//! Lines starting with `#` are comments. Unknown keys are rejected so typos
//! cannot silently fall back to defaults.

use std::fmt::Write as _;
use std::path::Path;

use spdgan_core::features::{ExtractorKind, LayerTag, DEFAULT_RIDGE};
use spdgan_core::graph::Ridge;
use spdgan_core::losses::{GeneratorLoss, LossWeights};
use spdgan_core::nn::NormKind;

use crate::error::{Error, Result};

/// Which network is updated at each position of a training step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    DiscImage,
    DiscSpd,
    Generator,
}

impl Phase {
    fn parse(s: &str) -> Result<Self> {
        Ok(match s.trim() {
            "d_image" => Phase::DiscImage,
            "d_spd" => Phase::DiscSpd,
            "g" => Phase::Generator,
            other => return Err(Error::config(format!("unknown update phase {other:?}"))),
        })
    }

    fn as_str(self) -> &'static str {
        match self {
            Phase::DiscImage => "d_image",
            Phase::DiscSpd => "d_spd",
            Phase::Generator => "g",
        }
    }
}

/// Color space in which PSNR/SSIM are measured.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MetricSpace {
    Rgb,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub run_id: String,
    pub seed: u64,
    /// `synthetic`, or a directory of PNG images.
    pub dataset: String,
    pub image_size: usize,
    pub train_images: usize,
    pub heldout_images: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub alpha_g: f64,
    pub alpha_d_image: f64,
    pub alpha_d_spd: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub weights: LossWeights,
    pub generator_loss: GeneratorLoss,
    pub gen_norm: NormKind,
    pub disc_norm: NormKind,
    pub norm_eps: f64,
    pub leaky_slope: f64,
    pub gen_width: usize,
    pub residual_blocks: usize,
    pub spd_dims: Vec<usize>,
    pub reeig_eps: f64,
    pub enable_spd_disc: bool,
    pub enable_color_loss: bool,
    pub extractor_kind: ExtractorKind,
    pub layer_tag: LayerTag,
    pub ridge: Ridge,
    pub blur_normalize: bool,
    pub update_order: Vec<Phase>,
    pub metric_space: MetricSpace,
    /// Write a checkpoint every this many epochs (0: only at the end).
    pub checkpoint_every: usize,
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            run_id: "run".into(),
            seed: 42,
            dataset: "synthetic".into(),
            image_size: 64,
            train_images: 200,
            heldout_images: 20,
            epochs: 200,
            batch_size: 4,
            alpha_g: 3e-4,
            alpha_d_image: 3e-5,
            alpha_d_spd: 1e-2,
            adam_beta1: 0.5,
            adam_beta2: 0.999,
            weights: LossWeights::default(),
            generator_loss: GeneratorLoss::NonSaturating,
            gen_norm: NormKind::Instance,
            disc_norm: NormKind::Spectral,
            norm_eps: 1e-5,
            leaky_slope: 0.2,
            gen_width: 32,
            residual_blocks: 9,
            spd_dims: vec![32, 16, 8, 4],
            reeig_eps: 1e-4,
            enable_spd_disc: true,
            enable_color_loss: true,
            extractor_kind: ExtractorKind::Surrogate,
            layer_tag: LayerTag::Stage3,
            ridge: DEFAULT_RIDGE,
            blur_normalize: false,
            update_order: vec![Phase::DiscImage, Phase::DiscSpd, Phase::Generator],
            metric_space: MetricSpace::Rgb,
            checkpoint_every: 0,
            eval_every: 0,
        }
    }
}

fn parse_num<F: std::str::FromStr>(key: &str, v: &str) -> Result<F> {
    v.parse().map_err(|_| Error::config(format!("{key}: cannot parse {v:?}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::config(format!("{key}: expected true/false, got {v:?}"))),
    }
}

fn parse_ridge(v: &str) -> Result<Ridge> {
    let bad = || Error::config(format!("gram.ridge: expected `fixed:<d>` or `relative:<scale>:<floor>`, got {v:?}"));
    let parts: Vec<&str> = v.split(':').collect();
    match parts.as_slice() {
        ["fixed", d] => Ok(Ridge::Fixed(d.parse().map_err(|_| bad())?)),
        ["relative", s, f] => Ok(Ridge::Relative { scale: s.parse().map_err(|_| bad())?, floor: f.parse().map_err(|_| bad())? }),
        _ => Err(bad()),
    }
}

fn ridge_str(r: Ridge) -> String {
    match r {
        Ridge::Fixed(d) => format!("fixed:{d:e}"),
        Ridge::Relative { scale, floor } => format!("relative:{scale:e}:{floor:e}"),
    }
}

impl TrainConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "run_id" => self.run_id = v.to_string(),
            "seed" => self.seed = parse_num(key, v)?,
            "dataset" => self.dataset = v.to_string(),
            "image_size" => self.image_size = parse_num(key, v)?,
            "train_images" => self.train_images = parse_num(key, v)?,
            "heldout_images" => self.heldout_images = parse_num(key, v)?,
            "epochs" => self.epochs = parse_num(key, v)?,
            "batch_size" => self.batch_size = parse_num(key, v)?,
            "alpha_g" => self.alpha_g = parse_num(key, v)?,
            "alpha_d_image" => self.alpha_d_image = parse_num(key, v)?,
            "alpha_d_spd" => self.alpha_d_spd = parse_num(key, v)?,
            "adam_beta1" => self.adam_beta1 = parse_num(key, v)?,
            "adam_beta2" => self.adam_beta2 = parse_num(key, v)?,
            "lambda_i" => self.weights.lambda_i = parse_num(key, v)?,
            "lambda_spd" => self.weights.lambda_spd = parse_num(key, v)?,
            "lambda_l1" => self.weights.lambda_l1 = parse_num(key, v)?,
            "lambda_color" => self.weights.lambda_color = parse_num(key, v)?,
            "generator_loss" => {
                self.generator_loss = match v {
                    "non_saturating" => GeneratorLoss::NonSaturating,
                    "literal" => GeneratorLoss::Literal,
                    _ => return Err(Error::config(format!("generator_loss: unknown form {v:?}"))),
                }
            }
            "gen_norm" => self.gen_norm = NormKind::parse(v)?,
            "disc_norm" => self.disc_norm = NormKind::parse(v)?,
            "norm_eps" => self.norm_eps = parse_num(key, v)?,
            "leaky_slope" => self.leaky_slope = parse_num(key, v)?,
            "gen_width" => self.gen_width = parse_num(key, v)?,
            "residual_blocks" => self.residual_blocks = parse_num(key, v)?,
            "spd_dims" => {
                self.spd_dims = v.split(',').map(|d| parse_num(key, d.trim())).collect::<Result<_>>()?;
            }
            "reeig_eps" => self.reeig_eps = parse_num(key, v)?,
            "enable_spd_disc" => self.enable_spd_disc = parse_bool(key, v)?,
            "enable_color_loss" => self.enable_color_loss = parse_bool(key, v)?,
            "extractor.kind" => self.extractor_kind = ExtractorKind::parse(v)?,
            "extractor.layer_tag" => self.layer_tag = LayerTag::parse(v)?,
            "gram.ridge" => self.ridge = parse_ridge(v)?,
            "blur.normalize" => self.blur_normalize = parse_bool(key, v)?,
            "update_order" => self.update_order = v.split(',').map(Phase::parse).collect::<Result<_>>()?,
            "metric_space" => {
                if v != "rgb" {
                    return Err(Error::config(format!("metric_space: only `rgb` is supported, got {v:?}")));
                }
                self.metric_space = MetricSpace::Rgb;
            }
            "checkpoint_every" => self.checkpoint_every = parse_num(key, v)?,
            "eval_every" => self.eval_every = parse_num(key, v)?,
            other => return Err(Error::config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::config(format!("line {}: expected `key = value`", n + 1)));
            };
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Every key with its current value; parsing the result gives back an
    /// identical config.
    pub fn to_text(&self) -> String {
        let w = &self.weights;
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("run_id", self.run_id.clone());
        kv("seed", self.seed.to_string());
        kv("dataset", self.dataset.clone());
        kv("image_size", self.image_size.to_string());
        kv("train_images", self.train_images.to_string());
        kv("heldout_images", self.heldout_images.to_string());
        kv("epochs", self.epochs.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("alpha_g", format!("{:e}", self.alpha_g));
        kv("alpha_d_image", format!("{:e}", self.alpha_d_image));
        kv("alpha_d_spd", format!("{:e}", self.alpha_d_spd));
        kv("adam_beta1", self.adam_beta1.to_string());
        kv("adam_beta2", self.adam_beta2.to_string());
        kv("lambda_i", w.lambda_i.to_string());
        kv("lambda_spd", w.lambda_spd.to_string());
        kv("lambda_l1", w.lambda_l1.to_string());
        kv("lambda_color", w.lambda_color.to_string());
        kv(
            "generator_loss",
            match self.generator_loss {
                GeneratorLoss::NonSaturating => "non_saturating",
                GeneratorLoss::Literal => "literal",
            }
            .into(),
        );
        kv("gen_norm", self.gen_norm.as_str().into());
        kv("disc_norm", self.disc_norm.as_str().into());
        kv("norm_eps", format!("{:e}", self.norm_eps));
        kv("leaky_slope", self.leaky_slope.to_string());
        kv("gen_width", self.gen_width.to_string());
        kv("residual_blocks", self.residual_blocks.to_string());
        kv("spd_dims", self.spd_dims.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(","));
        kv("reeig_eps", format!("{:e}", self.reeig_eps));
        kv("enable_spd_disc", self.enable_spd_disc.to_string());
        kv("enable_color_loss", self.enable_color_loss.to_string());
        kv("extractor.kind", self.extractor_kind.as_str().into());
        kv("extractor.layer_tag", self.layer_tag.as_str().into());
        kv("gram.ridge", ridge_str(self.ridge));
        kv("blur.normalize", self.blur_normalize.to_string());
        kv("update_order", self.update_order.iter().map(|p| p.as_str()).collect::<Vec<_>>().join(","));
        kv("metric_space", "rgb".into());
        kv("checkpoint_every", self.checkpoint_every.to_string());
        kv("eval_every", self.eval_every.to_string());
        s
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::config(m));
        for (k, v) in [("alpha_g", self.alpha_g), ("alpha_d_image", self.alpha_d_image), ("alpha_d_spd", self.alpha_d_spd)] {
            if !(v > 0.0) || !v.is_finite() {
                return bad(format!("{k} must be positive, got {v}"));
            }
        }
        self.weights.validate()?;
        if self.gen_norm == NormKind::Spectral {
            return bad("spectral normalization is only available for the discriminators".into());
        }
        let uses_batch_stats = self.gen_norm == NormKind::Batch || self.disc_norm == NormKind::Batch;
        if self.batch_size == 0 || (uses_batch_stats && self.batch_size < 2) {
            return bad(format!("batch_size {} is too small for the configured normalization", self.batch_size));
        }
        if self.image_size % 4 != 0 || spdgan_core::networks::patch_map_side(self.image_size).is_none() {
            return bad(format!("image_size {} must be divisible by 4 and large enough for the patch discriminator", self.image_size));
        }
        if self.train_images == 0 {
            return bad("train_images must be positive".into());
        }
        if !(1..=3).contains(&(self.spd_dims.len().saturating_sub(1))) || self.spd_dims.windows(2).any(|w| w[1] > w[0] || w[1] == 0) {
            return bad(format!("spd_dims {:?} must list 2–4 non-increasing positive sizes", self.spd_dims));
        }
        if self.enable_spd_disc && self.spd_dims[0] != self.layer_tag.channels() {
            return bad(format!(
                "spd_dims starts at {} but layer {} yields {} channels",
                self.spd_dims[0],
                self.layer_tag.as_str(),
                self.layer_tag.channels()
            ));
        }
        if self.enable_spd_disc && self.extractor_kind == ExtractorKind::Imported {
            return bad("training needs features of generated images; the imported extractor cannot provide them".into());
        }
        if !(self.reeig_eps > 0.0) {
            return bad("reeig_eps must be positive".into());
        }
        let mut order = self.update_order.clone();
        order.sort_by_key(|p| *p as u8);
        if order != [Phase::DiscImage, Phase::DiscSpd, Phase::Generator] {
            return bad("update_order must name d_image, d_spd and g once each".into());
        }
        Ok(())
    }

    pub fn adam_g(&self) -> spdgan_core::params::AdamConfig {
        self.adam(self.alpha_g)
    }

    pub fn adam_d_image(&self) -> spdgan_core::params::AdamConfig {
        self.adam(self.alpha_d_image)
    }

    pub fn adam_d_spd(&self) -> spdgan_core::params::AdamConfig {
        self.adam(self.alpha_d_spd)
    }

    fn adam(&self, lr: f64) -> spdgan_core::params::AdamConfig {
        spdgan_core::params::AdamConfig { lr, beta1: self.adam_beta1, beta2: self.adam_beta2, eps: 1e-8 }
    }
}

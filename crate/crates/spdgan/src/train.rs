//! The adversarial training loop.

use std::path::{Path, PathBuf};
use std::time::Instant;

use spdgan_core::colormetrics::{colorfulness, embed_set, fid, lab_to_rgb, psnr, ssim, ImageLab, RgbImage8};
use spdgan_core::features::{gram, FeatureExtractor};
use spdgan_core::losses::{
    build_blur_kernel, color_loss, full_objective, gan_loss_d, gan_loss_g, l1_loss, multi_dis_loss, spd_gan_loss, BlurKernel,
    ObjectiveTerms,
};
use spdgan_core::networks::{
    decode_lab, Generator, GeneratorSpec, PatchDiscriminator, PatchSpec, SpdDiscriminator, SpdSpec, PATCH_DISC_TAG, SPD_DISC_TAG,
};
use spdgan_core::nn::{Mode, NormSpec};
use spdgan_core::tensor::Tensor;
use spdgan_core::{Graph, Var};

use crate::config::{Phase, TrainConfig};
use crate::data::{epoch_order, Dataset, Sample};
use crate::error::{Error, Result};
use crate::formats::{num, opt_num, Checkpoint, Csv};

/// Seed of the frozen extractor used as the FID embedder. It is fixed so
/// FID values are comparable across runs with different training seeds.
pub const FID_EMBEDDER_SEED: u64 = 1;

/// Every network of a run.
#[derive(Debug, Clone)]
pub struct Models {
    pub gen: Generator<f32>,
    pub patch: PatchDiscriminator<f32>,
    pub spd: Option<SpdDiscriminator<f32>>,
    pub extractor: FeatureExtractor<f32>,
}

impl Models {
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let norm = |kind| NormSpec { eps: cfg.norm_eps, ..NormSpec::new(kind) };
        let gen = Generator::new(
            GeneratorSpec { base_width: cfg.gen_width, residual_blocks: cfg.residual_blocks, norm: norm(cfg.gen_norm), zero_init_residual: false },
            cfg.seed,
        )?;
        let patch = PatchDiscriminator::new(PatchSpec { norm: norm(cfg.disc_norm), slope: cfg.leaky_slope }, cfg.seed)?;
        let spd = if cfg.enable_spd_disc {
            Some(SpdDiscriminator::new(SpdSpec { dims: cfg.spd_dims.clone(), reeig_eps: cfg.reeig_eps }, cfg.seed)?)
        } else {
            None
        };
        let extractor = match cfg.extractor_kind {
            spdgan_core::features::ExtractorKind::Surrogate => FeatureExtractor::surrogate(cfg.seed),
            spdgan_core::features::ExtractorKind::Imported => FeatureExtractor::imported(),
        };
        Ok(Models { gen, patch, spd, extractor })
    }

    pub fn checkpoint(&self, cfg: &TrainConfig) -> Checkpoint {
        let mut ck = Checkpoint::new(cfg.to_text());
        ck.add_store(&self.gen.store);
        ck.add_store(&self.patch.store);
        if let Some(spd) = &self.spd {
            ck.add_store(&spd.store);
        }
        ck.add_store(&self.extractor.store);
        ck
    }

    /// Rebuilds the networks described by the checkpoint's config and loads
    /// every parameter.
    pub fn from_checkpoint(ck: &Checkpoint, path: &Path) -> Result<(TrainConfig, Self)> {
        let cfg = TrainConfig::parse(&ck.config)?;
        let mut m = Models::new(&cfg)?;
        ck.restore_store(&mut m.gen.store, path)?;
        ck.restore_store(&mut m.patch.store, path)?;
        if let Some(spd) = &mut m.spd {
            ck.restore_store(&mut spd.store, path)?;
        }
        ck.restore_store(&mut m.extractor.store, path)?;
        Ok((cfg, m))
    }

    pub fn load(path: &Path) -> Result<(TrainConfig, Self)> {
        Self::from_checkpoint(&Checkpoint::load(path)?, path)
    }
}

/// Means of the logged losses over one epoch.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EpochLosses {
    pub epoch: usize,
    pub d_image: f64,
    pub d_spd: Option<f64>,
    pub terms: ObjectiveTerms,
    pub objective: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricRow {
    pub epoch: usize,
    pub psnr: f64,
    pub ssim: f64,
    pub fid: f64,
    pub colorfulness: f64,
}

/// Counters gathered by inspecting the tapes of every step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Instrumentation {
    pub steps: usize,
    /// Gram matrices recorded on any tape.
    pub gram_ops: usize,
    pub spd_disc_evaluations: usize,
    pub color_loss_evaluations: usize,
}

/// Everything a run produced.
#[derive(Debug, Clone)]
pub struct RunRecord {
    pub config: TrainConfig,
    pub epochs: Vec<EpochLosses>,
    pub metrics: Vec<MetricRow>,
    pub checkpoints: Vec<PathBuf>,
    pub instrumentation: Instrumentation,
    /// Per-step objective terms alongside the objective value read off the
    /// tape, for auditing the loss assembly.
    pub audit: Vec<(ObjectiveTerms, f64)>,
    pub seconds: f64,
}

impl RunRecord {
    pub const LOSS_HEADER: [&'static str; 9] = ["run_id", "epoch", "d_image", "d_spd", "g_adv_pixel", "g_adv_spd", "l1", "color", "objective"];
    pub const METRIC_HEADER: [&'static str; 6] = ["run_id", "epoch", "psnr", "ssim", "fid", "colorfulness"];

    pub fn loss_csv(&self) -> Csv {
        let mut c = Csv::new(&Self::LOSS_HEADER);
        for e in &self.epochs {
            c.push(vec![
                self.config.run_id.clone(),
                e.epoch.to_string(),
                num(e.d_image),
                opt_num(e.d_spd),
                num(e.terms.adv_pixel),
                opt_num(e.terms.adv_spd),
                num(e.terms.l1),
                opt_num(e.terms.color),
                num(e.objective),
            ]);
        }
        c
    }

    pub fn metric_csv(&self) -> Csv {
        let mut c = Csv::new(&Self::METRIC_HEADER);
        for m in &self.metrics {
            c.push(metric_fields(&self.config.run_id, m));
        }
        c
    }

    /// Every value is finite across all logged losses.
    pub fn all_finite(&self) -> bool {
        self.epochs.iter().all(|e| {
            [Some(e.d_image), e.d_spd, Some(e.terms.adv_pixel), e.terms.adv_spd, Some(e.terms.l1), e.terms.color, Some(e.objective)]
                .iter()
                .flatten()
                .all(|v| v.is_finite())
        })
    }
}

pub fn metric_fields(run_id: &str, m: &MetricRow) -> Vec<String> {
    vec![run_id.to_string(), m.epoch.to_string(), num(m.psnr), num(m.ssim), num(m.fid), num(m.colorfulness)]
}

fn batch_tensors(samples: &[&Sample]) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let gray: Vec<_> = samples.iter().map(|s| s.gray_tensor()).collect();
    let lab: Vec<_> = samples.iter().map(|s| s.lab_tensor()).collect();
    Ok((Tensor::stack(&gray)?, Tensor::stack(&lab)?))
}

fn scalar(g: &Graph<f32>, v: Var) -> f64 {
    g.value(v).item() as f64
}

/// Steps the networks of one run.
pub struct Trainer {
    pub cfg: TrainConfig,
    pub models: Models,
    kernel: BlurKernel,
    pub instrumentation: Instrumentation,
}

/// Loss values of one step.
#[derive(Debug, Clone, Copy, Default)]
pub struct StepLosses {
    pub d_image: f64,
    pub d_spd: Option<f64>,
    pub terms: ObjectiveTerms,
    pub objective: f64,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        let models = Models::new(&cfg)?;
        Self::with_models(cfg, models)
    }

    pub fn with_models(cfg: TrainConfig, models: Models) -> Result<Self> {
        let mut kernel = build_blur_kernel();
        if cfg.blur_normalize {
            kernel = BlurKernel::gaussian(kernel.amplitude, kernel.sigma, kernel.radius, true)?;
        }
        Ok(Trainer { cfg, models, kernel, instrumentation: Instrumentation::default() })
    }

    fn note_tape(&mut self, g: &Graph<f32>) {
        self.instrumentation.gram_ops += g.op_names().iter().filter(|&&n| n == "gram").count();
    }

    /// One optimization step on a batch: the generator forward pass, then
    /// the three updates in the configured order.
    pub fn step(&mut self, batch: &[&Sample]) -> Result<StepLosses> {
        let (gray_t, lab_t) = batch_tensors(batch)?;
        let mut out = StepLosses::default();
        let mut gg = Graph::new();
        let gray = gg.input(gray_t.clone());
        let fake = self.models.gen.forward(&mut gg, gray, Mode::Train)?;
        gg.check_finite(fake, "generator output")?;
        let fake_t = gg.value(fake).clone();
        let order = self.cfg.update_order.clone();
        for phase in order {
            match phase {
                Phase::DiscImage => out.d_image = self.step_d_image(&gray_t, &lab_t, &fake_t)?,
                Phase::DiscSpd => out.d_spd = self.step_d_spd(&lab_t, &fake_t)?,
                Phase::Generator => {
                    let (terms, objective) = self.step_g(&mut gg, gray, fake, &lab_t)?;
                    out.terms = terms;
                    out.objective = objective;
                }
            }
        }
        self.note_tape(&gg);
        self.instrumentation.steps += 1;
        Ok(out)
    }

    fn step_d_image(&mut self, gray_t: &Tensor<f32>, lab_t: &Tensor<f32>, fake_t: &Tensor<f32>) -> Result<f64> {
        let mut g = Graph::new();
        let gray = g.input(gray_t.clone());
        let real = g.input(lab_t.clone());
        let fake = g.input(fake_t.clone());
        let p = &mut self.models.patch;
        let sr = p.forward(&mut g, gray, real, Mode::Train)?;
        let sf = p.forward(&mut g, gray, fake, Mode::Train)?;
        let loss = gan_loss_d(&mut g, sr, sf)?;
        g.check_finite(loss, "image discriminator loss")?;
        g.backward(loss)?.accumulate_into(&mut p.store)?;
        reject_skipped(p.store.adam_step_all(&self.cfg.adam_d_image()), "image discriminator")?;
        let v = scalar(&g, loss);
        self.note_tape(&g);
        Ok(v)
    }

    fn step_d_spd(&mut self, lab_t: &Tensor<f32>, fake_t: &Tensor<f32>) -> Result<Option<f64>> {
        let Some(spd) = &mut self.models.spd else {
            return Ok(None);
        };
        let mut g = Graph::new();
        let real = g.input(lab_t.clone());
        let fake = g.input(fake_t.clone());
        let tag = self.cfg.layer_tag;
        let fr = self.models.extractor.extract(&mut g, real, tag)?;
        let ff = self.models.extractor.extract(&mut g, fake, tag)?;
        let gr = gram(&mut g, fr, self.cfg.ridge)?;
        let gf = gram(&mut g, ff, self.cfg.ridge)?;
        let (d, _) = spd_gan_loss(&mut g, spd, gr, gf, self.cfg.generator_loss)?;
        g.check_finite(d, "SPD discriminator loss")?;
        g.backward(d)?.accumulate_into(&mut spd.store)?;
        reject_skipped(spd.step(&self.cfg.adam_d_spd())?, "SPD discriminator")?;
        self.instrumentation.spd_disc_evaluations += 1;
        let v = scalar(&g, d);
        self.note_tape(&g);
        Ok(Some(v))
    }

    fn step_g(&mut self, g: &mut Graph<f32>, gray: Var, fake: Var, lab_t: &Tensor<f32>) -> Result<(ObjectiveTerms, f64)> {
        g.freeze(PATCH_DISC_TAG);
        g.freeze(SPD_DISC_TAG);
        let form = self.cfg.generator_loss;
        let w = self.cfg.weights;
        let real = g.input(lab_t.clone());
        let sf = self.models.patch.forward(g, gray, fake, Mode::Train)?;
        let adv_pixel = gan_loss_g(g, sf, form)?;
        let adv_spd = match &self.models.spd {
            Some(spd) => {
                let f = self.models.extractor.extract(g, fake, self.cfg.layer_tag)?;
                let gm = gram(g, f, self.cfg.ridge)?;
                let s = spd.forward(g, gm)?.score;
                self.instrumentation.spd_disc_evaluations += 1;
                Some(gan_loss_g(g, s, form)?)
            }
            None => None,
        };
        let l1 = l1_loss(g, real, fake)?;
        let color = if self.cfg.enable_color_loss {
            let yl = decode_lab(g, real)?;
            let gl = decode_lab(g, fake)?;
            self.instrumentation.color_loss_evaluations += 1;
            Some(color_loss(g, yl, gl, &self.kernel)?)
        } else {
            None
        };
        let multi = multi_dis_loss(g, adv_pixel, adv_spd, &w)?;
        let total = full_objective(g, l1, color, multi, &w)?;
        let terms = ObjectiveTerms {
            adv_pixel: scalar(g, adv_pixel),
            adv_spd: adv_spd.map(|v| scalar(g, v)),
            l1: scalar(g, l1),
            color: color.map(|v| scalar(g, v)),
        };
        g.check_finite(total, "generator objective")?;
        let gen = &mut self.models.gen;
        g.backward(total)?.accumulate_into(&mut gen.store)?;
        reject_skipped(gen.store.adam_step_all(&self.cfg.adam_g()), "generator")?;
        Ok((terms, scalar(g, total)))
    }

    /// Colorizes gray images with the generator in evaluation mode.
    pub fn colorize(&mut self, grays: &[RgbImage8]) -> Result<Vec<RgbImage8>> {
        colorize_with(&mut self.models.gen, grays)
    }

    /// PSNR/SSIM/FID/colorfulness of the colorized held-out split.
    pub fn evaluate(&mut self, epoch: usize, samples: &[Sample]) -> Result<MetricRow> {
        evaluate_with(&mut self.models.gen, epoch, samples)
    }
}

fn reject_skipped(skipped: Vec<String>, who: &str) -> Result<()> {
    if skipped.is_empty() {
        Ok(())
    } else {
        Err(Error::Core(spdgan_core::Error::InvalidInput(format!("{who}: non-finite gradient for {}", skipped.join(", ")))))
    }
}

/// Generator forward on gray images (any 3-channel image is reduced to its
/// 601 luma first), decoded back to sRGB.
pub fn colorize_with(gen: &mut Generator<f32>, images: &[RgbImage8]) -> Result<Vec<RgbImage8>> {
    let mut out = Vec::with_capacity(images.len());
    for img in images {
        let gray = img.to_gray();
        let x: Tensor<f32> = spdgan_core::colormetrics::rgb_to_lab(&gray).lightness_tanh();
        let y = gen.run(&x, Mode::Eval)?;
        let (rgb, _) = lab_to_rgb(&ImageLab::from_tanh(&y)?);
        out.push(rgb);
    }
    Ok(out)
}

/// Metrics of `pred` against `truth`, image by image averaged, with FID
/// over the two sets.
pub fn metric_row(epoch: usize, truth: &[RgbImage8], pred: &[RgbImage8]) -> Result<MetricRow> {
    let n = truth.len() as f64;
    let mut row = MetricRow { epoch, psnr: 0.0, ssim: 0.0, fid: 0.0, colorfulness: 0.0 };
    for (t, p) in truth.iter().zip(pred) {
        row.psnr += psnr(t, p)? / n;
        row.ssim += ssim(t, p)? / n;
        row.colorfulness += colorfulness(p) / n;
    }
    let mut emb = FeatureExtractor::<f64>::surrogate(FID_EMBEDDER_SEED);
    row.fid = fid(&embed_set(truth, &mut emb)?, &embed_set(pred, &mut emb)?)?;
    Ok(row)
}

pub fn evaluate_with(gen: &mut Generator<f32>, epoch: usize, samples: &[Sample]) -> Result<MetricRow> {
    let truth: Vec<RgbImage8> = samples.iter().map(|s| s.color.clone()).collect();
    let grays: Vec<RgbImage8> = samples.iter().map(|s| s.gray.clone()).collect();
    let pred = colorize_with(gen, &grays)?;
    metric_row(epoch, &truth, &pred)
}

/// Mean PSNR of the gray image replicated to RGB against the ground truth.
pub fn gray_baseline_psnr(samples: &[Sample]) -> Result<f64> {
    let mut s = 0.0;
    for x in samples {
        s += psnr(&x.color, &x.gray)?;
    }
    Ok(s / samples.len() as f64)
}

/// Where a run writes its files, and progress reporting.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub out_dir: Option<PathBuf>,
    pub verbose: bool,
}

pub fn load_dataset(cfg: &TrainConfig) -> Result<Dataset> {
    if cfg.dataset == "synthetic" {
        Ok(Dataset::synthetic(cfg.seed, cfg.train_images, cfg.heldout_images, cfg.image_size))
    } else {
        let mut d = Dataset::from_dir(Path::new(&cfg.dataset), cfg.heldout_images, cfg.image_size)?;
        d.train.truncate(cfg.train_images);
        Ok(d)
    }
}

/// Trains from scratch per `cfg`; batches are taken in a seeded order and
/// a trailing partial batch is dropped.
pub fn train(cfg: &TrainConfig, opts: &RunOptions) -> Result<(RunRecord, Models)> {
    let data = load_dataset(cfg)?;
    train_on(cfg, &data, opts)
}

pub fn train_on(cfg: &TrainConfig, data: &Dataset, opts: &RunOptions) -> Result<(RunRecord, Models)> {
    let started = Instant::now();
    let mut t = Trainer::new(cfg.clone())?;
    let bs = cfg.batch_size;
    if data.train.len() < bs {
        return Err(Error::config(format!("{} training images cannot fill a batch of {bs}", data.train.len())));
    }
    let mut rec = RunRecord {
        config: cfg.clone(),
        epochs: Vec::new(),
        metrics: Vec::new(),
        checkpoints: Vec::new(),
        instrumentation: Instrumentation::default(),
        audit: Vec::new(),
        seconds: 0.0,
    };
    for epoch in 1..=cfg.epochs {
        let order = epoch_order(cfg.seed, epoch, data.train.len());
        let mut sum = EpochLosses { epoch, ..Default::default() };
        let mut steps = 0usize;
        for (k, chunk) in order.chunks_exact(bs).enumerate() {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &data.train[i]).collect();
            let s = match t.step(&batch) {
                Ok(s) => s,
                Err(e) => return Err(halt(&t, opts, epoch, k, e)),
            };
            if !s.objective.is_finite() || !s.d_image.is_finite() || s.d_spd.is_some_and(|v| !v.is_finite()) {
                return Err(halt(&t, opts, epoch, k, Error::config("non-finite loss value")));
            }
            rec.audit.push((s.terms, s.objective));
            sum.d_image += s.d_image;
            sum.d_spd = s.d_spd.map(|v| v + sum.d_spd.unwrap_or(0.0));
            sum.terms.adv_pixel += s.terms.adv_pixel;
            sum.terms.adv_spd = s.terms.adv_spd.map(|v| v + sum.terms.adv_spd.unwrap_or(0.0));
            sum.terms.l1 += s.terms.l1;
            sum.terms.color = s.terms.color.map(|v| v + sum.terms.color.unwrap_or(0.0));
            sum.objective += s.objective;
            steps += 1;
        }
        let n = steps as f64;
        let e = EpochLosses {
            epoch,
            d_image: sum.d_image / n,
            d_spd: sum.d_spd.map(|v| v / n),
            terms: ObjectiveTerms {
                adv_pixel: sum.terms.adv_pixel / n,
                adv_spd: sum.terms.adv_spd.map(|v| v / n),
                l1: sum.terms.l1 / n,
                color: sum.terms.color.map(|v| v / n),
            },
            objective: sum.objective / n,
        };
        if opts.verbose {
            eprintln!(
                "[{}] epoch {epoch}/{}  d_image {:.4}  d_spd {}  l1 {:.4}  objective {:.4}  ({:.0}s)",
                cfg.run_id,
                cfg.epochs,
                e.d_image,
                e.d_spd.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into()),
                e.terms.l1,
                e.objective,
                started.elapsed().as_secs_f64()
            );
        }
        rec.epochs.push(e);
        let last = epoch == cfg.epochs;
        if !data.heldout.is_empty() && data.heldout.len() >= 2 && (last || (cfg.eval_every > 0 && epoch % cfg.eval_every == 0)) {
            rec.metrics.push(t.evaluate(epoch, &data.heldout)?);
        }
        if let Some(dir) = &opts.out_dir {
            if last || (cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0) {
                let p = dir.join(if last { "final.spdg".to_string() } else { format!("epoch-{epoch:04}.spdg") });
                t.models.checkpoint(cfg).save(&p)?;
                rec.checkpoints.push(p);
            }
        }
    }
    rec.instrumentation = t.instrumentation;
    rec.seconds = started.elapsed().as_secs_f64();
    if let Some(dir) = &opts.out_dir {
        write_run_files(&rec, dir)?;
    }
    Ok((rec, t.models))
}

/// Writes a diagnostic snapshot next to the run's outputs and turns the
/// failure into a halt error.
fn halt(t: &Trainer, opts: &RunOptions, epoch: usize, step: usize, cause: Error) -> Error {
    if let Some(dir) = &opts.out_dir {
        let _ = t.models.checkpoint(&t.cfg).save(&dir.join("halt.spdg"));
        let note = format!("epoch = {epoch}\nstep = {step}\ncause = {cause}\n{}", t.cfg.to_text());
        let _ = crate::formats::write_text(&dir.join("halt.txt"), &note);
    }
    Error::NonFinite { epoch, step, msg: cause.to_string() }
}

pub fn write_run_files(rec: &RunRecord, dir: &Path) -> Result<()> {
    rec.loss_csv().save(&dir.join("losses.csv"))?;
    rec.metric_csv().save(&dir.join("metrics.csv"))?;
    let mut manifest = rec.config.to_text();
    manifest.push_str(&format!("package_version = {}\n", env!("CARGO_PKG_VERSION")));
    manifest.push_str(&format!("steps = {}\n", rec.instrumentation.steps));
    manifest.push_str(&format!("gram_ops = {}\n", rec.instrumentation.gram_ops));
    for (i, c) in rec.checkpoints.iter().enumerate() {
        manifest.push_str(&format!("checkpoint.{i} = {}\n", c.display()));
    }
    crate::formats::write_text(&dir.join("manifest.txt"), &manifest)
}

//! Training objectives: adversarial terms for both discriminators, L1, the
//! blurred color loss and the weighted full objective.

use alloc::vec::Vec;

#[cfg(not(feature = "std"))]
use num_traits::Float;

use crate::error::{bail, Result};
use crate::graph::{Graph, Var};
use crate::networks::SpdDiscriminator;
use crate::scalar::Real;

/// Floor applied to every log argument.
pub const LOG_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda_i: f64,
    pub lambda_spd: f64,
    pub lambda_l1: f64,
    pub lambda_color: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { lambda_i: 0.01, lambda_spd: 0.01, lambda_l1: 0.99, lambda_color: 0.001 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_i", self.lambda_i),
            ("lambda_spd", self.lambda_spd),
            ("lambda_l1", self.lambda_l1),
            ("lambda_color", self.lambda_color),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                bail!(Config, "{name} must be a finite non-negative number, got {v}");
            }
        }
        Ok(())
    }
}

/// Generator adversarial term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GeneratorLoss {
    /// `−log D(fake)`
    #[default]
    NonSaturating,
    /// `log(1 − D(fake))`, minimized as written in the minimax game.
    Literal,
}

/// Square `(2r+1)²` blur kernel, row-major, offsets `−r..=r`.
#[derive(Debug, Clone, PartialEq)]
pub struct BlurKernel {
    pub radius: usize,
    pub amplitude: f64,
    pub sigma: f64,
    pub weights: Vec<f64>,
}

impl BlurKernel {
    /// `A·exp(−x²/(2σ²) − y²/(2σ²))`, optionally rescaled to unit sum.
    pub fn gaussian(amplitude: f64, sigma: f64, radius: usize, normalize: bool) -> Result<Self> {
        if !(sigma > 0.0) || !(amplitude > 0.0) {
            bail!(Config, "blur kernel needs positive amplitude and sigma, got {amplitude}, {sigma}");
        }
        let r = radius as i64;
        let two_s2 = 2.0 * sigma * sigma;
        let mut weights = Vec::with_capacity((2 * radius + 1).pow(2));
        for y in -r..=r {
            for x in -r..=r {
                let (xf, yf) = (x as f64, y as f64);
                weights.push(amplitude * (-(xf * xf) / two_s2 - (yf * yf) / two_s2).exp());
            }
        }
        if normalize {
            let total: f64 = weights.iter().sum();
            weights.iter_mut().for_each(|w| *w /= total);
        }
        Ok(BlurKernel { radius, amplitude, sigma, weights })
    }

    /// Weight at offset `(x, y)`.
    pub fn at(&self, x: i64, y: i64) -> f64 {
        let r = self.radius as i64;
        let side = 2 * r + 1;
        self.weights[((y + r) * side + (x + r)) as usize]
    }

    pub fn side(&self) -> usize {
        2 * self.radius + 1
    }

    pub fn cast<T: Real>(&self) -> Vec<T> {
        self.weights.iter().map(|&w| T::of(w)).collect()
    }
}

/// The 21×21 kernel with `A = 0.053`, `σ = 3`.
pub fn build_blur_kernel() -> BlurKernel {
    BlurKernel::gaussian(0.053, 3.0, 10, false).expect("constant parameters")
}

fn log_of_mean<T: Real>(g: &mut Graph<T>, scores: Var, complement: bool) -> Result<Var> {
    let m = g.sample_mean(scores)?;
    let arg = if complement { g.affine(m, -T::one(), T::one()) } else { m };
    let l = g.log_clamped(arg, LOG_FLOOR);
    Ok(g.mean(l))
}

/// `−mean log D(real) − mean log(1 − D(fake))`, each score map first
/// averaged over its patches.
pub fn gan_loss_d<T: Real>(g: &mut Graph<T>, real: Var, fake: Var) -> Result<Var> {
    let lr = log_of_mean(g, real, false)?;
    let lf = log_of_mean(g, fake, true)?;
    let s = g.add(lr, lf)?;
    Ok(g.affine(s, -T::one(), T::zero()))
}

pub fn gan_loss_g<T: Real>(g: &mut Graph<T>, fake: Var, form: GeneratorLoss) -> Result<Var> {
    match form {
        GeneratorLoss::NonSaturating => {
            let l = log_of_mean(g, fake, false)?;
            Ok(g.affine(l, -T::one(), T::zero()))
        }
        GeneratorLoss::Literal => log_of_mean(g, fake, true),
    }
}

/// Adversarial losses of the SPD discriminator on Gram batches of real and
/// generated images: `(d_loss, g_loss)`.
pub fn spd_gan_loss<T: Real>(
    g: &mut Graph<T>,
    disc: &SpdDiscriminator<T>,
    real_gram: Var,
    fake_gram: Var,
    form: GeneratorLoss,
) -> Result<(Var, Var)> {
    if g.shape(real_gram) != g.shape(fake_gram) {
        bail!(Dimension, "Gram batches {:?} and {:?}", g.shape(real_gram), g.shape(fake_gram));
    }
    let real = disc.forward(g, real_gram)?.score;
    let fake = disc.forward(g, fake_gram)?.score;
    let d = gan_loss_d(g, real, fake)?;
    let gl = gan_loss_g(g, fake, form)?;
    Ok((d, gl))
}

/// Mean absolute difference.
pub fn l1_loss<T: Real>(g: &mut Graph<T>, y: Var, pred: Var) -> Result<Var> {
    let d = g.sub(y, pred)?;
    let a = g.abs(d);
    Ok(g.mean(a))
}

/// `λ_i·L_pixel + λ_SPD·L_SPD`; a missing SPD term contributes nothing.
pub fn multi_dis_loss<T: Real>(g: &mut Graph<T>, pixel: Var, spd: Option<Var>, w: &LossWeights) -> Result<Var> {
    let p = g.affine(pixel, T::of(w.lambda_i), T::zero());
    match spd {
        Some(s) => {
            let s = g.affine(s, T::of(w.lambda_spd), T::zero());
            g.add(p, s)
        }
        None => Ok(p),
    }
}

/// Mean squared value of the blurred difference of two LAB tensors.
pub fn color_loss<T: Real>(g: &mut Graph<T>, y_lab: Var, g_lab: Var, kernel: &BlurKernel) -> Result<Var> {
    let d = g.sub(y_lab, g_lab)?;
    let b = g.blur(d, &kernel.cast::<T>(), kernel.radius)?;
    let sq = g.square(b);
    Ok(g.mean(sq))
}

/// `multi_dis + λ_l1·l1 + λ_color·color`; a missing color term contributes
/// nothing.
pub fn full_objective<T: Real>(g: &mut Graph<T>, l1: Var, color: Option<Var>, multi_dis: Var, w: &LossWeights) -> Result<Var> {
    let a = g.affine(l1, T::of(w.lambda_l1), T::zero());
    let mut total = g.add(multi_dis, a)?;
    if let Some(c) = color {
        let c = g.affine(c, T::of(w.lambda_color), T::zero());
        total = g.add(total, c)?;
    }
    Ok(total)
}

/// Scalar loss values of one generator step, kept separately so the
/// objective can be re-assembled and audited.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ObjectiveTerms {
    pub adv_pixel: f64,
    pub adv_spd: Option<f64>,
    pub l1: f64,
    pub color: Option<f64>,
}

impl ObjectiveTerms {
    pub fn multi_dis(&self, w: &LossWeights) -> f64 {
        multi_dis_value(self.adv_pixel, self.adv_spd.unwrap_or(0.0), w)
    }

    pub fn total(&self, w: &LossWeights) -> f64 {
        full_objective_value(self.l1, self.color.unwrap_or(0.0), self.multi_dis(w), w)
    }
}

pub fn multi_dis_value(pixel: f64, spd: f64, w: &LossWeights) -> f64 {
    w.lambda_i * pixel + w.lambda_spd * spd
}

pub fn full_objective_value(l1: f64, color: f64, multi_dis: f64, w: &LossWeights) -> f64 {
    multi_dis + w.lambda_l1 * l1 + w.lambda_color * color
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn paper_weights() {
        let w = LossWeights::default();
        assert_eq!((w.lambda_i, w.lambda_spd, w.lambda_l1, w.lambda_color), (0.01, 0.01, 0.99, 0.001));
    }

    #[test]
    fn multi_dis_arithmetic() {
        let w = LossWeights::default();
        assert!((multi_dis_value(1.0, 2.0, &w) - 0.03).abs() < 1e-15);
        let no_spd = LossWeights { lambda_spd: 0.0, ..w };
        assert_eq!(multi_dis_value(1.7, 5.0, &no_spd), 0.01 * 1.7);
    }

    #[test]
    fn full_objective_arithmetic() {
        let w = LossWeights::default();
        assert!((full_objective_value(1.0, 4.0, 0.03, &w) - 1.024).abs() < 1e-12);
    }

    #[test]
    fn negative_weight_rejected() {
        let w = LossWeights { lambda_l1: -0.1, ..Default::default() };
        assert!(w.validate().is_err());
    }

    #[test]
    fn kernel_constants() {
        let k = build_blur_kernel();
        assert_eq!(k.side(), 21);
        assert_eq!(k.at(0, 0), 0.053);
        assert!((k.at(3, 0) / k.at(0, 0) - (-0.5f64).exp()).abs() < 1e-12);
        for (x, y) in [(1, 2), (4, 7), (10, 3)] {
            assert_eq!(k.at(x, y), k.at(-x, y));
            assert_eq!(k.at(x, y), k.at(x, -y));
            assert_eq!(k.at(x, y), k.at(y, x));
        }
    }

    #[test]
    fn parity_scores_give_two_ln2() {
        let mut g = Graph::<f64>::new();
        let r = g.input(Tensor::full(&[2, 1, 3, 3], 0.5));
        let f = g.input(Tensor::full(&[2, 1, 3, 3], 0.5));
        let d = gan_loss_d(&mut g, r, f).unwrap();
        assert!((g.value(d).item() - 2.0 * core::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn perfect_discriminator_loss_vanishes() {
        let mut g = Graph::<f64>::new();
        let r = g.input(Tensor::full(&[1, 1, 2, 2], 1.0));
        let f = g.input(Tensor::full(&[1, 1, 2, 2], 0.0));
        let d = gan_loss_d(&mut g, r, f).unwrap();
        assert_eq!(g.value(d).item(), 0.0);
    }

    #[test]
    fn l1_of_constant_offset() {
        let mut g = Graph::<f64>::new();
        let a = g.input(Tensor::full(&[1, 3, 4, 4], 0.25));
        let b = g.input(Tensor::full(&[1, 3, 4, 4], -0.5));
        let l = l1_loss(&mut g, a, b).unwrap();
        assert!((g.value(l).item() - 0.75).abs() < 1e-15);
        let z = l1_loss(&mut g, a, a).unwrap();
        assert_eq!(g.value(z).item(), 0.0);
    }
}

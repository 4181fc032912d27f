//! sRGB ↔ CIE L*a*b* (D65) and the evaluation metrics: PSNR, SSIM, FID and
//! colorfulness.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

#[cfg(not(feature = "std"))]
use num_traits::Float;

use crate::error::{bail, Result};
use crate::features::{FeatureExtractor, LayerTag};
use crate::linalg::{sym_eig, Mat, SpectralFn};
use crate::scalar::Real;
use crate::tensor::Tensor;

/// 8-bit interleaved RGB.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage8 {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl RgbImage8 {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height * 3 {
            bail!(Dimension, "{}×{} RGB image needs {} bytes, got {}", width, height, width * height * 3, data.len());
        }
        Ok(RgbImage8 { width, height, data })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        RgbImage8 { width, height, data: rgb.iter().copied().cycle().take(width * height * 3).collect() }
    }

    pub fn pixels(&self) -> impl Iterator<Item = [u8; 3]> + '_ {
        self.data.chunks_exact(3).map(|p| [p[0], p[1], p[2]])
    }

    /// ITU-R 601 luma in `[0, 255]`.
    pub fn luma(&self) -> Vec<f64> {
        self.pixels().map(|[r, g, b]| 0.299 * r as f64 + 0.587 * g as f64 + 0.114 * b as f64).collect()
    }

    /// Gray image with every channel set to the rounded luma.
    pub fn to_gray(&self) -> RgbImage8 {
        let data = self.luma().into_iter().flat_map(|y| {
            let v = y.round().clamp(0.0, 255.0) as u8;
            [v, v, v]
        });
        RgbImage8 { width: self.width, height: self.height, data: data.collect() }
    }

    /// One channel as `f64` values.
    pub fn plane(&self, c: usize) -> Vec<f64> {
        self.data.iter().skip(c).step_by(3).map(|&v| v as f64).collect()
    }
}

/// Planar L*a*b*: `L ∈ [0, 100]`, `a, b ∈ [−110, 110]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageLab {
    pub width: usize,
    pub height: usize,
    pub l: Vec<f64>,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
}

const M_RGB_XYZ: [[f64; 3]; 3] = [
    [0.4124564, 0.3575761, 0.1804375],
    [0.2126729, 0.7151522, 0.0721750],
    [0.0193339, 0.1191920, 0.9503041],
];

const M_XYZ_RGB: [[f64; 3]; 3] = [
    [3.2404542, -1.5371385, -0.4985314],
    [-0.9692660, 1.8760108, 0.0415560],
    [0.0556434, -0.2040259, 1.0572252],
];

/// D65 white as the image of sRGB white, so white maps to `a = b = 0`.
fn white() -> [f64; 3] {
    [
        M_RGB_XYZ[0].iter().sum(),
        M_RGB_XYZ[1].iter().sum(),
        M_RGB_XYZ[2].iter().sum(),
    ]
}

fn srgb_to_linear(c: f64) -> f64 {
    if c <= 0.04045 {
        c / 12.92
    } else {
        ((c + 0.055) / 1.055).powf(2.4)
    }
}

fn linear_to_srgb(c: f64) -> f64 {
    if c <= 0.0031308 {
        12.92 * c
    } else {
        1.055 * c.powf(1.0 / 2.4) - 0.055
    }
}

const DELTA: f64 = 6.0 / 29.0;

fn lab_f(t: f64) -> f64 {
    if t > DELTA * DELTA * DELTA {
        t.cbrt()
    } else {
        t / (3.0 * DELTA * DELTA) + 4.0 / 29.0
    }
}

fn lab_f_inv(t: f64) -> f64 {
    if t > DELTA {
        t * t * t
    } else {
        3.0 * DELTA * DELTA * (t - 4.0 / 29.0)
    }
}

/// One 8-bit sRGB pixel to `(L, a, b)`.
pub fn pixel_to_lab(rgb: [u8; 3]) -> [f64; 3] {
    let lin = rgb.map(|c| srgb_to_linear(c as f64 / 255.0));
    let w = white();
    let xyz: [f64; 3] = core::array::from_fn(|i| M_RGB_XYZ[i].iter().zip(&lin).map(|(m, c)| m * c).sum::<f64>() / w[i]);
    let (fx, fy, fz) = (lab_f(xyz[0]), lab_f(xyz[1]), lab_f(xyz[2]));
    [116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)]
}

/// `(L, a, b)` to 8-bit sRGB; the flag is set when any channel had to be
/// clipped into `[0, 255]`.
pub fn lab_to_pixel(lab: [f64; 3]) -> ([u8; 3], bool) {
    let fy = (lab[0] + 16.0) / 116.0;
    let fx = fy + lab[1] / 500.0;
    let fz = fy - lab[2] / 200.0;
    let w = white();
    let xyz = [lab_f_inv(fx) * w[0], lab_f_inv(fy) * w[1], lab_f_inv(fz) * w[2]];
    let mut clipped = false;
    let rgb = core::array::from_fn(|i| {
        let lin: f64 = M_XYZ_RGB[i].iter().zip(&xyz).map(|(m, c)| m * c).sum();
        let v = (linear_to_srgb(lin.max(0.0)) * 255.0).round();
        // Below zero only counts once it would round to a negative count.
        if !(0.0..=255.0).contains(&v) || 12.92 * lin * 255.0 < -0.5 {
            clipped = true;
        }
        v.clamp(0.0, 255.0) as u8
    });
    (rgb, clipped)
}

/// L* of a gray level (`R = G = B = v`).
pub fn gray_lightness(v: f64) -> f64 {
    let y = srgb_to_linear(v.clamp(0.0, 255.0) / 255.0) * (M_RGB_XYZ[1].iter().sum::<f64>() / white()[1]);
    116.0 * lab_f(y) - 16.0
}

pub fn rgb_to_lab(img: &RgbImage8) -> ImageLab {
    let n = img.width * img.height;
    let (mut l, mut a, mut b) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
    for p in img.pixels() {
        let [lv, av, bv] = pixel_to_lab(p);
        l.push(lv);
        a.push(av);
        b.push(bv);
    }
    ImageLab { width: img.width, height: img.height, l, a, b }
}

/// Back to sRGB; returns the number of clipped pixels alongside.
pub fn lab_to_rgb(img: &ImageLab) -> (RgbImage8, usize) {
    let mut data = Vec::with_capacity(img.l.len() * 3);
    let mut clipped = 0;
    for i in 0..img.l.len() {
        let (p, c) = lab_to_pixel([img.l[i], img.a[i], img.b[i]]);
        data.extend_from_slice(&p);
        clipped += c as usize;
    }
    (RgbImage8 { width: img.width, height: img.height, data }, clipped)
}

impl ImageLab {
    /// Channels mapped to `[−1, 1]`: `L/50 − 1`, `a/110`, `b/110`.
    pub fn to_tanh<T: Real>(&self) -> Tensor<T> {
        let n = self.l.len();
        Tensor::from_fn(&[1, 3, self.height, self.width], |i| {
            let (c, j) = (i / n, i % n);
            T::of(match c {
                0 => self.l[j] / 50.0 - 1.0,
                1 => self.a[j] / 110.0,
                _ => self.b[j] / 110.0,
            })
        })
    }

    /// Inverse of [`ImageLab::to_tanh`] for one `3×H×W` (or `1×3×H×W`)
    /// sample; values are clamped to the documented channel ranges.
    pub fn from_tanh<T: Real>(t: &Tensor<T>) -> Result<Self> {
        let (h, w) = match t.shape() {
            [3, h, w] | [1, 3, h, w] => (*h, *w),
            s => bail!(Dimension, "expected a 3-channel image, got {:?}", s),
        };
        let n = h * w;
        let d = t.data();
        let l = d[..n].iter().map(|v| ((v.f64() + 1.0) * 50.0).clamp(0.0, 100.0)).collect();
        let a = d[n..2 * n].iter().map(|v| (v.f64() * 110.0).clamp(-110.0, 110.0)).collect();
        let b = d[2 * n..].iter().map(|v| (v.f64() * 110.0).clamp(-110.0, 110.0)).collect();
        Ok(ImageLab { width: w, height: h, l, a, b })
    }

    /// Lightness only, tanh-coded, `1×1×H×W`.
    pub fn lightness_tanh<T: Real>(&self) -> Tensor<T> {
        Tensor::from_fn(&[1, 1, self.height, self.width], |i| T::of(self.l[i] / 50.0 - 1.0))
    }
}

fn check_same(a: &RgbImage8, b: &RgbImage8) -> Result<()> {
    if (a.width, a.height) != (b.width, b.height) {
        bail!(Dimension, "images of {}×{} and {}×{}", a.width, a.height, b.width, b.height);
    }
    Ok(())
}

/// `10·log10(peak²/MSE)` over all values; `+∞` for identical inputs.
pub fn psnr_values(a: &[f64], b: &[f64], peak: f64) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        bail!(Dimension, "psnr of {} and {} values", a.len(), b.len());
    }
    let mse = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64;
    Ok(if mse == 0.0 { f64::INFINITY } else { 10.0 * (peak * peak / mse).log10() })
}

pub fn psnr(a: &RgbImage8, b: &RgbImage8) -> Result<f64> {
    check_same(a, b)?;
    let fa: Vec<f64> = a.data.iter().map(|&v| v as f64).collect();
    let fb: Vec<f64> = b.data.iter().map(|&v| v as f64).collect();
    psnr_values(&fa, &fb, 255.0)
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

/// Normalized 1-D Gaussian taps of the SSIM window.
pub fn ssim_taps() -> [f64; SSIM_WINDOW] {
    let r = (SSIM_WINDOW / 2) as f64;
    let mut t: [f64; SSIM_WINDOW] = core::array::from_fn(|i| {
        let x = i as f64 - r;
        (-(x * x) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()
    });
    let s: f64 = t.iter().sum();
    t.iter_mut().for_each(|v| *v /= s);
    t
}

/// Valid-mode separable filtering of a `h×w` plane.
fn filter_valid(x: &[f64], w: usize, h: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (wo, ho) = (w - k + 1, h - k + 1);
    let mut rows = vec![0.0; h * wo];
    for y in 0..h {
        for xo in 0..wo {
            rows[y * wo + xo] = taps.iter().enumerate().map(|(i, t)| t * x[y * w + xo + i]).sum();
        }
    }
    let mut out = vec![0.0; ho * wo];
    for yo in 0..ho {
        for xo in 0..wo {
            out[yo * wo + xo] = taps.iter().enumerate().map(|(i, t)| t * rows[(yo + i) * wo + xo]).sum();
        }
    }
    out
}

/// Mean local SSIM of two planes with values on a `[0, 255]` scale.
pub fn ssim_plane(a: &[f64], b: &[f64], w: usize, h: usize) -> Result<f64> {
    if a.len() != w * h || b.len() != w * h {
        bail!(Dimension, "ssim planes do not match {}×{}", w, h);
    }
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        bail!(InvalidInput, "ssim needs images of at least {0}×{0}, got {1}×{2}", SSIM_WINDOW, w, h);
    }
    let taps = ssim_taps();
    let c1 = (SSIM_K1 * 255.0) * (SSIM_K1 * 255.0);
    let c2 = (SSIM_K2 * 255.0) * (SSIM_K2 * 255.0);
    let prod = |f: fn(f64, f64) -> f64| -> Vec<f64> { a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect() };
    let mu_a = filter_valid(a, w, h, &taps);
    let mu_b = filter_valid(b, w, h, &taps);
    let aa = filter_valid(&prod(|x, _| x * x), w, h, &taps);
    let bb = filter_valid(&prod(|_, y| y * y), w, h, &taps);
    let ab = filter_valid(&prod(|x, y| x * y), w, h, &taps);
    let mut total = 0.0;
    for i in 0..mu_a.len() {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = aa[i] - ma * ma;
        let vb = bb[i] - mb * mb;
        let cov = ab[i] - ma * mb;
        total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    Ok(total / mu_a.len() as f64)
}

/// SSIM averaged over the three RGB channels.
pub fn ssim(a: &RgbImage8, b: &RgbImage8) -> Result<f64> {
    check_same(a, b)?;
    let mut s = 0.0;
    for c in 0..3 {
        s += ssim_plane(&a.plane(c), &b.plane(c), a.width, a.height)?;
    }
    Ok(s / 3.0)
}

/// Hasler–Süsstrunk colorfulness `σ_rgyb + 0.3·μ_rgyb`.
pub fn colorfulness(img: &RgbImage8) -> f64 {
    let n = (img.width * img.height) as f64;
    if n == 0.0 {
        return 0.0;
    }
    let rg: Vec<f64> = img.pixels().map(|[r, g, _]| r as f64 - g as f64).collect();
    let yb: Vec<f64> = img.pixels().map(|[r, g, b]| 0.5 * (r as f64 + g as f64) - b as f64).collect();
    let stats = |v: &[f64]| {
        let m = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
        (m, var)
    };
    let (m_rg, v_rg) = stats(&rg);
    let (m_yb, v_yb) = stats(&yb);
    (v_rg + v_yb).sqrt() + 0.3 * (m_rg * m_rg + m_yb * m_yb).sqrt()
}

/// Mean and (unbiased) covariance of an embedded image set.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbedStats {
    pub mean: Vec<f64>,
    pub cov: Mat,
    pub embedder: String,
    pub count: usize,
}

impl EmbedStats {
    pub fn from_vectors(vectors: &[Vec<f64>], embedder: &str) -> Result<Self> {
        let n = vectors.len();
        if n < 2 {
            bail!(InvalidInput, "covariance needs at least 2 embedded images, got {n}");
        }
        let d = vectors[0].len();
        if vectors.iter().any(|v| v.len() != d) {
            bail!(Dimension, "embedding vectors of unequal length");
        }
        let mut mean = vec![0.0; d];
        for v in vectors {
            mean.iter_mut().zip(v).for_each(|(m, x)| *m += x);
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut cov = Mat::zeros(d, d);
        for v in vectors {
            let c: Vec<f64> = v.iter().zip(&mean).map(|(x, m)| x - m).collect();
            let s = cov.as_mut_slice();
            for i in 0..d {
                for j in 0..d {
                    s[i * d + j] += c[i] * c[j];
                }
            }
        }
        let cov = cov.scale(1.0 / (n - 1) as f64);
        Ok(EmbedStats { mean, cov, embedder: embedder.into(), count: n })
    }
}

/// `‖μ₁ − μ₂‖² + tr(C₁ + C₂ − 2·(C₁C₂)^{1/2})`. The trace of the square
/// root is taken from the eigenvalues of the symmetric product
/// `C₁^{1/2} C₂ C₁^{1/2}`, which has the same spectrum as `C₁C₂`; negative
/// eigenvalues from rounding are clipped to zero.
pub fn fid(p: &EmbedStats, q: &EmbedStats) -> Result<f64> {
    if p.embedder != q.embedder {
        bail!(Config, "FID between different embedders: {:?} vs {:?}", p.embedder, q.embedder);
    }
    if p.mean.len() != q.mean.len() {
        bail!(Dimension, "FID between {}- and {}-dimensional embeddings", p.mean.len(), q.mean.len());
    }
    let dm: f64 = p.mean.iter().zip(&q.mean).map(|(a, b)| (a - b) * (a - b)).sum();
    let e1 = sym_eig(&p.cov.symmetrized())?;
    let floor1 = noise_floor(&e1.values);
    let root1 = e1.compose(|l| if l > floor1 { SpectralFn::Sqrt.apply(l) } else { 0.0 });
    let prod = root1.matmul(&q.cov).matmul(&root1).symmetrized();
    let e2 = sym_eig(&prod)?;
    let floor2 = noise_floor(&e2.values);
    let tr_sqrt: f64 = e2.values.iter().filter(|&&l| l > floor2).map(|l| l.sqrt()).sum();
    Ok(dm + p.cov.trace() + q.cov.trace() - 2.0 * tr_sqrt)
}

/// Eigenvalues at or below this are rounding noise of a rank-deficient
/// covariance; their square roots (~1e-8 of the spectrum) would otherwise
/// dominate the FID of near-identical sets.
fn noise_floor(values: &[f64]) -> f64 {
    let top = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    top * values.len() as f64 * f64::EPSILON
}

/// Spatially pooled stage-3 surrogate features of each image.
pub fn embed_set<T: Real>(images: &[RgbImage8], extractor: &mut FeatureExtractor<T>) -> Result<EmbedStats> {
    let mut vecs = Vec::with_capacity(images.len());
    for img in images {
        let x = rgb_to_lab(img).to_tanh::<T>();
        let f = extractor.features(&x, LayerTag::Stage3)?;
        let (_, c, h, w) = f.dims4()?;
        let hw = h * w;
        vecs.push((0..c).map(|ch| f.data()[ch * hw..(ch + 1) * hw].iter().map(|v| v.f64()).sum::<f64>() / hw as f64).collect());
    }
    EmbedStats::from_vectors(&vecs, &format!("surrogate-stage3-seed{}", extractor.seed))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn white_and_black() {
        let w = pixel_to_lab([255, 255, 255]);
        assert!((w[0] - 100.0).abs() < 1e-6 && w[1].abs() < 0.5 && w[2].abs() < 0.5);
        assert_eq!(pixel_to_lab([0, 0, 0])[0], 0.0);
    }

    #[test]
    fn psnr_uniform_offset() {
        let a = RgbImage8::filled(4, 4, [100, 100, 100]);
        let b = RgbImage8::filled(4, 4, [110, 110, 110]);
        let expect = 10.0 * (255.0f64 * 255.0 / 100.0).log10();
        assert!((psnr(&a, &b).unwrap() - expect).abs() < 1e-9);
        assert!((expect - 28.13).abs() < 5e-3);
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
    }

    #[test]
    fn ssim_of_constants() {
        let a = RgbImage8::filled(16, 16, [37, 90, 200]);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn colorfulness_cases() {
        assert_eq!(colorfulness(&RgbImage8::filled(5, 3, [77, 77, 77])), 0.0);
        let red = colorfulness(&RgbImage8::filled(5, 3, [255, 0, 0]));
        assert!((red - 0.3 * (255.0f64 * 255.0 + 127.5 * 127.5).sqrt()).abs() < 1e-9);
    }

    #[test]
    fn fid_cases() {
        let stats = |mean: Vec<f64>, cov: Mat| EmbedStats { mean, cov, embedder: "t".into(), count: 2 };
        let a = stats(vec![0.0, 0.0], Mat::identity(2));
        let b = stats(vec![1.0, 0.0], Mat::identity(2));
        assert!(fid(&a, &a).unwrap().abs() < 1e-8);
        assert!((fid(&a, &b).unwrap() - 1.0).abs() < 1e-9);
        let c = stats(vec![0.0], Mat::from_diag(&[4.0]));
        let d = stats(vec![0.0], Mat::from_diag(&[1.0]));
        assert!((fid(&c, &d).unwrap() - 1.0).abs() < 1e-9);
        let e = EmbedStats { embedder: "other".into(), ..d.clone() };
        assert!(fid(&d, &e).is_err());
    }

    #[test]
    fn one_image_set_rejected() {
        assert!(EmbedStats::from_vectors(&[vec![1.0]], "t").is_err());
    }
}

use spdgan_core::colormetrics::*;
use spdgan_core::features::FeatureExtractor;
use spdgan_core::linalg::Mat;
use spdgan_core::rng;

fn noise_image(seed: u64, w: usize, h: usize) -> RgbImage8 {
    let mut r = rng::stream(seed);
    RgbImage8::new(w, h, (0..w * h * 3).map(|_| rng::uniform(&mut r, 0.0, 256.0) as u8).collect()).unwrap()
}

fn stats(mean: Vec<f64>, cov: Vec<f64>) -> EmbedStats {
    let d = mean.len();
    EmbedStats { mean, cov: Mat::from_vec(d, d, cov).unwrap(), embedder: "t".into(), count: 2 }
}

// Reference values from scikit-image `rgb2lab` (D65, 2°).
const REFERENCE_LAB: [([u8; 3], [f64; 3]); 4] = [
    ([119, 119, 119], [50.0344, -0.0014, 0.0026]),
    ([255, 0, 0], [53.2406, 80.0923, 67.2028]),
    ([0, 128, 255], [54.7145, 18.7735, -70.9138]),
    ([30, 200, 90], [71.0911, -63.6648, 43.2611]),
];

#[test]
fn lab_matches_reference_conversion() {
    for (rgb, want) in REFERENCE_LAB {
        let got = pixel_to_lab(rgb);
        assert!((got[0] - want[0]).abs() < 0.02, "{rgb:?}: L {} vs {}", got[0], want[0]);
        assert!((got[1] - want[1]).abs() < 0.05, "{rgb:?}: a {} vs {}", got[1], want[1]);
        assert!((got[2] - want[2]).abs() < 0.05, "{rgb:?}: b {} vs {}", got[2], want[2]);
    }
    let white = pixel_to_lab([255, 255, 255]);
    assert!((white[0] - 100.0).abs() < 1e-6 && white[1].abs() < 0.5 && white[2].abs() < 0.5);
    assert_eq!(pixel_to_lab([0, 0, 0])[0], 0.0);
}

#[test]
fn lab_round_trip_within_one_count() {
    let mut worst = 0i32;
    for r in (0..=255u16).step_by(17) {
        for g in (0..=255u16).step_by(17) {
            for b in (0..=255u16).step_by(17) {
                let px = [r as u8, g as u8, b as u8];
                let (back, clipped) = lab_to_pixel(pixel_to_lab(px));
                assert!(!clipped, "{px:?} left the gamut");
                for c in 0..3 {
                    worst = worst.max((back[c] as i32 - px[c] as i32).abs());
                }
            }
        }
    }
    assert!(worst <= 1, "worst round-trip error {worst}");
}

#[test]
fn psnr_cases() {
    let a = RgbImage8::filled(16, 16, [100, 50, 200]);
    let b = RgbImage8::filled(16, 16, [110, 60, 210]);
    let closed = 10.0 * (255.0f64 * 255.0 / 100.0).log10();
    assert!((psnr(&a, &b).unwrap() - closed).abs() < 1e-6);
    assert_eq!(format!("{:.2}", closed), "28.13");
    assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);

    let (x, y) = (noise_image(1, 20, 13), noise_image(2, 20, 13));
    let mse = x.data.iter().zip(&y.data).map(|(&p, &q)| (p as f64 - q as f64).powi(2)).sum::<f64>() / x.data.len() as f64;
    let p = psnr(&x, &y).unwrap();
    assert!((p - 10.0 * (65025.0 / mse).log10()).abs() < 1e-9);
    assert_eq!(p, psnr(&y, &x).unwrap());
}

/// Every 11×11 window evaluated independently with 2-D Gaussian weights.
fn ssim_window_oracle(a: &[f64], b: &[f64], w: usize, h: usize) -> f64 {
    let sigma = 1.5f64;
    let mut k = [[0.0; 11]; 11];
    let mut total = 0.0;
    for (i, row) in k.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (di, dj) = (i as f64 - 5.0, j as f64 - 5.0);
            *v = (-(di * di + dj * dj) / (2.0 * sigma * sigma)).exp();
            total += *v;
        }
    }
    let (c1, c2) = ((0.01f64 * 255.0).powi(2), (0.03f64 * 255.0).powi(2));
    let mut sum = 0.0;
    let mut count = 0;
    for y0 in 0..=h - 11 {
        for x0 in 0..=w - 11 {
            let (mut ma, mut mb, mut aa, mut bb, mut ab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for i in 0..11 {
                for j in 0..11 {
                    let wt = k[i][j] / total;
                    let (p, q) = (a[(y0 + i) * w + x0 + j], b[(y0 + i) * w + x0 + j]);
                    ma += wt * p;
                    mb += wt * q;
                    aa += wt * p * p;
                    bb += wt * q * q;
                    ab += wt * p * q;
                }
            }
            let (va, vb, cov) = (aa - ma * ma, bb - mb * mb, ab - ma * mb);
            sum += (2.0 * ma * mb + c1) * (2.0 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    sum / count as f64
}

#[test]
fn ssim_matches_sliding_window_oracle() {
    let (x, y) = (noise_image(3, 23, 17), noise_image(4, 23, 17));
    let want: f64 = (0..3).map(|c| ssim_window_oracle(&x.plane(c), &y.plane(c), 23, 17)).sum::<f64>() / 3.0;
    let got = ssim(&x, &y).unwrap();
    assert!((got - want).abs() < 1e-6, "{got} vs {want}");
    assert!((got - ssim(&y, &x).unwrap()).abs() < 1e-12);
    assert!((ssim(&x, &x).unwrap() - 1.0).abs() < 1e-12);
    let c = RgbImage8::filled(12, 12, [77, 77, 77]);
    assert!((ssim(&c, &c).unwrap() - 1.0).abs() < 1e-12);
}

#[test]
fn fid_closed_forms() {
    let p = stats(vec![0.3, -1.0, 2.0], vec![2.0, 0.5, 0.1, 0.5, 1.0, 0.2, 0.1, 0.2, 3.0]);
    assert!(fid(&p, &p).unwrap().abs() < 1e-8);
    let a = stats(vec![0.0, 0.0], vec![1.0, 0.0, 0.0, 1.0]);
    let b = stats(vec![1.0, 0.0], vec![1.0, 0.0, 0.0, 1.0]);
    assert!((fid(&a, &b).unwrap() - 1.0).abs() < 1e-12);
    let (c4, c1) = (stats(vec![0.0], vec![4.0]), stats(vec![0.0], vec![1.0]));
    assert!((fid(&c4, &c1).unwrap() - 1.0).abs() < 1e-6);
    let q = stats(vec![1.0, 0.0, -2.0], vec![1.0, -0.3, 0.0, -0.3, 2.0, 0.4, 0.0, 0.4, 0.5]);
    assert!((fid(&p, &q).unwrap() - fid(&q, &p).unwrap()).abs() < 1e-8);
    let mut other = q.clone();
    other.embedder = "u".into();
    assert!(fid(&p, &other).is_err());
}

#[test]
fn two_point_statistics() {
    let s = EmbedStats::from_vectors(&[vec![1.0, 0.0], vec![0.0, 1.0]], "t").unwrap();
    assert_eq!(s.mean, vec![0.5, 0.5]);
    assert_eq!(s.cov.as_slice(), &[0.5, -0.5, -0.5, 0.5]);
    assert!(EmbedStats::from_vectors(&[vec![1.0]], "t").is_err());
}

#[test]
fn embedded_identical_set_has_zero_covariance() {
    let mut ex = FeatureExtractor::<f32>::surrogate(1);
    let img = noise_image(9, 16, 16);
    let s = embed_set(&[img.clone(), img.clone(), img], &mut ex).unwrap();
    assert!(s.cov.as_slice().iter().all(|&v| v == 0.0));
    assert!(fid(&s, &s).unwrap().abs() < 1e-8);
}

#[test]
fn colorfulness_cases() {
    let mut gray = noise_image(5, 9, 9);
    for px in gray.data.chunks_mut(3) {
        px[1] = px[0];
        px[2] = px[0];
    }
    assert_eq!(colorfulness(&gray), 0.0);
    let red = RgbImage8::filled(4, 4, [255, 0, 0]);
    let want = 0.3 * (255.0f64 * 255.0 + 127.5 * 127.5).sqrt();
    assert!((colorfulness(&red) - want).abs() < 1e-9);
    assert!((want - 85.54).abs() < 0.02);

    let img = noise_image(6, 10, 7);
    let mut pixels: Vec<[u8; 3]> = img.pixels().collect();
    pixels.reverse();
    pixels.swap(3, 40);
    let permuted = RgbImage8::new(10, 7, pixels.concat()).unwrap();
    assert!((colorfulness(&img) - colorfulness(&permuted)).abs() < 1e-9);
    assert!(colorfulness(&img) > 0.0);
}

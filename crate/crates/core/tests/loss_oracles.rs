use spdgan_core::features::{gram, DEFAULT_RIDGE};
use spdgan_core::losses::*;
use spdgan_core::networks::{SpdDiscriminator, SpdSpec};
use spdgan_core::rng;
use spdgan_core::{Graph, Tensor};

const LN2: f64 = core::f64::consts::LN_2;

fn scores(r: &mut rng::Stream, n: usize, side: usize) -> Tensor<f64> {
    Tensor::from_fn(&[n, 1, side, side], |_| rng::uniform(r, 0.02, 0.98))
}

fn eval(build: impl FnOnce(&mut Graph<f64>) -> spdgan_core::graph::Var) -> f64 {
    let mut g = Graph::new();
    let v = build(&mut g);
    g.value(v).data()[0]
}

#[test]
fn discriminator_loss_at_parity_is_two_ln2() {
    let half = Tensor::full(&[3, 1, 6, 6], 0.5);
    let d = eval(|g| {
        let (r, f) = (g.input(half.clone()), g.input(half.clone()));
        gan_loss_d(g, r, f).unwrap()
    });
    assert!((d - 2.0 * LN2).abs() < 1e-12);
}

#[test]
fn perfect_discriminator_hits_the_floor() {
    let d = eval(|g| {
        let r = g.input(Tensor::full(&[2, 1, 3, 3], 1.0));
        let f = g.input(Tensor::zeros(&[2, 1, 3, 3]));
        gan_loss_d(g, r, f).unwrap()
    });
    assert!(d.abs() < 1e-9, "{d}");
    let saturated = eval(|g| {
        let f = g.input(Tensor::zeros(&[2, 1, 3, 3]));
        gan_loss_g(g, f, GeneratorLoss::NonSaturating).unwrap()
    });
    assert!((saturated + LOG_FLOOR.ln()).abs() < 1e-9);
}

#[test]
fn adversarial_losses_match_summation_oracle() {
    let mut r = rng::stream(41);
    let (n, side) = (4, 5);
    let real = scores(&mut r, n, side);
    let fake = scores(&mut r, n, side);
    let patch_mean = |t: &Tensor<f64>, i: usize| t.data()[i * side * side..(i + 1) * side * side].iter().sum::<f64>() / (side * side) as f64;
    let mut want_d = 0.0;
    let mut want_g = 0.0;
    let mut want_lit = 0.0;
    for i in 0..n {
        want_d -= (patch_mean(&real, i).ln() + (1.0 - patch_mean(&fake, i)).ln()) / n as f64;
        want_g -= patch_mean(&fake, i).ln() / n as f64;
        want_lit += (1.0 - patch_mean(&fake, i)).ln() / n as f64;
    }
    let d = eval(|g| {
        let (a, b) = (g.input(real.clone()), g.input(fake.clone()));
        gan_loss_d(g, a, b).unwrap()
    });
    let gl = eval(|g| {
        let b = g.input(fake.clone());
        gan_loss_g(g, b, GeneratorLoss::NonSaturating).unwrap()
    });
    let lit = eval(|g| {
        let b = g.input(fake.clone());
        gan_loss_g(g, b, GeneratorLoss::Literal).unwrap()
    });
    assert!((d - want_d).abs() < 1e-8);
    assert!((gl - want_g).abs() < 1e-8);
    assert!((lit - want_lit).abs() < 1e-8);
}

#[test]
fn l1_cases() {
    let mut r = rng::stream(42);
    let a = Tensor::from_fn(&[2, 3, 4, 4], |_| rng::normal(&mut r));
    let b = Tensor::from_fn(&[2, 3, 4, 4], |_| rng::normal(&mut r));
    let l1 = |x: &Tensor<f64>, y: &Tensor<f64>| {
        eval(|g| {
            let (p, q) = (g.input(x.clone()), g.input(y.clone()));
            l1_loss(g, p, q).unwrap()
        })
    };
    assert_eq!(l1(&a, &a), 0.0);
    assert!((l1(&a, &a.map(|v| v - 0.75)) - 0.75).abs() < 1e-12);
    let want = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64;
    assert!((l1(&a, &b) - want).abs() < 1e-9);
}

#[test]
fn weighted_sums() {
    let w = LossWeights::default();
    assert!((multi_dis_value(1.0, 2.0, &w) - 0.03).abs() < 1e-15);
    assert!((full_objective_value(1.0, 4.0, 0.03, &w) - 1.024).abs() < 1e-12);
    let on_tape = eval(|g| {
        let p = g.input(Tensor::scalar(1.0));
        let s = g.input(Tensor::scalar(2.0));
        let l1 = g.input(Tensor::scalar(1.0));
        let c = g.input(Tensor::scalar(4.0));
        let md = multi_dis_loss(g, p, Some(s), &w).unwrap();
        full_objective(g, l1, Some(c), md, &w).unwrap()
    });
    assert!((on_tape - 1.024).abs() < 1e-12);
    let no_spd = LossWeights { lambda_spd: 0.0, ..w };
    assert_eq!(multi_dis_value(1.7, 9.0, &no_spd), multi_dis_value(1.7, 0.0, &w));
    let t = ObjectiveTerms { adv_pixel: 0.7, adv_spd: Some(0.9), l1: 0.3, color: Some(120.0) };
    let b = ObjectiveTerms { color: None, ..t };
    assert_eq!(t.total(&LossWeights { lambda_color: 0.0, ..w }), b.total(&w));
}

#[test]
fn objective_gradient_is_weighted_sum_of_parts() {
    let w = LossWeights::default();
    let mut r = rng::stream(43);
    let x = Tensor::from_fn(&[1, 3, 8, 8], |_| rng::normal(&mut r) * 0.3);
    let y = Tensor::from_fn(&[1, 3, 8, 8], |_| rng::normal(&mut r) * 0.3);
    let kernel = build_blur_kernel();
    let grad_of = |part: usize| {
        let mut g = Graph::new();
        let (xv, yv) = (g.input_with_grad(x.clone()), g.input(y.clone()));
        let l1 = l1_loss(&mut g, yv, xv).unwrap();
        let c = color_loss(&mut g, yv, xv, &kernel).unwrap();
        let zero = g.input(Tensor::scalar(0.0));
        let loss = match part {
            0 => full_objective(&mut g, l1, Some(c), zero, &w).unwrap(),
            1 => l1,
            _ => c,
        };
        g.backward(loss).unwrap().wrt(xv).unwrap().to_vec()
    };
    let (full, gl1, gc) = (grad_of(0), grad_of(1), grad_of(2));
    for i in 0..full.len() {
        let want = w.lambda_l1 * gl1[i] + w.lambda_color * gc[i];
        assert!((full[i] - want).abs() < 1e-12 * want.abs().max(1e-6));
    }
}

#[test]
fn blur_kernel_constants() {
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
fn color_loss_is_symmetric_and_blurs_texture_away() {
    let kernel = build_blur_kernel();
    let side = 32;
    let checker = Tensor::from_fn(&[1, 3, side, side], |i| if ((i % side) + (i / side) % side) % 2 == 0 { 30.0 } else { -30.0 });
    let inverse = checker.map(|v| -v);
    let color = |a: &Tensor<f64>, b: &Tensor<f64>| {
        eval(|g| {
            let (p, q) = (g.input(a.clone()), g.input(b.clone()));
            color_loss(g, p, q, &kernel).unwrap()
        })
    };
    assert_eq!(color(&checker, &checker), 0.0);
    assert_eq!(color(&checker, &inverse), color(&inverse, &checker));
    let raw = checker.data().iter().zip(inverse.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / checker.len() as f64;
    assert!(color(&checker, &inverse) < 1e-3 * raw, "{} vs {raw}", color(&checker, &inverse));
}

#[test]
fn untrained_spd_discriminator_sits_at_parity() {
    let disc = SpdDiscriminator::<f64>::new(SpdSpec::default(), 3).unwrap();
    let mut r = rng::stream(44);
    let feats = Tensor::from_fn(&[3, 32, 6, 6], |_| rng::normal(&mut r));
    let other = Tensor::from_fn(&[3, 32, 6, 6], |_| rng::normal(&mut r));
    let mut g = Graph::new();
    let (a, b) = (g.input(feats), g.input(other));
    let (ga, gb) = (gram(&mut g, a, DEFAULT_RIDGE).unwrap(), gram(&mut g, b, DEFAULT_RIDGE).unwrap());
    let (d, gl) = spd_gan_loss(&mut g, &disc, ga, gb, GeneratorLoss::NonSaturating).unwrap();
    assert!((g.value(d).data()[0] - 2.0 * LN2).abs() < 1e-12);
    assert!((g.value(gl).data()[0] - LN2).abs() < 1e-12);
    let (same, _) = spd_gan_loss(&mut g, &disc, ga, ga, GeneratorLoss::NonSaturating).unwrap();
    assert!(g.value(same).data()[0] >= 2.0 * LN2 * (1.0 - 1e-6));
}

#[test]
fn spd_loss_rejects_mismatched_grams() {
    let disc = SpdDiscriminator::<f64>::new(SpdSpec::default(), 3).unwrap();
    let mut g = Graph::new();
    let a = g.input(Tensor::from_fn(&[2, 32, 32], |i| if i % 33 == 0 { 1.0 } else { 0.0 }));
    let b = g.input(Tensor::from_fn(&[3, 32, 32], |i| if i % 33 == 0 { 1.0 } else { 0.0 }));
    assert!(spd_gan_loss(&mut g, &disc, a, b, GeneratorLoss::NonSaturating).is_err());
}

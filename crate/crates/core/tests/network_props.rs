use nalgebra::DMatrix;
use spdgan_core::networks::*;
use spdgan_core::nn::{power_iterate, Mode, NormKind, NormSpec};
use spdgan_core::params::AdamConfig;
use spdgan_core::rng;
use spdgan_core::{Graph, Tensor};

fn svd_sigma(w: &Tensor<f64>) -> f64 {
    let rows = w.shape()[0];
    let m = DMatrix::from_row_slice(rows, w.len() / rows, w.data());
    m.singular_values().max()
}

fn normalized_sigmas(d: &mut PatchDiscriminator<f64>) -> Vec<f64> {
    let layers = d.layers.clone();
    layers
        .iter()
        .map(|conv| {
            let sn = conv.sn.expect("spectral layer");
            let est = power_iterate(&mut d.store, conv.w, sn, 0);
            svd_sigma(&d.store.value(conv.w).map(|v| v / est.sigma))
        })
        .collect()
}

#[test]
fn spectral_norm_tracks_svd_through_updates() {
    let mut d = PatchDiscriminator::<f64>::new(PatchSpec::default(), 7).unwrap();
    let mut r = rng::stream(8);
    for s in normalized_sigmas(&mut d) {
        assert!((s - 1.0).abs() <= 1e-3, "initial σ {s}");
    }
    let adam = AdamConfig::with_lr(3e-5);
    for step in 0..25 {
        let mut g = Graph::new();
        let gray = g.input(Tensor::from_fn(&[2, 1, 32, 32], |_| rng::normal(&mut r)));
        let color = g.input(Tensor::from_fn(&[2, 3, 32, 32], |_| rng::normal(&mut r)));
        let y = d.forward(&mut g, gray, color, Mode::Train).unwrap();
        let loss = g.mean(y);
        g.backward(loss).unwrap().accumulate_into(&mut d.store).unwrap();
        d.store.adam_step_all(&adam);
        if step % 5 == 4 {
            for (i, s) in normalized_sigmas(&mut d).into_iter().enumerate() {
                assert!((s - 1.0).abs() <= 1e-3, "step {step}, layer {}: σ {s}", i + 1);
            }
        }
    }
}

#[test]
fn score_map_geometry() {
    let mut d = PatchDiscriminator::<f32>::new(PatchSpec::default(), 1).unwrap();
    let mut g = Graph::new();
    let gray = g.input(Tensor::zeros(&[1, 1, 256, 256]));
    let color = g.input(Tensor::zeros(&[1, 3, 256, 256]));
    let y = d.forward(&mut g, gray, color, Mode::Eval).unwrap();
    assert_eq!(g.shape(y), &[1, 1, 30, 30]);
    assert!(g.value(y).data().iter().all(|&v| v > 0.0 && v < 1.0));
}

#[test]
fn discriminator_rejects_wrong_channel_count() {
    let mut d = PatchDiscriminator::<f64>::new(PatchSpec::default(), 1).unwrap();
    let mut g = Graph::new();
    let gray = g.input(Tensor::zeros(&[1, 1, 32, 32]));
    let color = g.input(Tensor::zeros(&[1, 2, 32, 32]));
    assert!(d.forward(&mut g, gray, color, Mode::Eval).is_err());
}

#[test]
fn generator_keeps_resolution_and_range() {
    let spec = GeneratorSpec { base_width: 8, residual_blocks: 3, ..Default::default() };
    let mut gen = Generator::<f32>::new(spec, 2).unwrap();
    let mut r = rng::stream(3);
    let x = Tensor::from_fn(&[2, 1, 24, 16], |_| rng::uniform(&mut r, -1.0, 1.0) as f32);
    let y = gen.run(&x, Mode::Eval).unwrap();
    assert_eq!(y.shape(), &[2, 3, 24, 16]);
    assert!(y.data().iter().all(|v| v.abs() < 1.0));
    assert_eq!(y, gen.run(&x, Mode::Eval).unwrap());
    assert!(gen.run(&Tensor::zeros(&[1, 1, 10, 12]), Mode::Eval).is_err());
}

#[test]
fn spectral_generator_is_refused() {
    let spec = GeneratorSpec { norm: NormSpec::new(NormKind::Spectral), ..Default::default() };
    assert!(Generator::<f32>::new(spec, 1).is_err());
}

#[test]
fn zero_residual_branches_are_identity() {
    // With zeroed second convolutions every block passes its input through,
    // so the first convolution of each block cannot affect the output.
    let spec = GeneratorSpec { base_width: 4, residual_blocks: 2, zero_init_residual: true, ..Default::default() };
    let mut gen = Generator::<f64>::new(spec, 5).unwrap();
    let mut r = rng::stream(6);
    let x = Tensor::from_fn(&[1, 1, 8, 8], |_| rng::normal(&mut r));
    let before = gen.run(&x, Mode::Eval).unwrap();
    for i in 0..2 {
        let id = gen.store.find(&format!("gen.res{i}.a.conv.weight")).unwrap();
        gen.store.get_mut(id).value.data_mut().iter_mut().for_each(|v| *v = 3.0 * *v + 0.1);
    }
    assert_eq!(before, gen.run(&x, Mode::Eval).unwrap());
}

#[test]
fn decode_maps_tanh_range_onto_lab() {
    let mut g = Graph::<f64>::new();
    let t = g.input(Tensor::new(&[1, 3, 1, 2], vec![-1.0, 1.0, -1.0, 1.0, 0.0, 0.5]).unwrap());
    let lab = decode_lab(&mut g, t).unwrap();
    assert_eq!(g.value(lab).data(), &[0.0, 100.0, -110.0, 110.0, 0.0, 55.0]);
}

/// Spectral normalization bounds the reshaped kernel, not the convolution:
/// each input pixel feeds at most ⌈k/s⌉² output positions, so the operator
/// norm is at most ⌈k/s⌉.
#[test]
fn spectral_layers_obey_the_overlap_bound() {
    let mut d = PatchDiscriminator::<f64>::new(PatchSpec::default(), 11).unwrap();
    let mut r = rng::stream(12);
    let layers = d.layers.clone();
    let mut c_in = 4;
    let mut side = 64;
    for (i, conv) in layers.iter().enumerate() {
        let est = power_iterate(&mut d.store, conv.w, conv.sn.unwrap(), 0);
        let w = d.store.value(conv.w).map(|v| v / est.sigma);
        let mut worst = 0.0f64;
        for _ in 0..5 {
            let diff = Tensor::from_fn(&[1, c_in, side, side], |_| rng::normal(&mut r));
            let mut g = Graph::new();
            let (x, wv) = (g.input(diff.clone()), g.input(w.clone()));
            let y = g.conv2d(x, wv, None, conv.stride, conv.pad).unwrap();
            worst = worst.max(g.value(y).dot(g.value(y)).sqrt() / diff.dot(&diff).sqrt());
        }
        let overlap = 4usize.div_ceil(conv.stride) as f64;
        assert!(worst <= overlap, "layer {}: gain {worst}", i + 1);
        c_in = w.shape()[0];
        side = (side + 2 - 4) / conv.stride + 1;
    }
}

use std::fs;

use spdgan::config::TrainConfig;
use spdgan::data::Dataset;
use spdgan::formats::Checkpoint;
use spdgan::train::{train, train_on, Models, RunOptions};
use spdgan_core::colormetrics::{colorfulness, psnr, ssim};
use spdgan_core::losses::{LossWeights, ObjectiveTerms};
use spdgan_core::nn::Mode;
use spdgan_core::Tensor;

fn tiny(id: &str) -> TrainConfig {
    let mut c = TrainConfig::default();
    for (k, v) in [
        ("image_size", "32"),
        ("train_images", "8"),
        ("heldout_images", "3"),
        ("epochs", "1"),
        ("gen_width", "8"),
        ("residual_blocks", "2"),
    ] {
        c.set(k, v).unwrap();
    }
    c.run_id = id.into();
    c
}

/// The objective as the tape assembles it, replayed in single precision.
fn replay(t: &ObjectiveTerms, w: &LossWeights) -> f32 {
    let mut multi = w.lambda_i as f32 * t.adv_pixel as f32;
    if let Some(s) = t.adv_spd {
        multi += w.lambda_spd as f32 * s as f32;
    }
    let mut total = multi + w.lambda_l1 as f32 * t.l1 as f32;
    if let Some(c) = t.color {
        total += w.lambda_color as f32 * c as f32;
    }
    total
}

#[test]
fn one_epoch_checkpoint_reloads_to_identical_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny("reload");
    let (rec, mut models) = train(&cfg, &RunOptions { out_dir: Some(dir.path().into()), verbose: false }).unwrap();
    assert_eq!(rec.instrumentation.steps, 2);
    assert!(rec.all_finite());
    let ck = dir.path().join("final.spdg");
    assert_eq!(rec.checkpoints, vec![ck.clone()]);
    for f in ["losses.csv", "metrics.csv", "manifest.txt"] {
        assert!(dir.path().join(f).is_file(), "{f} missing");
    }

    let (cfg2, mut loaded) = Models::load(&ck).unwrap();
    assert_eq!(cfg2, cfg);
    let x = Tensor::from_fn(&[2, 1, 32, 32], |i| ((i as f32) * 0.011).sin());
    assert_eq!(models.gen.run(&x, Mode::Eval).unwrap(), loaded.gen.run(&x, Mode::Eval).unwrap());

    let color = Tensor::from_fn(&[2, 3, 32, 32], |i| ((i as f32) * 0.007).cos() * 0.5);
    let score = |m: &mut Models| {
        let mut g = spdgan_core::Graph::new();
        let (a, b) = (g.input(x.clone()), g.input(color.clone()));
        let y = m.patch.forward(&mut g, a, b, Mode::Eval).unwrap();
        g.value(y).clone()
    };
    assert_eq!(score(&mut models), score(&mut loaded));

    // A second save of the reloaded networks is byte-identical.
    assert_eq!(loaded.checkpoint(&cfg2).to_bytes(), fs::read(&ck).unwrap());
}

#[test]
fn same_seed_gives_identical_files() {
    let cfg = tiny("det");
    let run = || {
        let dir = tempfile::tempdir().unwrap();
        train(&cfg, &RunOptions { out_dir: Some(dir.path().into()), verbose: false }).unwrap();
        let read = |f: &str| fs::read(dir.path().join(f)).unwrap();
        (read("losses.csv"), read("metrics.csv"), read("final.spdg"))
    };
    assert_eq!(run(), run());
}

#[test]
fn ablation_flags_shape_the_objective() {
    let data = Dataset::synthetic(42, 8, 0, 32);
    let w = LossWeights::default();
    for (spd, color) in [(false, false), (true, false), (true, true)] {
        let mut cfg = tiny("abl");
        cfg.enable_spd_disc = spd;
        cfg.enable_color_loss = color;
        let (rec, _) = train_on(&cfg, &data, &RunOptions::default()).unwrap();
        assert_eq!(rec.instrumentation.gram_ops == 0, !spd);
        for (terms, objective) in &rec.audit {
            assert_eq!(terms.adv_spd.is_some(), spd);
            assert_eq!(terms.color.is_some(), color);
            assert_eq!(replay(terms, &w) as f64, *objective);
        }
    }
}

#[test]
fn too_few_images_for_a_batch_is_an_error() {
    let mut cfg = tiny("small");
    cfg.train_images = 3;
    assert!(train(&cfg, &RunOptions::default()).is_err());
}

#[test]
fn checkpoint_from_another_architecture_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny("arch");
    let (_, models) = spdgan::train::train(&cfg, &RunOptions::default()).unwrap();
    let mut ck = models.checkpoint(&cfg);
    let mut other = cfg.clone();
    other.residual_blocks = 3;
    ck.config = other.to_text();
    let p = dir.path().join("x.spdg");
    ck.save(&p).unwrap();
    let err = Models::load(&p).unwrap_err().to_string();
    assert!(err.contains("missing") || err.contains("record"), "{err}");
    assert!(Checkpoint::load(&dir.path().join("absent.spdg")).is_err());
}

#[test]
fn held_out_metrics_match_direct_computation() {
    let data = Dataset::synthetic(7, 8, 3, 32);
    let cfg = tiny("metrics");
    let (rec, mut models) = train_on(&cfg, &data, &RunOptions::default()).unwrap();
    let m = rec.metrics.last().unwrap();
    let grays: Vec<_> = data.heldout.iter().map(|s| s.gray.clone()).collect();
    let pred = spdgan::train::colorize_with(&mut models.gen, &grays).unwrap();
    let mean = |f: &dyn Fn(usize) -> f64| (0..3).map(f).sum::<f64>() / 3.0;
    assert!((m.psnr - mean(&|i| psnr(&data.heldout[i].color, &pred[i]).unwrap())).abs() < 1e-12);
    assert!((m.ssim - mean(&|i| ssim(&data.heldout[i].color, &pred[i]).unwrap())).abs() < 1e-12);
    assert!((m.colorfulness - mean(&|i| colorfulness(&pred[i]))).abs() < 1e-12);
    assert!(m.fid.is_finite() && m.fid >= -1e-8);
}

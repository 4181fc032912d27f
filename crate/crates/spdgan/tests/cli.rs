use std::path::Path;
use std::process::{Command, Output};

use spdgan::formats::{read_png, write_png, Csv};
use spdgan_core::colormetrics::RgbImage8;

fn spdgan(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_spdgan")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = spdgan(args);
    assert!(out.status.success(), "{args:?} failed:\n{}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

const TINY: [&str; 12] = [
    "--set", "image_size=32", "--set", "train_images=8", "--set", "heldout_images=3", "--set", "epochs=1", "--set", "gen_width=8", "--set",
    "residual_blocks=2",
];

fn train_tiny(root: &Path, seed: &str) -> std::path::PathBuf {
    let mut args = vec!["--seed", seed, "train", "--out", root.to_str().unwrap(), "--set", "run_id=t"];
    args.extend(TINY);
    ok(&args);
    root.join("t")
}

fn pattern(w: usize, h: usize) -> RgbImage8 {
    RgbImage8::new(w, h, (0..w * h * 3).map(|i| ((i * 37) % 251) as u8).collect()).unwrap()
}

#[test]
fn train_writes_run_files_and_honors_seed() {
    let root = tempfile::tempdir().unwrap();
    let run = train_tiny(root.path(), "9");
    let manifest = std::fs::read_to_string(run.join("manifest.txt")).unwrap();
    assert!(manifest.lines().any(|l| l == "seed = 9"), "{manifest}");
    let losses = Csv::parse(&std::fs::read_to_string(run.join("losses.csv")).unwrap());
    assert_eq!(losses.header[..2], ["run_id", "epoch"]);
    assert_eq!(losses.rows.len(), 1);
    let metrics = Csv::parse(&std::fs::read_to_string(run.join("metrics.csv")).unwrap());
    assert_eq!(metrics.header, ["run_id", "epoch", "psnr", "ssim", "fid", "colorfulness"]);
}

#[test]
fn colorize_keeps_size_and_is_repeatable() {
    let root = tempfile::tempdir().unwrap();
    let run = train_tiny(root.path(), "3");
    let ck = run.join("final.spdg");
    let input = root.path().join("in");
    std::fs::create_dir_all(&input).unwrap();
    write_png(&input.join("a.png"), &pattern(40, 24)).unwrap();
    write_png(&input.join("b.png"), &pattern(32, 32)).unwrap();
    for out in ["o1", "o2"] {
        let o = root.path().join(out);
        ok(&["colorize", "--ckpt", ck.to_str().unwrap(), "--in", input.to_str().unwrap(), "--out", o.to_str().unwrap()]);
    }
    for name in ["a.png", "b.png"] {
        let a = read_png(&root.path().join("o1").join(name)).unwrap();
        let b = read_png(&root.path().join("o2").join(name)).unwrap();
        let src = read_png(&input.join(name)).unwrap();
        assert_eq!((a.width, a.height), (src.width, src.height));
        assert_eq!(a, b);
    }
    // Sizes not divisible by 4 are refused.
    write_png(&input.join("c.png"), &pattern(30, 30)).unwrap();
    let bad = spdgan(&["colorize", "--ckpt", ck.to_str().unwrap(), "--in", input.join("c.png").to_str().unwrap(), "--out", "/tmp/unused"]);
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn ground_truth_against_itself() {
    let root = tempfile::tempdir().unwrap();
    let data = root.path().join("gt");
    std::fs::create_dir_all(&data).unwrap();
    for (i, seed) in [11u64, 12, 13].iter().enumerate() {
        write_png(&data.join(format!("{i}.png")), &spdgan::data::synthetic_image(*seed, 32)).unwrap();
    }
    let out = root.path().join("eval");
    let d = data.to_str().unwrap();
    let text = ok(&["eval", "--data", d, "--pred", d, "--out", out.to_str().unwrap()]);
    assert!(text.contains("PSNR"), "{text}");
    let csv = Csv::parse(&std::fs::read_to_string(out.join("metrics.csv")).unwrap());
    let row = &csv.rows[0];
    assert_eq!(row[2], "inf");
    assert_eq!(row[3].parse::<f64>().unwrap(), 1.0);
    assert!(row[4].parse::<f64>().unwrap().abs() < 1e-8, "{row:?}");
}

#[test]
fn gradcheck_layer_scope_passes() {
    let text = ok(&["gradcheck", "--scope", "layer", "--seeds", "1"]);
    let suites: Vec<&str> = text.lines().skip(1).take_while(|l| !l.starts_with("op ")).collect();
    assert!(suites.len() >= 10, "{text}");
    assert!(suites.iter().all(|l| l.ends_with(" ok")), "{text}");
}

#[test]
fn bad_inputs_exit_with_code_two() {
    assert_eq!(spdgan(&["train", "--set", "no_such_key=1"]).status.code(), Some(2));
    assert_eq!(spdgan(&["train", "--set", "gen_norm=spectral"]).status.code(), Some(2));
    assert_eq!(spdgan(&["colorize", "--ckpt", "/nonexistent.spdg", "--in", "x.png", "--out", "o"]).status.code(), Some(2));
    assert_eq!(spdgan(&["eval", "--data", "synthetic"]).status.code(), Some(2));
}

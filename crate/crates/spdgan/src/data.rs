//! Synthetic color images and their gray counterparts.

use std::path::Path;

use spdgan_core::colormetrics::{rgb_to_lab, RgbImage8};
use spdgan_core::rng::{self, Stream};
use spdgan_core::tensor::Tensor;

use crate::error::Result;
use crate::formats;

/// Shape colors, chosen so every entry has a distinct 601 luma (≥ 10 levels
/// apart); the gray value alone then identifies a flat region's color.
pub const PALETTE: [[u8; 3]; 8] = [
    [40, 40, 150],   // navy, luma 52
    [170, 30, 40],   // crimson, luma 73
    [30, 140, 60],   // green, luma 98
    [150, 80, 190],  // violet, luma 113
    [230, 90, 30],   // orange, luma 125
    [60, 170, 220],  // sky, luma 143
    [150, 210, 80],  // lime, luma 177
    [250, 220, 60],  // yellow, luma 211
];

/// One sample: ground-truth color image and its 601-luma gray version.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub color: RgbImage8,
    pub gray: RgbImage8,
}

impl Sample {
    pub fn new(color: RgbImage8) -> Self {
        let gray = color.to_gray();
        Sample { color, gray }
    }

    /// Tanh-coded lightness of the gray image, `1×1×H×W`.
    pub fn gray_tensor(&self) -> Tensor<f32> {
        rgb_to_lab(&self.gray).lightness_tanh()
    }

    /// Tanh-coded L*a*b* of the color image, `1×3×H×W`.
    pub fn lab_tensor(&self) -> Tensor<f32> {
        rgb_to_lab(&self.color).to_tanh()
    }
}

#[derive(Debug, Clone, Copy)]
enum Shape {
    Rect { x0: f64, y0: f64, x1: f64, y1: f64 },
    Circle { cx: f64, cy: f64, r: f64 },
    Triangle { p: [(f64, f64); 3] },
}

impl Shape {
    fn contains(&self, x: f64, y: f64) -> bool {
        match *self {
            Shape::Rect { x0, y0, x1, y1 } => x >= x0 && x <= x1 && y >= y0 && y <= y1,
            Shape::Circle { cx, cy, r } => (x - cx).powi(2) + (y - cy).powi(2) <= r * r,
            Shape::Triangle { p } => {
                let edge = |a: (f64, f64), b: (f64, f64)| (b.0 - a.0) * (y - a.1) - (b.1 - a.1) * (x - a.0);
                let (d0, d1, d2) = (edge(p[0], p[1]), edge(p[1], p[2]), edge(p[2], p[0]));
                (d0 >= 0.0 && d1 >= 0.0 && d2 >= 0.0) || (d0 <= 0.0 && d1 <= 0.0 && d2 <= 0.0)
            }
        }
    }
}

fn shade(c: [u8; 3], f: f64) -> [f64; 3] {
    c.map(|v| v as f64 * f)
}

/// A gradient background in one palette color (shaded from 100% to 85%
/// along a random direction) with one to three solid shapes in other
/// palette colors.
pub fn synthetic_image(seed: u64, size: usize) -> RgbImage8 {
    let mut r: Stream = rng::stream(seed);
    let s = size as f64;
    let bg = (rng::uniform(&mut r, 0.0, 8.0) as usize).min(7);
    let angle = rng::uniform(&mut r, 0.0, std::f64::consts::TAU);
    let (dx, dy) = (angle.cos(), angle.sin());
    let count = 1 + (rng::uniform(&mut r, 0.0, 3.0) as usize).min(2);
    let mut shapes = Vec::with_capacity(count);
    for _ in 0..count {
        let mut c = (rng::uniform(&mut r, 0.0, 7.0) as usize).min(6);
        if c >= bg {
            c += 1;
        }
        let kind = rng::uniform(&mut r, 0.0, 3.0) as usize;
        let cx = rng::uniform(&mut r, 0.15, 0.85) * s;
        let cy = rng::uniform(&mut r, 0.15, 0.85) * s;
        let ext = rng::uniform(&mut r, 0.12, 0.3) * s;
        let shape = match kind {
            0 => {
                let aspect = rng::uniform(&mut r, 0.5, 1.5);
                Shape::Rect { x0: cx - ext * aspect, y0: cy - ext / aspect, x1: cx + ext * aspect, y1: cy + ext / aspect }
            }
            1 => Shape::Circle { cx, cy, r: ext },
            _ => {
                let rot = rng::uniform(&mut r, 0.0, std::f64::consts::TAU);
                let p = std::array::from_fn(|k| {
                    let a = rot + k as f64 * std::f64::consts::TAU / 3.0;
                    (cx + ext * 1.3 * a.cos(), cy + ext * 1.3 * a.sin())
                });
                Shape::Triangle { p }
            }
        };
        shapes.push((shape, PALETTE[c]));
    }
    let mut data = Vec::with_capacity(size * size * 3);
    for y in 0..size {
        for x in 0..size {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let t = ((px / s - 0.5) * dx + (py / s - 0.5) * dy + 0.71) / 1.42;
            let mut rgb = shade(PALETTE[bg], 1.0 - 0.15 * t.clamp(0.0, 1.0));
            for (shape, c) in &shapes {
                if shape.contains(px, py) {
                    rgb = shade(*c, 1.0);
                }
            }
            data.extend(rgb.map(|v| v.round().clamp(0.0, 255.0) as u8));
        }
    }
    RgbImage8 { width: size, height: size, data }
}

/// Train and held-out splits.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub train: Vec<Sample>,
    pub heldout: Vec<Sample>,
}

impl Dataset {
    /// Image `i` depends only on `(seed, i, size)`, so the splits are
    /// stable when either count changes.
    pub fn synthetic(seed: u64, train: usize, heldout: usize, size: usize) -> Self {
        let make = |i: usize| Sample::new(synthetic_image(rng::derive(seed, &format!("image-{i}")), size));
        Dataset { train: (0..train).map(make).collect(), heldout: (train..train + heldout).map(make).collect() }
    }

    /// PNG files of a directory in name order, resized to `size`; the last
    /// `heldout` files form the held-out split.
    pub fn from_dir(dir: &Path, heldout: usize, size: usize) -> Result<Self> {
        let mut images: Vec<Sample> = formats::list_pngs(dir)?
            .iter()
            .map(|p| formats::read_png_resized(p, size).map(Sample::new))
            .collect::<Result<_>>()?;
        let split = images.len().saturating_sub(heldout);
        let held = images.split_off(split);
        Ok(Dataset { train: images, heldout: held })
    }
}

/// Fixed-seed permutation of `0..n` for one epoch.
pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut idx: Vec<usize> = (0..n).collect();
    let mut r = rng::stream(rng::derive(seed, &format!("epoch-{epoch}")));
    idx.shuffle(&mut r);
    idx
}

//! Minimal line charts rendered straight to PNG. The raw series are always
//! written next to the image as CSV, so nothing depends on reading the plot.

use std::path::Path;

use spdgan_core::colormetrics::RgbImage8;

use crate::error::Result;
use crate::formats::{num, write_png, Csv};

pub const SERIES_COLORS: [[u8; 3]; 6] = [[31, 119, 180], [255, 127, 14], [44, 160, 44], [214, 39, 40], [148, 103, 189], [140, 86, 75]];

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

struct Canvas {
    img: RgbImage8,
}

impl Canvas {
    fn new(w: usize, h: usize) -> Self {
        Canvas { img: RgbImage8::filled(w, h, [255, 255, 255]) }
    }

    fn put(&mut self, x: i64, y: i64, c: [u8; 3]) {
        if x >= 0 && y >= 0 && (x as usize) < self.img.width && (y as usize) < self.img.height {
            let i = 3 * (y as usize * self.img.width + x as usize);
            self.img.data[i..i + 3].copy_from_slice(&c);
        }
    }

    /// Bresenham line, two pixels thick.
    fn line(&mut self, (x0, y0): (i64, i64), (x1, y1): (i64, i64), c: [u8; 3]) {
        let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
        let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
        let (mut x, mut y, mut err) = (x0, y0, dx + dy);
        loop {
            self.put(x, y, c);
            self.put(x + 1, y, c);
            self.put(x, y + 1, c);
            if x == x1 && y == y1 {
                break;
            }
            let e2 = 2 * err;
            if e2 >= dy {
                err += dy;
                x += sx;
            }
            if e2 <= dx {
                err += dx;
                y += sy;
            }
        }
    }

    fn rect(&mut self, x: i64, y: i64, w: i64, h: i64, c: [u8; 3]) {
        for yy in y..y + h {
            for xx in x..x + w {
                self.put(xx, yy, c);
            }
        }
    }
}

/// Renders the series on shared axes (640×400). Non-finite points are
/// skipped. Each series gets a legend swatch at the top right, in order.
pub fn render(series: &[Series]) -> RgbImage8 {
    let (w, h, m) = (640i64, 400i64, 40i64);
    let mut cv = Canvas::new(w as usize, h as usize);
    let finite = series.iter().flat_map(|s| s.points.iter()).filter(|(x, y)| x.is_finite() && y.is_finite());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in finite {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 - x0 < 1e-12 {
        x1 = x0 + 1.0;
    }
    if y1 - y0 < 1e-12 {
        y0 -= 0.5;
        y1 += 0.5;
    }
    let px = |x: f64| m + ((x - x0) / (x1 - x0) * (w - 2 * m) as f64).round() as i64;
    let py = |y: f64| h - m - ((y - y0) / (y1 - y0) * (h - 2 * m) as f64).round() as i64;
    let axis = [60, 60, 60];
    cv.line((m, h - m), (w - m, h - m), axis);
    cv.line((m, m), (m, h - m), axis);
    for k in 1..5 {
        let y = m + k * (h - 2 * m) / 5;
        for x in (m..w - m).step_by(6) {
            cv.put(x, y, [210, 210, 210]);
        }
    }
    for (i, s) in series.iter().enumerate() {
        let c = SERIES_COLORS[i % SERIES_COLORS.len()];
        let pts: Vec<(i64, i64)> = s.points.iter().filter(|(x, y)| x.is_finite() && y.is_finite()).map(|&(x, y)| (px(x), py(y))).collect();
        for p in pts.windows(2) {
            cv.line(p[0], p[1], c);
        }
        if let [p] = pts.as_slice() {
            cv.rect(p.0 - 2, p.1 - 2, 5, 5, c);
        }
        cv.rect(w - m - 16, m + 4 + 14 * i as i64, 12, 10, c);
    }
    cv.img
}

/// Long-format CSV `series,x,y`.
pub fn series_csv(series: &[Series]) -> Csv {
    let mut c = Csv::new(&["series", "x", "y"]);
    for s in series {
        for &(x, y) in &s.points {
            c.push(vec![s.label.clone(), num(x), num(y)]);
        }
    }
    c
}

/// Writes `<stem>.png` and `<stem>.csv` into `dir`.
pub fn save(dir: &Path, stem: &str, series: &[Series]) -> Result<()> {
    write_png(&dir.join(format!("{stem}.png")), &render(series))?;
    series_csv(series).save(&dir.join(format!("{stem}.csv")))
}

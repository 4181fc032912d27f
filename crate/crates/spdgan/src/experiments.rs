//! Experiment runners built on [`train`](crate::train): the normalization
//! grid, the SPD bloc-count study and the three-way ablation.

use std::path::{Path, PathBuf};

use spdgan_core::nn::NormKind;

use crate::config::TrainConfig;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::formats::{num, write_png, write_text, Csv};
use crate::plot::{self, Series};
use crate::train::{load_dataset, metric_fields, train_on, MetricRow, RunOptions, RunRecord, Trainer};

/// Text table with one row per method, in the layout
/// `Method | PSNR ↑ | SSIM ↑ | FID ↓ | Colorfulness ↑`.
pub fn summary_table(rows: &[(String, MetricRow)]) -> String {
    let width = rows.iter().map(|(m, _)| m.len()).max().unwrap_or(0).max(6);
    let mut s = format!("{:<width$} | {:>9} | {:>7} | {:>9} | {:>14}\n", "Method", "PSNR ↑", "SSIM ↑", "FID ↓", "Colorfulness ↑");
    s.push_str(&format!("{}-|-{}-|-{}-|-{}-|-{}\n", "-".repeat(width), "-".repeat(9), "-".repeat(7), "-".repeat(9), "-".repeat(14)));
    for (m, r) in rows {
        s.push_str(&format!("{:<width$} | {:>9.3} | {:>7.4} | {:>9.3} | {:>14.3}\n", m, r.psnr, r.ssim, r.fid, r.colorfulness));
    }
    s
}

fn run_dir(root: &Option<PathBuf>, id: &str) -> RunOptions {
    RunOptions { out_dir: root.as_ref().map(|r| r.join(id)), verbose: false }
}

fn final_metrics(rec: &RunRecord) -> Result<MetricRow> {
    rec.metrics.last().copied().ok_or_else(|| Error::config("run produced no held-out metrics (need at least 2 held-out images)"))
}

#[derive(Debug, Clone)]
pub struct GridCell {
    pub gen_norm: NormKind,
    pub disc_norm: NormKind,
    pub metrics: MetricRow,
}

/// Generator normalizations exclude spectral normalization, which is
/// reserved for discriminators.
pub const GRID_GEN: [NormKind; 2] = [NormKind::Batch, NormKind::Instance];
pub const GRID_DISC: [NormKind; 3] = [NormKind::Batch, NormKind::Instance, NormKind::Spectral];

pub fn norm_grid(base: &TrainConfig, out: Option<PathBuf>, verbose: bool) -> Result<Vec<GridCell>> {
    let data = load_dataset(base)?;
    let mut cells = Vec::new();
    for g in GRID_GEN {
        for d in GRID_DISC {
            let mut cfg = base.clone();
            cfg.gen_norm = g;
            cfg.disc_norm = d;
            cfg.run_id = format!("{}-G{}-D{}", base.run_id, g.as_str(), d.as_str());
            if verbose {
                eprintln!("norm grid: {}", cfg.run_id);
            }
            let (rec, _) = train_on(&cfg, &data, &run_dir(&out, &cfg.run_id))?;
            cells.push(GridCell { gen_norm: g, disc_norm: d, metrics: final_metrics(&rec)? });
        }
    }
    if let Some(dir) = &out {
        grid_csv(&cells).save(&dir.join("norm_grid.csv"))?;
        let rows: Vec<_> = cells.iter().map(|c| (format!("G:{} / D:{}", c.gen_norm.as_str(), c.disc_norm.as_str()), c.metrics)).collect();
        write_text(&dir.join("norm_grid.txt"), &summary_table(&rows))?;
    }
    Ok(cells)
}

pub fn grid_csv(cells: &[GridCell]) -> Csv {
    let mut c = Csv::new(&["gen_norm", "disc_norm", "psnr", "ssim", "fid", "colorfulness"]);
    for cell in cells {
        let m = &cell.metrics;
        c.push(vec![cell.gen_norm.as_str().into(), cell.disc_norm.as_str().into(), num(m.psnr), num(m.ssim), num(m.fid), num(m.colorfulness)]);
    }
    c
}

/// One D_SPD adversarial-loss curve per stack depth.
pub fn bloc_study(base: &TrainConfig, out: Option<PathBuf>, verbose: bool) -> Result<Vec<Series>> {
    if base.spd_dims.len() != 4 {
        return Err(Error::config("the bloc study needs a full 3-bloc spd_dims list to truncate"));
    }
    let data = load_dataset(base)?;
    let mut curves = Vec::new();
    for blocs in 1..=3 {
        let mut cfg = base.clone();
        cfg.enable_spd_disc = true;
        cfg.spd_dims.truncate(blocs + 1);
        cfg.run_id = format!("{}-{blocs}bloc", base.run_id);
        if verbose {
            eprintln!("bloc study: {}", cfg.run_id);
        }
        let (rec, _) = train_on(&cfg, &data, &run_dir(&out, &cfg.run_id))?;
        let points = rec.epochs.iter().map(|e| (e.epoch as f64, e.d_spd.unwrap_or(f64::NAN))).collect();
        curves.push(Series { label: format!("{blocs}-bloc"), points });
    }
    if let Some(dir) = &out {
        plot::save(dir, "bloc_study_d_spd", &curves)?;
    }
    Ok(curves)
}

/// The three ablation settings: pixel discriminator only; plus the SPD
/// discriminator; plus the color loss.
pub const ABLATION: [(&str, bool, bool); 3] = [("a", false, false), ("b", true, false), ("c", true, true)];

#[derive(Debug, Clone)]
pub struct AblationRun {
    pub setting: &'static str,
    pub seed: u64,
    pub metrics: MetricRow,
    pub record: RunRecord,
}

#[derive(Debug, Clone)]
pub struct AblationReport {
    pub runs: Vec<AblationRun>,
    /// Median held-out colorfulness per setting, in [`ABLATION`] order.
    pub median_colorfulness: [f64; 3],
}

impl AblationReport {
    /// Setting (c) is at least as colorful as setting (a).
    pub fn trend_holds(&self) -> bool {
        self.median_colorfulness[2] >= self.median_colorfulness[0]
    }

    pub fn text(&self) -> String {
        let mut rows = Vec::new();
        for (i, (name, _, _)) in ABLATION.iter().enumerate() {
            let runs: Vec<_> = self.runs.iter().filter(|r| r.setting == *name).collect();
            let med = |f: fn(&MetricRow) -> f64| median(runs.iter().map(|r| f(&r.metrics)).collect());
            let label = match i {
                0 => "(a) pixel discriminator",
                1 => "(b) + SPD discriminator",
                _ => "(c) + SPD discriminator + color loss",
            };
            let m = MetricRow { epoch: runs.first().map_or(0, |r| r.metrics.epoch), psnr: med(|m| m.psnr), ssim: med(|m| m.ssim), fid: med(|m| m.fid), colorfulness: self.median_colorfulness[i] };
            rows.push((label.to_string(), m));
        }
        let mut s = summary_table(&rows);
        s.push_str(&format!(
            "\ncolorfulness (c) ≥ (a): {} ({:.3} vs {:.3}, median over {} seed(s))\n",
            if self.trend_holds() { "holds" } else { "FAILED" },
            self.median_colorfulness[2],
            self.median_colorfulness[0],
            self.runs.len() / 3
        ));
        s
    }
}

pub fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Trains the three settings for every seed. Setting (a) must never record
/// a Gram matrix; that is checked on the tapes and reported as an error.
pub fn ablation(base: &TrainConfig, seeds: &[u64], out: Option<PathBuf>, verbose: bool) -> Result<AblationReport> {
    let mut runs = Vec::new();
    for &seed in seeds {
        let mut seeded = base.clone();
        seeded.seed = seed;
        let data = load_dataset(&seeded)?;
        for (name, spd, color) in ABLATION {
            let mut cfg = seeded.clone();
            cfg.enable_spd_disc = spd;
            cfg.enable_color_loss = color;
            cfg.run_id = format!("{}-{name}-seed{seed}", base.run_id);
            if verbose {
                eprintln!("ablation: {}", cfg.run_id);
            }
            let opts = run_dir(&out, &cfg.run_id);
            let (rec, models) = train_on(&cfg, &data, &opts)?;
            if !spd && rec.instrumentation.gram_ops != 0 {
                return Err(Error::config(format!("{}: {} Gram matrices recorded without the SPD discriminator", cfg.run_id, rec.instrumentation.gram_ops)));
            }
            if let Some(dir) = &opts.out_dir {
                write_samples(dir, &cfg, models, &data)?;
            }
            runs.push(AblationRun { setting: name, seed, metrics: final_metrics(&rec)?, record: rec });
        }
    }
    let median_colorfulness = std::array::from_fn(|i| {
        median(runs.iter().filter(|r| r.setting == ABLATION[i].0).map(|r| r.metrics.colorfulness).collect())
    });
    let report = AblationReport { runs, median_colorfulness };
    if let Some(dir) = &out {
        let mut c = Csv::new(&RunRecord::METRIC_HEADER);
        for r in &report.runs {
            c.push(metric_fields(&r.record.config.run_id, &r.metrics));
        }
        c.save(&dir.join("ablation_metrics.csv"))?;
        write_text(&dir.join("ablation.txt"), &report.text())?;
    }
    Ok(report)
}

/// Up to four held-out colorizations next to their gray inputs and ground
/// truth.
fn write_samples(dir: &Path, cfg: &TrainConfig, models: crate::train::Models, data: &Dataset) -> Result<()> {
    let mut t = Trainer::with_models(cfg.clone(), models)?;
    let take: Vec<_> = data.heldout.iter().take(4).collect();
    let grays: Vec<_> = take.iter().map(|s| s.gray.clone()).collect();
    for (i, (s, c)) in take.iter().zip(t.colorize(&grays)?).enumerate() {
        write_png(&dir.join(format!("sample{i}_gray.png")), &s.gray)?;
        write_png(&dir.join(format!("sample{i}_color.png")), &c)?;
        write_png(&dir.join(format!("sample{i}_truth.png")), &s.color)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn medians() {
        assert_eq!(median(vec![3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(vec![4.0, 1.0]), 2.5);
        assert!(median(vec![]).is_nan());
    }

    #[test]
    fn grid_has_six_cells_without_spectral_generator() {
        assert_eq!(GRID_GEN.len() * GRID_DISC.len(), 6);
        assert!(!GRID_GEN.contains(&NormKind::Spectral));
    }

    #[test]
    fn table_layout() {
        let m = MetricRow { epoch: 1, psnr: 26.174, ssim: 0.964, fid: 3.097, colorfulness: 37.997 };
        let t = summary_table(&[("x".into(), m)]);
        let lines: Vec<_> = t.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[0].starts_with("Method"));
        assert!(lines[2].contains("26.174") && lines[2].contains("0.9640"));
    }
}

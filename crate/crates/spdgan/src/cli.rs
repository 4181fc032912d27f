//! Command-line entry points.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use spdgan_core::gradcheck::{self, Scope};

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::experiments::{self, summary_table};
use crate::formats::{list_pngs, read_png, write_png, write_text, Csv};
use crate::train::{self, metric_fields, metric_row, Models, RunOptions, RunRecord};

#[derive(Debug, Parser)]
#[command(name = "spdgan", version, about = "Grayscale image colorization with pixel and SPD-manifold discriminators")]
pub struct Cli {
    /// Override the seed given in the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model; writes checkpoints, loss and metric CSVs and a run
    /// manifest.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "runs")]
        out: PathBuf,
        /// Extra `key=value` overrides applied after the config file.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Colorize a PNG image or every PNG in a directory.
    Colorize {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Held-out metrics: PSNR, SSIM, FID and colorfulness.
    Eval {
        /// Checkpoint whose generator colorizes the ground truth's gray
        /// versions. Omit when `--pred` is given.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// Directory of ground-truth PNGs, or `synthetic` for the held-out
        /// split described by the checkpoint's config.
        #[arg(long)]
        data: String,
        /// Directory of already colorized PNGs matched to `--data` by name.
        #[arg(long)]
        pred: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference checks of every backward rule; exits 1 on failure.
    Gradcheck {
        /// layer, network or loss (default: all).
        #[arg(long)]
        scope: Option<String>,
        #[arg(long, default_value_t = 5)]
        seeds: u64,
    },
    /// Trains the {batch, instance} × {batch, instance, spectral}
    /// normalization grid.
    NormGrid {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "runs/norm-grid")]
        out: PathBuf,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Trains 1-, 2- and 3-bloc SPD discriminators and plots their losses.
    BlocStudy {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "runs/bloc-study")]
        out: PathBuf,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Trains the three ablation settings for each seed.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "runs/ablation")]
        out: PathBuf,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        /// Number of consecutive seeds starting at the config seed.
        #[arg(long, default_value_t = 3)]
        seeds: u64,
    },
}

fn load_config(path: Option<&Path>, set: &[String], seed: Option<u64>) -> Result<TrainConfig> {
    let mut cfg = match path {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    for kv in set {
        let Some((k, v)) = kv.split_once('=') else {
            return Err(Error::config(format!("--set expects KEY=VALUE, got {kv:?}")));
        };
        cfg.set(k, v)?;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Runs a command and returns the process exit code.
pub fn run(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::Train { config, out, set } => {
            let cfg = load_config(config.as_deref(), &set, cli.seed)?;
            let dir = out.join(&cfg.run_id);
            let (rec, _) = train::train(&cfg, &RunOptions { out_dir: Some(dir.clone()), verbose: true })?;
            if let Some(m) = rec.metrics.last() {
                print!("{}", summary_table(&[(cfg.run_id.clone(), *m)]));
            }
            println!("wrote {}", dir.display());
            Ok(0)
        }
        Command::Colorize { ckpt, input, out } => {
            let (_, mut models) = Models::load(&ckpt)?;
            let files = if input.is_dir() { list_pngs(&input)? } else { vec![input.clone()] };
            for f in &files {
                let img = read_png(f)?;
                let rgb = train::colorize_with(&mut models.gen, std::slice::from_ref(&img))?.remove(0);
                let name = f.file_name().ok_or_else(|| Error::config(format!("{} has no file name", f.display())))?;
                write_png(&out.join(name), &rgb)?;
            }
            println!("colorized {} image(s) into {}", files.len(), out.display());
            Ok(0)
        }
        Command::Eval { ckpt, data, pred, out } => {
            let (rows, run_id) = eval(ckpt.as_deref(), &data, pred.as_deref(), cli.seed)?;
            let table = summary_table(&[(run_id.clone(), rows)]);
            print!("{table}");
            if let Some(dir) = out {
                let mut c = Csv::new(&RunRecord::METRIC_HEADER);
                c.push(metric_fields(&run_id, &rows));
                c.save(&dir.join("metrics.csv"))?;
                write_text(&dir.join("summary.txt"), &table)?;
            }
            Ok(0)
        }
        Command::Gradcheck { scope, seeds } => {
            let scope = scope.map(|s| Scope::parse(&s)).transpose()?;
            let seeds: Vec<u64> = (1..=seeds).collect();
            let report = gradcheck::run(scope, &seeds, None);
            for l in report.lines() {
                println!("{l}");
            }
            Ok(if report.passed() { 0 } else { 1 })
        }
        Command::NormGrid { config, out, set } => {
            let cfg = load_config(config.as_deref(), &set, cli.seed)?;
            experiments::norm_grid(&cfg, Some(out.clone()), true)?;
            print!("{}", std::fs::read_to_string(out.join("norm_grid.txt")).map_err(|e| Error::io(&out, e))?);
            Ok(0)
        }
        Command::BlocStudy { config, out, set } => {
            let cfg = load_config(config.as_deref(), &set, cli.seed)?;
            let curves = experiments::bloc_study(&cfg, Some(out.clone()), true)?;
            for c in &curves {
                let last = c.points.last().map_or(f64::NAN, |p| p.1);
                println!("{}: final D_SPD loss {last:.4}", c.label);
            }
            println!("wrote {}", out.join("bloc_study_d_spd.png").display());
            Ok(0)
        }
        Command::Ablate { config, out, set, seeds } => {
            let cfg = load_config(config.as_deref(), &set, cli.seed)?;
            let seeds: Vec<u64> = (0..seeds).map(|k| cfg.seed + k).collect();
            let report = experiments::ablation(&cfg, &seeds, Some(out), true)?;
            print!("{}", report.text());
            Ok(0)
        }
    }
}

/// Metrics for `eval`: predictions come from `pred` if given, else from the
/// checkpoint's generator.
pub fn eval(ckpt: Option<&Path>, data: &str, pred: Option<&Path>, seed: Option<u64>) -> Result<(train::MetricRow, String)> {
    let loaded = ckpt.map(Models::load).transpose()?;
    let (truth, names) = if data == "synthetic" {
        let Some((cfg, _)) = &loaded else {
            return Err(Error::config("--data synthetic needs --ckpt to describe the split"));
        };
        let mut cfg = cfg.clone();
        if let Some(s) = seed {
            cfg.seed = s;
        }
        let d = train::load_dataset(&cfg)?;
        let names = (0..d.heldout.len()).map(|i| format!("heldout{i:03}.png")).collect();
        (d.heldout.into_iter().map(|s| s.color).collect::<Vec<_>>(), names)
    } else {
        let files = list_pngs(Path::new(data))?;
        let imgs = files.iter().map(|f| read_png(f)).collect::<Result<Vec<_>>>()?;
        let names = files.iter().map(|f| f.file_name().unwrap().to_string_lossy().into_owned()).collect::<Vec<String>>();
        (imgs, names)
    };
    if truth.len() < 2 {
        return Err(Error::config("evaluation needs at least 2 images"));
    }
    let (preds, id) = match (pred, loaded) {
        (Some(dir), _) => {
            let p = names.iter().map(|n| read_png(&dir.join(n))).collect::<Result<Vec<_>>>()?;
            (p, dir.display().to_string())
        }
        (None, Some((cfg, mut models))) => (train::colorize_with(&mut models.gen, &truth)?, cfg.run_id),
        (None, None) => return Err(Error::config("eval needs --ckpt or --pred")),
    };
    Ok((metric_row(0, &truth, &preds)?, id))
}

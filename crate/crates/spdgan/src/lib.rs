//! Training driver, file formats, experiments and command line around
//! `spdgan-core`.

pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod experiments;
pub mod formats;
pub mod plot;
pub mod train;

pub use config::TrainConfig;
pub use error::{Error, Result};

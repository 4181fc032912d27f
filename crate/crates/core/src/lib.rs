//! Numerical core of the SPD-GAN colorizer.
//!
//! Everything here is pure computation over owned buffers: dense symmetric
//! linear algebra, a reverse-mode tensor tape, the layers and networks built
//! on it, the training objectives, and the image quality metrics. File
//! formats, images on disk and the training driver live in the `spdgan`
//! crate.
//!
//! The crate is `no_std` when the default `std` feature is disabled; it only
//! needs `alloc`.
#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod colormetrics;
pub mod error;
pub mod features;
pub mod gradcheck;
pub mod graph;
pub mod linalg;
pub mod losses;
pub mod networks;
pub mod nn;
pub mod params;
pub mod rng;
pub mod scalar;
pub mod spdnet;
pub mod tensor;

pub use error::{Error, Result};
pub use graph::{Fault, Graph, Var};
pub use params::{Param, ParamId, ParamStore};
pub use scalar::Real;
pub use tensor::Tensor;

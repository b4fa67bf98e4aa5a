//! Deformation-field diffusion for longitudinal image series.
//!
//! The crate generates synthetic aging phantoms, trains a conditional
//! denoising-diffusion model whose output is a dense deformation field
//! rather than image intensities, and warps an observed baseline image
//! with sampled fields to fill in missing time points. Everything runs
//! on the CPU through a small reverse-mode autodiff engine.

pub mod error;
pub mod rng;
pub mod tensor;

pub mod dftn;
pub mod kv;

pub mod backbone;
pub mod bae;
pub mod checkpoint;
pub mod config;
pub mod diffusion;
pub mod evaluate;
pub mod ftie;
pub mod gradchecks;
pub mod kan;
pub mod metrics;
pub mod optim;
pub mod spline;
pub mod synthdata;
pub mod train;
pub mod warp;


pub use error::{MorphError, Result};
pub use tensor::Tensor;

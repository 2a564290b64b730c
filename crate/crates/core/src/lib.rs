//! Energy plan denoising for stochastic pedestrian trajectory prediction.
//!
//! The crate is `no_std` (with `alloc`) and carries everything that is pure
//! computation: a small reverse-mode autodiff tape over `f64` tensors, a
//! counter-based normal generator, the Adam optimizer, trajectory windows,
//! the four networks of the model and the staged training / inference
//! pipeline. File formats, timing and the command line live in the `epd`
//! companion crate.
//!
//! Prediction runs in three moves:
//!
//! 1. [`guidance::GuidanceEncoder`] turns the observed past (ego plus
//!    neighbors) into a 256-dimensional guidance vector.
//! 2. [`energy::EnergyModel`] draws a coarse plan with Langevin dynamics in
//!    the unconstrained space of per-step bivariate Gaussians.
//! 3. [`diffusion::Denoiser`] refines the plan with a short, truncated reverse
//!    diffusion chain. The result is a [`gaussian::GaussianSeq`] that is
//!    sampled as many times as needed without further network calls.
#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod config;
pub mod data;
pub mod diffusion;
pub mod energy;
pub mod error;
pub mod gaussian;
pub mod gradcheck;
pub mod guidance;
pub mod math;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod params;
pub mod pipeline;
pub mod rng;
pub mod synthetic;
pub mod tape;
pub mod td;
pub mod tensor;

pub use error::{Error, Result};
pub use tape::{Tape, Var};
pub use tensor::Tensor;

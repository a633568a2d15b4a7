//! Density estimation with score-based diffusion models.
//!
//! The crate covers the whole pipeline: an Ornstein–Uhlenbeck forward
//! process, denoising score-matching training of sparse weight-sharing ReLU
//! networks, reverse-SDE and Langevin samplers, structured ground-truth
//! densities, Gauss–Legendre quadrature oracles for the diffused density, KDE
//! baselines and a bits-per-dimension benchmark runner.

// `!(x > 0.0)` style guards are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bench;
pub mod densities;
pub mod diffusion;
pub mod error;
pub mod kde;
pub mod numerics;
pub mod quadrature;
pub mod sampler;
pub mod wsnn;

pub use error::{Error, Result};

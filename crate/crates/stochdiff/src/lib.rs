//! StochDiff: diffusion-based probabilistic forecasting for multivariate
//! time series with a learned, data-driven latent prior at every step.
//!
//! The crate is organized around the forecasting pipeline:
//!
//! - [`schedule`] — closed-form diffusion math (noise schedule, forward
//!   sampling, tractable posterior, x0-parameterized reverse step)
//! - [`tensor`], [`tape`], [`params`], [`nn`] — a minimal differentiable
//!   substrate (LSTM cell, fully connected nets, scaled dot-product
//!   attention) with reverse-mode gradients and a finite-difference
//!   gradient checker
//! - [`latent`] — the per-step latent recurrence: learned prior,
//!   approximate posterior, reparameterized sampling, KL term
//! - [`denoiser`] — the data-prediction network `x0 = f(x^n, n, z)` built
//!   from self-attention over dimensions and cross-attention with the
//!   latent
//! - [`model`], [`training`] — variant assembly (lstm / vlstm variants /
//!   stochdiff) and the dual-objective training loop with plateau LR decay
//! - [`forecasting`] — observe-then-forecast autoregressive ensemble
//!   sampling with quantile bands
//! - [`point_estimate`] — GMM fitting over ensembles and largest-cluster
//!   point selection
//! - [`metrics`] — NRMSE and empirical CRPS / CRPS_sum
//! - [`data`] — CSV ingestion, normalization, sliding windows, splits,
//!   synthetic generators
//! - [`monitor`] — streaming drop detection with causality auditing
//! - [`cli`] — the `stochdiff` command-line entry point

pub mod cli;
pub mod config;
pub mod data;
pub mod denoiser;
pub mod error;
pub mod forecasting;
pub mod latent;
pub mod metrics;
pub mod model;
pub mod monitor;
pub mod nn;
pub mod params;
pub mod point_estimate;
pub mod rng;
pub mod schedule;
pub mod tape;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use schedule::{DiffusionSchedule, GaussianDiag};
pub use tensor::Tensor;

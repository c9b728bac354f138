//! A desk-scale echocardiogram synthesis pipeline.
//!
//! The crate generates a procedural toy ultrasound dataset with analytically
//! known ejection fractions, trains a small adversarial VAE to compress it,
//! fits latent flow-matching models for image and video generation, filters
//! generated anatomies through a re-identification privacy gate, and finally
//! measures whether a regressor trained on the synthetic data matches one
//! trained on real data. Every stage runs in seconds-to-minutes on a laptop
//! core and is exactly reproducible from a single seed.
//!
//! Module map:
//! * [`numerics`] — tensors, tape autodiff, layers, Adam.
//! * [`echodata`] — the procedural toy dataset and its container format.
//! * [`avae`] — adversarial VAE, latent statistics, entropy diagnostics.
//! * [`flowmatch`] — flow-matching training, guidance, and the ODE sampler.
//! * [`reid`] — re-identification encoder, threshold calibration, filtering.
//! * [`downstream`] — ejection-fraction regression and comparison metrics.
//! * [`pipeline`] — configuration, stage orchestration, reports.

pub mod avae;
pub mod ckpt;
pub mod downstream;
pub mod echodata;
pub mod error;
pub mod flowmatch;
pub mod numerics;
pub mod pipeline;
pub mod reid;
pub mod rng;

pub use error::{Error, Result};
pub use numerics::{Adam, Gradients, Layer, LayerSpec, ParamId, ParamStore, Tape, Tensor, Var};

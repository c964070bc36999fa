//! Desk-scale laboratory for diffusion noise schedules and DDIM inversion.
//!
//! Trained noise predictors are replaced by analytic data models (point
//! masses, isotropic Gaussians and Gaussian mixtures) whose optimal noise
//! predictor is known in closed form, so every sampler error measured here
//! is a discretization or schedule effect rather than a modelling one.
//!
//! Module map:
//! - [`schedule`]: ᾱ(t) for the scaled-linear, cosine, sigmoid and logistic
//!   families, plus discrete tables.
//! - [`calculus`]: dᾱ/dt, the x0/ε coefficients of dx_t/dt, singularity
//!   scans and logSNR linearity fits.
//! - [`models`]: analytic data models and guided noise prediction.
//! - [`sampler`]: forward closed form, DDIM reverse/inversion steps,
//!   trajectories, pinned reconstruction and an RK4 reference ODE solver.
//! - [`metrics`]: MSE, PSNR, convergence-order fits and edit drift.
//! - [`harness`]: scenario configs, experiment commands and file formats.

pub mod calculus;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod models;
pub mod rng;
pub mod sampler;
pub mod schedule;
mod serde_float;

pub use error::{Error, Result};

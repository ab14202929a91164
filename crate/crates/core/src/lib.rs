//! Desk-scale gaze-fused aesthetic quality assessment.
//!
//! The crate implements the full two-stage pipeline on synthetic data with
//! known latent structure:
//!
//! * [`dataio`] — dataset formats, deterministic splits, and the synthetic
//!   generator (images, scores, scanpaths, latent factors);
//! * [`encoders`] — the frozen semantic feature encoder, the trainable patch
//!   transformer for the gaze branch, and the scanpath transformer;
//! * [`cga`] — contrastive gaze alignment pretraining (symmetric InfoNCE);
//! * [`fusion`] — gaze-guided cross-attention, inference-time masking, and
//!   the stage-B training loop;
//! * [`objectives`] — MSE, differentiable PLCC, and the hybrid loss;
//! * [`plugins`] — feature-level fusion and score-level correction for host
//!   models;
//! * [`evalstats`] — reference metrics, bootstrap confidence intervals,
//!   paired significance tests, and report/plot emission.
//!
//! Gradients come from the small reverse-mode [`tape`]; every analytic
//! gradient in the crate is checked against central finite differences.

pub mod cga;
pub mod dataio;
pub mod encoders;
pub mod error;
pub mod evalstats;
pub mod fusion;
pub mod gradcheck;
pub mod objectives;
pub mod optim;
pub mod params;
pub mod plugins;
pub mod tape;

pub use error::{AqaError, Result};

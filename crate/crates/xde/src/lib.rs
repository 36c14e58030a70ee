//! Cross-domain ensembles for robust dense prediction.
//!
//! The crate trains a set of small probabilistic networks that all predict
//! the same target, each through a different programmatically computed
//! "middle domain" of the input image (edges, low-pass, wavelet, ...).
//! Every path outputs a per-pixel mean and log-scale under a Laplace noise
//! model; a sigma-training stage calibrates the scales on distorted inputs,
//! and the paths are merged per pixel by inverse-variance weighting. The
//! result degrades far more gracefully under distribution shift than a
//! single direct network.
//!
//! The crate also ships the surrounding laboratory: a corruption suite with
//! severity levels, an I-FGSM attack harness that differentiates through
//! the whole filter-network-merge chain, synthetic dense-prediction tasks,
//! baselines, and a calibration/robustness evaluation pipeline behind the
//! `xde` binary.

pub mod attack;
pub mod checkpoint;
pub mod corruptions;
pub mod error;
pub mod filters;
pub mod gradcheck;
pub mod merge;
pub mod nets;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};

//! Self-supervised blind source separation of single-channel quasi-periodic
//! signals with a multi-encoder autoencoder (MEAE), plus the preprocessing,
//! heart-rate evaluation, classical baselines and synthetic benchmark used to
//! exercise it.

pub mod baselines;
pub mod bench;
pub mod checkpoint;
pub mod error;
pub mod hr;
pub mod losses;
pub mod model;
pub mod nn;
pub mod signal;
pub mod synth;
pub mod train;

pub use error::{MeaeError, Result};

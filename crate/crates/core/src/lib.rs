//! Semi-supervised learning for marked temporal point processes.
//!
//! A supervised recurrent branch models the joint marker/time history of
//! labeled event sequences. An unsupervised recurrent encoder-decoder is
//! trained to reconstruct the time sequence of every training sequence,
//! labeled or not, and its per-step embedding is added (scaled by `lambda`)
//! to the supervised embedding before the marker and time heads.
//!
//! The crate is self-contained: [`autodiff`] is a small define-by-run
//! reverse-mode engine, [`layers`] builds dense/recurrent/embedding layers
//! on top of it, [`data`] handles sequence files, synthetic generation,
//! protocol splits and batching, [`model`] holds the network and its losses,
//! [`train`] the optimizer loop and checkpoints, and [`metrics`] the
//! evaluation report.

pub mod autodiff;
pub mod cli;
pub mod data;
pub mod error;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod train;

pub use error::{Error, Result};

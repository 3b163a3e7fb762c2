//! Hybrid adversarial training for raw-waveform speaker classifiers.
//!
//! The crate is organized bottom-up:
//!
//! - [`grad`]: define-by-run reverse-mode differentiation over `f64` arrays.
//! - [`frontend`]: differentiable log-Mel spectrogram.
//! - [`model`]: 1-D CNN speaker classifier and its parameters.
//! - [`losses`]: cross-entropy, margin, Sinkhorn feature-scattering and hybrid losses.
//! - [`attacks`]: sign-gradient attacks with l-infinity projection.
//! - [`training`]: standard and adversarial training loops.
//! - [`eval`]: robustness reports, sweeps, transfer and gradient-masking checks.
//! - [`data`]: corpus ingestion, splitting, batching and a synthetic corpus.
//! - [`config`]: experiment configuration, validation and fingerprints.
//! - [`checkpoint`]: versioned binary model checkpoints.
//! - [`experiment`]: a config bound to its corpus, shared by the CLI commands.

pub mod attacks;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod frontend;
pub mod grad;
pub mod losses;
pub mod model;
pub mod seed;
pub mod training;

pub use error::{Error, Result};

//! Remaining-useful-life prediction for rolling bearings.
//!
//! The pipeline turns raw run-to-failure vibration recordings into normalised
//! RUL trajectories:
//!
//! 1. [`ingest`] loads snapshot files, builds linear life-fraction labels and
//!    cuts transfer-task sample windows.
//! 2. [`lspr`] finds the first prediction time from RMS, extracts STFT energy
//!    features and patches each feature channel.
//! 3. [`model`] is the frozen-backbone transformer: reversible instance
//!    normalisation, triple input embedding, attention blocks and a linear head.
//! 4. [`training`] runs the two fine-tuning stages with Adam over exact
//!    reverse-mode gradients.
//! 5. [`metrics`] and [`analysis`] evaluate and probe trained models.
//!
//! [`pipeline`] ties everything to a single run configuration and is what the
//! `rul` command-line tool drives.

pub mod analysis;
pub mod autograd;
pub mod cache;
pub mod error;
pub mod ingest;
pub mod lspr;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod synth;
pub mod tensor;
pub mod training;

pub use error::{Error, ErrorCategory, Result};
pub use tensor::Matrix;

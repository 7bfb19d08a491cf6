//! Sequence-to-sequence recurrent forecasting of power-system states.
//!
//! The crate contains the quadratic measurement model used to synthesise
//! data, hand-differentiated RNN / GRU / BiGRU / Conv1D cells, an
//! encoder-decoder forecaster built from them, Adam training with early
//! stopping, and NRMSE evaluation.

pub mod benchmark;
pub mod cells;
pub mod checkpoint;
pub mod error;
pub mod json;
pub mod linalg;
pub mod measurement;
pub mod metrics;
pub mod model;
pub mod params;
pub mod rng;
pub mod scaling;
pub mod training;

pub use error::{Error, Result};

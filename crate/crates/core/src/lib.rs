//! Forecasting library: causal scaling, a factorized-attention transformer
//! backbone, a Student-T mixture head, training, forecasting and evaluation.

pub mod backbone;
pub mod data;
pub mod engine;
pub mod error;
pub mod obsbench;
pub mod scaler;
pub mod smm;
pub mod stats;

pub use error::{Error, Result};

//! Bayesian state-space anomaly detection for multivariate time series.
//!
//! A learned state-space model (window encoder/decoder plus an LSTM-driven
//! transition network) drives an ensemble Kalman filter or an SIR particle
//! filter. Each incoming observation is scored by its Mahalanobis distance
//! from the filter's predicted observation distribution, and scores are
//! evaluated with point-adjusted F1 and MCC under an exhaustive threshold
//! search.

pub mod anomaly;
pub mod commands;
pub mod config;
pub mod error;
pub mod filters;
pub mod linalg;
pub mod neural;
pub mod timeseries;

pub use error::{Error, Result};

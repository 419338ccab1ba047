//! Spatiotemporal PM2.5 reanalysis.
//!
//! Station time series are encoded per station by an LSTM followed by
//! multi-head self-attention with a residual connection, mean-pooled over
//! time, and mapped to a multi-hour PM2.5 horizon by a shared affine head.
//! Unobserved locations (hidden stations, grid nodes) are filled by a
//! differentiable k-nearest-neighbour interpolation over the observed
//! stations, so interpolation error can train the encoder end to end.
//!
//! Module map:
//! - [`data`]: CSV ingestion, quality filtering, normalization, cyclic time
//!   features, windowing and a synthetic dataset generator.
//! - [`nn`]: a small reverse-mode autodiff tape with the layers the model
//!   needs (LSTM, attention, losses) and AdamW.
//! - [`model`]: model assembly, haversine kNN and gridded reanalysis.
//! - [`train`]: the training loop, checkpoints and resumption.
//! - [`eval`]: metrics, the short/long-term protocols, baselines and
//!   attention analytics.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod nn;
pub mod train;

pub use error::{Error, Result};

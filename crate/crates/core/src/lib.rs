//! Graph-learning Transformer for multivariate time-series anomaly detection.
//!
//! A learnable directed sensor graph (Gumbel-Softmax connection policy) feeds
//! an influence-propagation graph convolution interleaved with dilated
//! temporal convolutions; a multi-branch Transformer forecasts the next step,
//! and forecast deviation is scored and thresholded for detection.

pub mod data_io;
pub mod detector;
pub mod encoder;
pub mod error;
pub mod forecaster;
pub mod graph_policy;
pub mod ipconv;
pub mod model;
pub mod numerics;
pub mod train;

pub use error::{Error, Result};
pub use numerics::{Tensor, Tape, Var};

//! Desk-scale visual speech recognition pipeline: a spatio-temporal CNN
//! backbone, query-attention pooling over spatial feature maps, a sub-word
//! seq2seq transformer, beam decoding with n-gram LM rescoring, and a
//! per-frame visual speech detection head — all built on a small
//! reverse-mode tensor tape that runs in f32 or f64.

pub mod backbone;
pub mod beam;
pub mod config;
pub mod error;
pub mod eval;
pub mod io;
pub mod lm;
pub mod metrics;
pub mod model;
pub mod tokenizer;
pub mod trainer;
pub mod gradcheck;
pub mod nn;
pub mod scalar;
pub mod seq2seq;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod video;
pub mod vsd;
pub mod vtp;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;

/// Default training precision.
pub type Tensor32 = Tensor<f32>;
/// Checking precision used by the gradient suite.
pub type Tensor64 = Tensor<f64>;

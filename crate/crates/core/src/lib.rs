//! A multi-resolution, variable-rate learned image codec.
//!
//! The encoder and decoder are built from generalized octave convolutions
//! with built-in divisive normalization, the code maps are quantized with a
//! stochastic-rounding scalar quantizer at any bit depth in `[1, 8]`, and the
//! bitstream carries the entropy-coded code maps plus an optional residual
//! enhancement layer.

pub mod bitstream;
pub mod error;
pub mod imageio;
pub mod metrics;
pub mod model;
pub mod octave;
pub mod quant;
pub mod tensor;

pub use error::{Error, Result};

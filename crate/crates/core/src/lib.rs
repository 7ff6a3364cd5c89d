//! Forward-only knowledge editing for small decoder-only transformers.
//!
//! The crate is split along the editing pipeline:
//!
//! - [`model`]: the instrumented transformer forward pass, prefix cache and
//!   the checkpoint container.
//! - [`quant`]: static W8A16 post-training quantization with a
//!   floating-point island around the edit site.
//! - [`editor`]: key extraction, the edit loss, zeroth-order value
//!   optimization and the closed-form rank-one weight update.
//! - [`noiselab`]: Monte Carlo study of quantization noise in backprop
//!   versus central-difference gradient estimates on linear chains.
//! - [`eval`]: edit success / locality / portability metrics and the
//!   ablation harness.
//! - [`bootstrap`]: synthetic fact corpora, a small reference trainer and
//!   the toy model recipe used by the acceptance suite.

// `!(x > 0.0)` is used on purpose: it rejects NaN along with the bad range.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bootstrap;
pub mod editor;
pub mod error;
pub mod eval;
pub mod memtrack;
pub mod model;
pub mod noiselab;
pub mod quant;
pub mod telemetry;
pub mod tensor;

pub use error::{Error, Result};

/// Token identifier.
pub type TokenId = u32;

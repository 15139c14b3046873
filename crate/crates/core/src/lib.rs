//! Cross-modal poisoning of a toy multimodal next-item recommender.
//!
//! The numeric core is generic over [`numkit::Real`]; the data pipeline and
//! victim run in `f64` through the [`Vector`] and [`Matrix`] aliases.

// Range checks are written as `!(x > 0.0)` so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attack_cip;
pub mod attack_ea;
pub mod baselines;
pub mod catalog;
mod error;
pub mod fusion;
pub mod harness;
pub mod injection;
pub mod metrics;
pub mod numkit;
pub mod proxy_encoder;
pub mod victim;

pub use error::{Error, Result};

/// Double-precision dense vector.
pub type Vector = numkit::DenseVector<f64>;
/// Double-precision dense matrix.
pub type Matrix = numkit::DenseMatrix<f64>;
/// Double-precision proxy encoder.
pub type Proxy = proxy_encoder::ProxyEncoder<f64>;

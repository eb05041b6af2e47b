//! Information-regularized semi-supervised transfer learning.
//!
//! Exact discrete information measures, a small reverse-mode autodiff engine
//! with second-order support, Gaussian Lautum and clipped MINE regularizers,
//! and a two-stage transfer pipeline.

// `!(x > 0.0)` style checks are used on purpose: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod config;
pub mod data;
pub mod error;
pub mod exact_info;
pub mod lautum;
pub mod linalg;
pub mod mine;
pub mod models;
pub mod pipeline;
pub mod regularizer;
pub mod seeds;

pub use error::{Error, Result};

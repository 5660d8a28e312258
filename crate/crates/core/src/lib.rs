//! Multi-view masked autoencoder pre-training on synthetic video.

// `!(x > 0.0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod error;
pub mod gradcheck;
pub mod masking;
pub mod model;
pub mod numerics;
pub mod objective;
pub mod rng;
pub mod synthdata;
pub mod tokenizer;
pub mod training;

pub use error::{Error, Result};

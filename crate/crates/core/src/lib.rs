//! Generalized contrastive learning lab.
//!
//! Exact losses and gradients for image, text and fused embeddings, a
//! deterministic toy trainer over synthetic paired data, a brute-force
//! retrieval evaluator, and modality-gap diagnostics.

// `!(x >= limit)` is used on purpose so NaN falls into the error branch.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod diagnostics;
pub mod embedding;
pub mod error;
pub mod experiment;
pub mod hash;
pub mod losses;
pub mod retrieval;
pub mod synthetic;
pub mod trainer;

pub use error::{Error, Result};

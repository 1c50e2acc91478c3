//! Bidirectional multimodal machine translation at desk scale.
//!
//! Joint source-to-target and target-to-source translation models attend over
//! image region features through multi-head co-attention, and are trained
//! with visual agreement regularization: the two directions are pushed to
//! focus on the same region when they generate semantically equivalent
//! visual words. Everything runs on a self-contained f64 reverse-mode
//! autodiff core over a synthetic grounded bilingual corpus.

pub mod aligner;
pub mod autodiff;
pub mod config;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod mat;
pub mod model;
pub mod train;

pub use error::{Error, Result};

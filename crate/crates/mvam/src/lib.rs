//! Multi-view alignment model for multi-label document classification.
//!
//! A document is encoded by a word-embedding layer followed by a 1-D
//! convolution; labels are encoded by embeddings refined through scaled
//! dot-product self-attention. A per-label attention over document positions
//! produces one document view per label, and independent sigmoid classifiers
//! score each label. Everything runs on a small dense-tensor reverse-mode
//! autodiff engine contained in this crate; there are no native dependencies.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod metrics;
pub mod model;
pub mod run_config;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};

//! Weakly supervised open-vocabulary object detection at desk scale.
//!
//! The pipeline trains from image-level labels only: a patch-embedding
//! extractor feeds an anchor-free proposal head and a multiple-instance
//! learning stack whose classifiers are fixed text embeddings, so categories
//! never seen in training labels can still be detected by name.

pub mod diffcore;
pub mod error;
pub mod evalmetrics;
pub mod features;
pub mod geometry;
pub mod milheads;
pub mod model;
pub mod proposals;
pub mod seed;
pub mod synthdata;
pub mod train;

pub use error::{Error, Result};

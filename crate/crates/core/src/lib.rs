//! Multi-source embedding retrieval.
//!
//! Trains one embedding model per data source ("specialists"), then distills
//! all of them into a single universal model by matching pairwise embedding
//! distances on single-source mini-batches. Fused-data baselines, a
//! concatenation + PCA ensemble, and Recall@k evaluation are included for
//! comparison.
//!
//! Module map:
//! - [`numerics`]: distances, normalization, PCA, Adam, finite differences
//! - [`encoder`]: the MLP embedding function with exact gradients
//! - [`losses`]: distance distillation, multi-similarity, triplet, contrastive
//! - [`data`]: synthetic multi-source datasets, splits, binary file format
//! - [`sampling`]: naive, source-specific, balanced and boosted batching
//! - [`training`]: specialist, fused and distillation training loops
//! - [`evaluation`]: Recall@k, concatenation baseline, curve and ratio analyses
//! - [`config`]: experiment configuration files
//! - [`cli`]: the `unimetric` command-line front end

pub mod cli;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod evaluation;
pub mod losses;
pub mod numerics;
pub mod sampling;
pub mod training;

pub use error::{Error, Result};

/// Identifier of a data source.
pub type SourceId = u16;
/// Class label within one source.
pub type ClassId = u16;

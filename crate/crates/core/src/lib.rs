//! Neutral-reference prior probing for vision–language classifiers.
//!
//! The crate works purely on precomputed embeddings: class text prototypes
//! from the zero-shot and the fine-tuned encoder, image features, and a
//! handful of class-agnostic anchor vectors. From these it derives per-class
//! prior logits, per-pair composite prior gaps over a confusable-neighbor
//! graph, and a gated rule that flips a top-1 prediction to a neighbor when
//! the prediction looks driven by the prior rather than by sample evidence.
//!
//! Module map:
//!
//! - [`store`]: embedding data model and the on-disk bundle container.
//! - [`graph`]: symmetric confusable-neighbor graph (edge lists, kNN).
//! - [`priors`]: prior logits, residual priors and composite pair gaps.
//! - [`margins`]: sample margins, domain margin statistics, global intercept.
//! - [`corrector`]: region test and the single-shot flip decision rule.
//! - [`calibration`]: fold partitioning, pseudo splits and gate grid search.
//! - [`simulator`]: synthetic generative model used as a theory oracle.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod calibration;
pub mod corrector;
pub mod error;
pub mod graph;
pub mod linalg;
pub mod margins;
pub mod priors;
pub mod rng;
pub mod simulator;
pub mod store;

pub use error::{Error, Result};

/// Version tag written into every JSON document the crate emits.
pub const SCHEMA_VERSION: u32 = 1;

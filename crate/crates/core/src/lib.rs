//! Deterministic few-shot class-incremental learning (FSCIL) for 3D point
//! clouds, at desk scale.
//!
//! The pipeline: point clouds are normalized, rendered into multi-view depth
//! maps, and embedded by small frozen encoders; two trainable heads (a depth
//! Merger and a 3D Adapter) map those embeddings into a shared space where
//! classification is cosine similarity against per-class text prototypes,
//! optionally after projecting out low-variance feature directions. Sessions
//! arrive incrementally with a handful of shots each; metrics track how much
//! of the base-session accuracy survives.
//!
//! Every stage is bit-deterministic given a master seed: rendering, encoding,
//! initialization, shot selection, batch order, and exemplar memory all draw
//! from named substreams of one generator.

pub mod benchmark;
pub mod encoders;
pub mod error;
pub mod geometry;
pub mod heads;
pub mod learner;
pub mod metrics;
pub mod projection;
pub mod rfe;
pub mod rng;

pub use error::{Error, Result};

//! Sparse crosscoders for comparing a base model with one or two fine-tuned
//! descendants.
//!
//! The pipeline: activation shards ([`actstore`]) feed a jointly trained
//! crosscoder ([`crosscoder`]); decoder norms attribute every feature to a model
//! and track feature sets across checkpoints ([`attribution`]); feature
//! activation differences on samples only the tuned model solves pick out
//! generalization features and export intervention specs ([`genfeat`]).
//! [`synthlab`] plants ground-truth dictionaries to validate all of it.

pub mod actstore;
pub mod attribution;
pub mod crosscoder;
pub mod error;
pub mod genfeat;
pub mod numerics;
pub mod par;
pub mod synthlab;

pub use error::{Error, Result};

/// Version stamped into every JSON artifact.
pub const SCHEMA_VERSION: u32 = 1;

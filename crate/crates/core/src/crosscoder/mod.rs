//! Sparse crosscoder over 2 or 3 models: parameters, forward pass, loss,
//! analytic gradients and training.

pub mod checkpoint;
pub mod config;
pub mod gradcheck;
pub mod model;
pub mod params;
pub mod train;

pub use checkpoint::{CHECKPOINT_FILE, CHECKPOINT_SCHEMA_VERSION};
pub use config::{CrosscoderConfig, NormKind, DEFAULT_BETA, DEFAULT_D_SPARSE};
pub use gradcheck::{check_gradients, GradCheckDims};
pub use model::{
    backward, decode, encode, encode_single, forward, loss, pre_activation, ForwardCache, LossBreakdown, Objective,
};
pub use params::{CrosscoderParams, Gradients, INIT_DECODER_NORM};
pub use train::{dead_feature_stats, initial_checkpoint, resume, train, Checkpoint, LogEntry};

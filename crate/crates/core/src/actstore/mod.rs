//! On-disk activation shards, dataset manifests, normalization and aligned batching.

pub mod dataset;
pub mod manifest;
pub mod shard;

pub use dataset::{aligned_batches, ActivationDataset, AlignedBatch, BatchStream, StreamPosition, DEFAULT_BATCH_SIZE};
pub use manifest::{estimate_scale, DatasetManifest, MANIFEST_SCHEMA_VERSION};
pub use shard::{read_shard, write_shard, ActivationShard, DType, ShardHeader, TokenMeta, FORMAT_VERSION, MAGIC};

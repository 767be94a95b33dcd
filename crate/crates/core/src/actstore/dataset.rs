use std::borrow::Cow;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::manifest::DatasetManifest;
use super::shard::TokenMeta;
use crate::error::{Error, Result};
use crate::numerics::{seeded_rng, Matrix};

/// Paper-scale training batch size.
pub const DEFAULT_BATCH_SIZE: usize = 1024;

/// All tokens of a manifest, concatenated per model and already scaled.
#[derive(Debug, Clone)]
pub struct ActivationDataset {
    pub models: Vec<String>,
    pub layer_index: u32,
    acts: Vec<Matrix<f32>>,
    meta: Option<Vec<TokenMeta>>,
    scales: Vec<f64>,
}

impl ActivationDataset {
    /// Loads every shard group, checking token alignment across models.
    pub fn load(manifest: &DatasetManifest) -> Result<Self> {
        manifest.validate_structure()?;
        if manifest.shard_groups.is_empty() {
            return Err(Error::InvalidManifest("no shard groups".into()));
        }
        let k = manifest.models.len();
        let mut rows: Vec<Vec<f32>> = vec![Vec::new(); k];
        let mut meta: Option<Vec<TokenMeta>> = None;
        let mut any_meta = false;
        let mut d_model = None;
        let mut layer_index = None;
        let mut n_total = 0usize;

        for (gi, group) in manifest.shard_groups.iter().enumerate() {
            let shards = group
                .iter()
                .map(|p| super::shard::read_shard(manifest.resolve(p)))
                .collect::<Result<Vec<_>>>()?;
            let n = shards[0].n_tokens();
            for (mi, s) in shards.iter().enumerate() {
                if s.header.model_id != manifest.models[mi] {
                    return Err(Error::InvalidManifest(format!(
                        "group {gi}: shard for {:?} is labelled {:?}",
                        manifest.models[mi], s.header.model_id
                    )));
                }
                if s.n_tokens() != n {
                    return Err(Error::InvalidManifest(format!(
                        "group {gi}: token counts differ across models"
                    )));
                }
                if *d_model.get_or_insert(s.d_model()) != s.d_model() {
                    return Err(Error::InvalidManifest(format!(
                        "group {gi}: d_model differs across shards"
                    )));
                }
                layer_index.get_or_insert(s.header.layer_index);
                if s.token_meta != shards[0].token_meta {
                    return Err(Error::InvalidManifest(format!(
                        "group {gi}: token metadata is not aligned across models"
                    )));
                }
            }
            match (&shards[0].token_meta, gi) {
                (Some(m), 0) => {
                    any_meta = true;
                    meta = Some(m.clone());
                }
                (Some(m), _) if any_meta => meta.as_mut().unwrap().extend_from_slice(m),
                (None, _) if !any_meta => {}
                _ => {
                    return Err(Error::InvalidManifest(
                        "token metadata present in some groups only".into(),
                    ))
                }
            }
            for (mi, s) in shards.into_iter().enumerate() {
                rows[mi].extend(s.data.into_vec());
            }
            n_total += n;
        }

        let d_model = d_model.unwrap();
        let scales: Vec<f64> = manifest.models.iter().map(|m| manifest.scale_for(m)).collect();
        let acts = rows
            .into_iter()
            .zip(&scales)
            .map(|(data, &c)| {
                let mut m = Matrix::from_vec(n_total, d_model, data)?;
                if c != 1.0 {
                    m.scale(c as f32);
                }
                Ok(m)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            models: manifest.models.clone(),
            layer_index: layer_index.unwrap_or(0),
            acts,
            meta,
            scales,
        })
    }

    /// Builds a dataset directly from per-model matrices (already scaled).
    pub fn from_matrices(models: Vec<String>, acts: Vec<Matrix<f32>>, meta: Option<Vec<TokenMeta>>) -> Result<Self> {
        if models.len() != acts.len() || acts.is_empty() {
            return Err(Error::InvalidShape("one activation matrix per model".into()));
        }
        let shape = acts[0].shape();
        if shape.0 == 0 || acts.iter().any(|a| a.shape() != shape) {
            return Err(Error::InvalidShape(
                "activation matrices must share a nonempty shape".into(),
            ));
        }
        if meta.as_ref().is_some_and(|m| m.len() != shape.0) {
            return Err(Error::InvalidShape("metadata length differs from token count".into()));
        }
        let k = models.len();
        Ok(Self {
            models,
            layer_index: 0,
            acts,
            meta,
            scales: vec![1.0; k],
        })
    }

    pub fn n_tokens(&self) -> usize {
        self.acts[0].rows()
    }

    pub fn d_model(&self) -> usize {
        self.acts[0].cols()
    }

    pub fn activations(&self) -> &[Matrix<f32>] {
        &self.acts
    }

    pub fn token_meta(&self) -> Option<&[TokenMeta]> {
        self.meta.as_deref()
    }

    pub fn scales(&self) -> &[f64] {
        &self.scales
    }

    /// Rows `idx` of every model, in order.
    pub fn gather(&self, idx: &[usize]) -> AlignedBatch {
        AlignedBatch {
            acts: self.acts.iter().map(|a| a.gather_rows(idx)).collect(),
            meta: self.meta.as_ref().map(|m| idx.iter().map(|&i| m[i].clone()).collect()),
            token_indices: idx.to_vec(),
        }
    }

    /// Endless, seeded stream of shuffled batches.
    pub fn batches(&self, batch_size: usize, seed: u64) -> Result<BatchStream<'_>> {
        BatchStream::new(self, batch_size, seed, StreamPosition::default())
    }
}

/// One minibatch with row `j` of every matrix belonging to the same token.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignedBatch {
    pub acts: Vec<Matrix<f32>>,
    pub meta: Option<Vec<TokenMeta>>,
    /// Token positions within the dataset.
    pub token_indices: Vec<usize>,
}

impl AlignedBatch {
    pub fn len(&self) -> usize {
        self.token_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_indices.is_empty()
    }
}

/// Resumable position within a [`BatchStream`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamPosition {
    pub epoch: u64,
    pub offset: usize,
}

/// Draws every token exactly once per epoch, in an order given by a seeded
/// Fisher–Yates shuffle of the token index table. The final batch of an epoch
/// may be short.
pub struct BatchStream<'a> {
    data: Cow<'a, ActivationDataset>,
    batch_size: usize,
    seed: u64,
    pos: StreamPosition,
    perm: Vec<usize>,
}

impl<'a> BatchStream<'a> {
    pub fn new(data: &'a ActivationDataset, batch_size: usize, seed: u64, pos: StreamPosition) -> Result<Self> {
        Self::from_cow(Cow::Borrowed(data), batch_size, seed, pos)
    }

    fn from_cow(data: Cow<'a, ActivationDataset>, batch_size: usize, seed: u64, pos: StreamPosition) -> Result<Self> {
        let total = data.n_tokens();
        if batch_size == 0 || batch_size > total {
            return Err(Error::InvalidBatchSize { batch_size, total });
        }
        if pos.offset > total {
            return Err(Error::InvalidShape(format!(
                "stream offset {} beyond {total} tokens",
                pos.offset
            )));
        }
        let perm = epoch_permutation(total, seed, pos.epoch);
        Ok(Self {
            data,
            batch_size,
            seed,
            pos,
            perm,
        })
    }

    pub fn position(&self) -> StreamPosition {
        self.pos
    }

    /// Batches remaining in the current epoch, then stops.
    pub fn rest_of_epoch<'s>(&'s mut self) -> impl Iterator<Item = AlignedBatch> + use<'s, 'a> {
        let epoch = self.pos.epoch;
        std::iter::from_fn(move || {
            if self.pos.epoch != epoch || self.pos.offset >= self.perm.len() {
                None
            } else {
                self.next()
            }
        })
    }
}

impl Iterator for BatchStream<'_> {
    type Item = AlignedBatch;

    fn next(&mut self) -> Option<AlignedBatch> {
        let total = self.perm.len();
        if self.pos.offset >= total {
            self.pos.epoch += 1;
            self.pos.offset = 0;
            self.perm = epoch_permutation(total, self.seed, self.pos.epoch);
        }
        let end = (self.pos.offset + self.batch_size).min(total);
        let batch = self.data.gather(&self.perm[self.pos.offset..end]);
        self.pos.offset = end;
        Some(batch)
    }
}

fn epoch_permutation(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut seeded_rng(seed, 0x5eed_0000 ^ epoch));
    perm
}

/// Loads `manifest` and opens a batch stream that owns the data.
pub fn aligned_batches(manifest: &DatasetManifest, batch_size: usize, seed: u64) -> Result<BatchStream<'static>> {
    let data = ActivationDataset::load(manifest)?;
    BatchStream::from_cow(Cow::Owned(data), batch_size, seed, StreamPosition::default())
}

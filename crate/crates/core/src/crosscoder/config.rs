use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_D_SPARSE: usize = 32_768;
pub const DEFAULT_BETA: f64 = 2.0;

/// Norm used for decoder columns in the sparsity penalty.
///
/// L2 is the default: with L1 column norms and the default penalty weight,
/// unit-norm features on normalized activations cost more in penalty than they
/// save in reconstruction and training collapses to the zero code.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormKind {
    L1,
    #[default]
    L2,
}

impl NormKind {
    pub fn of<T: crate::numerics::Real>(self, v: impl Iterator<Item = T>) -> f64 {
        match self {
            NormKind::L1 => v.map(|x| x.as_f64().abs()).sum(),
            NormKind::L2 => v.map(|x| x.as_f64() * x.as_f64()).sum::<f64>().sqrt(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CrosscoderConfig {
    /// Ordered model ids; the first is the base model.
    pub model_ids: Vec<String>,
    pub d_model: usize,
    #[serde(default = "default_d_sparse")]
    pub d_sparse: usize,
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    pub total_tokens: u64,
    #[serde(default)]
    pub seed: u64,
    /// Emit an intermediate checkpoint every this many steps; 0 disables.
    #[serde(default)]
    pub checkpoint_every: u64,
    #[serde(default)]
    pub norm_kind: NormKind,
}

fn default_d_sparse() -> usize {
    DEFAULT_D_SPARSE
}
fn default_beta() -> f64 {
    DEFAULT_BETA
}
fn default_lr() -> f64 {
    crate::numerics::DEFAULT_LR
}
fn default_batch_size() -> usize {
    crate::actstore::DEFAULT_BATCH_SIZE
}

impl CrosscoderConfig {
    /// Config with every optional field at its default.
    pub fn new(model_ids: Vec<String>, d_model: usize, total_tokens: u64) -> Self {
        Self {
            model_ids,
            d_model,
            d_sparse: DEFAULT_D_SPARSE,
            beta: DEFAULT_BETA,
            lr: crate::numerics::DEFAULT_LR,
            batch_size: crate::actstore::DEFAULT_BATCH_SIZE,
            total_tokens,
            seed: 0,
            checkpoint_every: 0,
            norm_kind: NormKind::L2,
        }
    }

    pub fn n_models(&self) -> usize {
        self.model_ids.len()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.model_ids.len();
        if !(2..=3).contains(&k) {
            return Err(Error::InvalidConfig(format!("crosscoders span 2 or 3 models, got {k}")));
        }
        for (i, id) in self.model_ids.iter().enumerate() {
            if self.model_ids[..i].contains(id) {
                return Err(Error::InvalidConfig(format!("duplicate model id {id:?}")));
            }
        }
        if self.d_model == 0 {
            return Err(Error::InvalidConfig("d_model must be >= 1".into()));
        }
        if self.d_sparse < self.d_model {
            return Err(Error::InvalidConfig(format!(
                "d_sparse ({}) must be >= d_model ({})",
                self.d_sparse, self.d_model
            )));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::InvalidConfig(format!("beta must be >= 0, got {}", self.beta)));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidConfig(format!("lr must be > 0, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

use std::path::{Path, PathBuf};

use crossdiff::attribution::{DEFAULT_MIN_COSINE, DEFAULT_TOP_N};
use crossdiff::crosscoder::{CrosscoderConfig, NormKind, DEFAULT_BETA, DEFAULT_D_SPARSE};
use crossdiff::genfeat::DEFAULT_FRACTION;
use serde::{Deserialize, Serialize};

use crate::io::{read_doc, CliError, CliResult};

pub const DEFAULT_BINS: usize = 100;
/// Intermediate checkpoints per pass over the data when `checkpoint_every` is
/// not given.
pub const CHECKPOINTS_PER_EPOCH: u64 = 5;

/// Run configuration file (JSON, or TOML by extension). Relative paths are
/// resolved against the file's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfigFile {
    /// Training dataset manifest. Required for `train`.
    #[serde(default)]
    pub manifest: Option<PathBuf>,
    /// Output directory; defaults to the current directory.
    #[serde(default)]
    pub out: Option<PathBuf>,
    /// Defaults to the manifest's model list.
    #[serde(default)]
    pub model_ids: Option<Vec<String>>,
    /// Defaults to the width of the activations.
    #[serde(default)]
    pub d_model: Option<usize>,
    #[serde(default = "d_sparse")]
    pub d_sparse: usize,
    #[serde(default = "beta")]
    pub beta: f64,
    #[serde(default = "lr")]
    pub lr: f64,
    #[serde(default = "batch_size")]
    pub batch_size: usize,
    /// Defaults to one pass over the dataset.
    #[serde(default)]
    pub total_tokens: Option<u64>,
    #[serde(default)]
    pub seed: u64,
    /// Steps between intermediate checkpoints; defaults to a fifth of a pass.
    /// 0 disables them.
    #[serde(default)]
    pub checkpoint_every: Option<u64>,
    #[serde(default)]
    pub norm_kind: NormKind,
    #[serde(default = "top_n")]
    pub top_n: usize,
    #[serde(default = "bins")]
    pub bins: usize,
    #[serde(default = "fraction")]
    pub fraction: f64,
    #[serde(default = "min_cosine")]
    pub min_cosine: f64,
}

fn d_sparse() -> usize {
    DEFAULT_D_SPARSE
}
fn beta() -> f64 {
    DEFAULT_BETA
}
fn lr() -> f64 {
    crossdiff::numerics::DEFAULT_LR
}
fn batch_size() -> usize {
    crossdiff::actstore::DEFAULT_BATCH_SIZE
}
fn top_n() -> usize {
    DEFAULT_TOP_N
}
fn bins() -> usize {
    DEFAULT_BINS
}
fn fraction() -> f64 {
    DEFAULT_FRACTION
}
fn min_cosine() -> f64 {
    DEFAULT_MIN_COSINE
}

impl Default for RunConfigFile {
    fn default() -> Self {
        serde_json::from_str("{}").expect("every field has a default")
    }
}

impl RunConfigFile {
    pub fn load(path: &Path) -> CliResult<Self> {
        let mut c: Self = read_doc(path)?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut c.manifest, &mut c.out].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(c)
    }

    pub fn load_or_default(path: Option<&Path>) -> CliResult<Self> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }

    /// Crosscoder config for a dataset with the given models, width and size.
    pub fn crosscoder(&self, models: &[String], d_model: usize, n_tokens: usize) -> CliResult<CrosscoderConfig> {
        let model_ids = self.model_ids.clone().unwrap_or_else(|| models.to_vec());
        if model_ids != models {
            return Err(CliError::mismatch(format!(
                "config model_ids {model_ids:?} differ from manifest models {models:?}"
            )));
        }
        let mut c = CrosscoderConfig::new(model_ids, self.d_model.unwrap_or(d_model), 0);
        c.d_sparse = self.d_sparse;
        c.beta = self.beta;
        c.lr = self.lr;
        c.batch_size = self.batch_size;
        c.total_tokens = self.total_tokens.unwrap_or(n_tokens as u64);
        c.seed = self.seed;
        c.norm_kind = self.norm_kind;
        let steps_per_epoch = (n_tokens as u64).div_ceil(self.batch_size.max(1) as u64);
        c.checkpoint_every = self
            .checkpoint_every
            .unwrap_or((steps_per_epoch / CHECKPOINTS_PER_EPOCH).max(1));
        c.validate()?;
        Ok(c)
    }
}

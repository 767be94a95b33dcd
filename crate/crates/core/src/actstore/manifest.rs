use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::shard::{read_shard, ActivationShard};
use crate::error::{Error, Result};
use crate::numerics::l2_norm;

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

/// Index of aligned shard tuples, one shard per model.
///
/// Paths in `shard_groups` are stored relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub schema_version: u32,
    pub models: Vec<String>,
    pub shard_groups: Vec<Vec<PathBuf>>,
    /// Per-model multiplicative scale applied when batches are drawn.
    #[serde(default)]
    pub normalization: Option<BTreeMap<String, f64>>,
    #[serde(default)]
    pub source_tags: Vec<String>,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl DatasetManifest {
    pub fn new(models: Vec<String>, base_dir: impl Into<PathBuf>) -> Self {
        Self {
            schema_version: MANIFEST_SCHEMA_VERSION,
            models,
            shard_groups: Vec::new(),
            normalization: None,
            source_tags: Vec::new(),
            base_dir: base_dir.into(),
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m: Self = serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
        m.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        m.validate_structure()?;
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        self.validate_structure()?;
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn resolve(&self, rel: &Path) -> PathBuf {
        if rel.is_absolute() {
            rel.to_path_buf()
        } else {
            self.base_dir.join(rel)
        }
    }

    /// Checks everything that can be checked without reading shards.
    pub fn validate_structure(&self) -> Result<()> {
        if self.models.is_empty() {
            return Err(Error::InvalidManifest("no models listed".into()));
        }
        let mut seen = std::collections::BTreeSet::new();
        for m in &self.models {
            if !seen.insert(m) {
                return Err(Error::InvalidManifest(format!("duplicate model id {m:?}")));
            }
        }
        for (i, g) in self.shard_groups.iter().enumerate() {
            if g.len() != self.models.len() {
                return Err(Error::InvalidManifest(format!(
                    "shard group {i} has {} entries for {} models",
                    g.len(),
                    self.models.len()
                )));
            }
        }
        if let Some(norm) = &self.normalization {
            for m in &self.models {
                match norm.get(m) {
                    Some(&c) if c > 0.0 && c.is_finite() => {}
                    Some(&c) => {
                        return Err(Error::InvalidManifest(format!(
                            "scale for {m:?} must be positive, got {c}"
                        )))
                    }
                    None => return Err(Error::InvalidManifest(format!("no scale for model {m:?}"))),
                }
            }
            if let Some(extra) = norm.keys().find(|k| !self.models.contains(k)) {
                return Err(Error::InvalidManifest(format!(
                    "scale given for unknown model {extra:?}"
                )));
            }
        }
        Ok(())
    }

    /// Reads every shard of model `model_index`.
    pub fn read_model_shards(&self, model_index: usize) -> Result<Vec<ActivationShard>> {
        self.shard_groups
            .iter()
            .map(|g| read_shard(self.resolve(&g[model_index])))
            .collect()
    }

    /// Sets per-model scales so that the mean token L2 norm becomes `sqrt(d_model)`.
    pub fn estimate_normalization(&mut self, sample_size: usize) -> Result<()> {
        let mut norm = BTreeMap::new();
        for (i, m) in self.models.iter().enumerate() {
            let shards = self.read_model_shards(i)?;
            norm.insert(m.clone(), estimate_scale(&shards, sample_size)?);
        }
        self.normalization = Some(norm);
        Ok(())
    }

    pub fn scale_for(&self, model: &str) -> f64 {
        self.normalization
            .as_ref()
            .and_then(|n| n.get(model).copied())
            .unwrap_or(1.0)
    }
}

/// Scale `c` such that the mean L2 norm of `c·a` over sampled tokens is
/// `sqrt(d_model)`.
///
/// Tokens are sampled at evenly spaced positions across the concatenated
/// shards; `sample_size` at or above the token count uses every token.
pub fn estimate_scale(shards: &[ActivationShard], sample_size: usize) -> Result<f64> {
    if shards.is_empty() || sample_size == 0 {
        return Err(Error::InvalidShape(
            "scale estimation needs at least one shard and sample_size >= 1".into(),
        ));
    }
    let d_model = shards[0].d_model();
    if shards.iter().any(|s| s.d_model() != d_model) {
        return Err(Error::InvalidShape("shards disagree on d_model".into()));
    }
    let total: usize = shards.iter().map(|s| s.n_tokens()).sum();
    let take = sample_size.min(total);
    let row_at = |global: usize| {
        let mut g = global;
        for s in shards {
            if g < s.n_tokens() {
                return s.data.row(g);
            }
            g -= s.n_tokens();
        }
        unreachable!("index within total")
    };
    let mean: f64 = (0..take)
        .map(|i| l2_norm(row_at(((i as u128 * total as u128) / take as u128) as usize)))
        .sum::<f64>()
        / take as f64;
    if mean <= 0.0 || !mean.is_finite() {
        return Err(Error::DegenerateScale);
    }
    Ok((d_model as f64).sqrt() / mean)
}

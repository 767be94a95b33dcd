//! Checkpoint directories.
//!
//! `checkpoint.json` holds the config, loss log, stream position and a tensor
//! index; each tensor (parameters and Adam moments) is an activation-shard file
//! whose `model_id` field carries the tensor name.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::CrosscoderConfig;
use super::params::CrosscoderParams;
use super::train::{Checkpoint, LogEntry};
use crate::actstore::{read_shard, write_shard, ShardHeader, StreamPosition};
use crate::error::{Error, Result};
use crate::numerics::{AdamHyper, AdamState, Matrix};

pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;
pub const CHECKPOINT_FILE: &str = "checkpoint.json";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointDoc {
    schema_version: u32,
    step: u64,
    tokens_seen: u64,
    layer_index: u32,
    config: CrosscoderConfig,
    rng_state: StreamPosition,
    adam: AdamDoc,
    tensors: Vec<TensorEntry>,
    loss_log: Vec<LogEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct AdamDoc {
    hyper: AdamHyper,
    step_count: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    file: String,
    rows: usize,
    cols: usize,
}

fn tensor_file(i: usize, kind: &str) -> String {
    format!("{kind}_{i:02}.acts")
}

impl Checkpoint {
    /// Writes the checkpoint into `dir`, creating it if needed.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<PathBuf> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut entries = Vec::new();
        let tensors = self.params.tensors();
        for (i, (name, (rows, cols), values)) in tensors.iter().enumerate() {
            let state = &self.optimizer[i];
            let items: [(String, &[f32], &str); 3] = [
                (name.clone(), values, "param"),
                (format!("adam_m/{name}"), state.first_moment.as_slice(), "adam_m"),
                (format!("adam_v/{name}"), state.second_moment.as_slice(), "adam_v"),
            ];
            for (tname, data, kind) in items {
                let file = tensor_file(i, kind);
                let m = Matrix::from_vec(*rows, *cols, data.to_vec())?;
                write_shard(
                    dir.join(&file),
                    &ShardHeader::new(&tname, self.layer_index, *cols, *rows),
                    &m,
                    None,
                )?;
                entries.push(TensorEntry {
                    name: tname,
                    file,
                    rows: *rows,
                    cols: *cols,
                });
            }
        }
        let (hyper, step_count) = self
            .optimizer
            .first()
            .map(|s| (s.hyper, s.step_count))
            .unwrap_or((AdamHyper::default(), 0));
        let doc = CheckpointDoc {
            schema_version: CHECKPOINT_SCHEMA_VERSION,
            step: self.step,
            tokens_seen: self.tokens_seen,
            layer_index: self.layer_index,
            config: self.config.clone(),
            rng_state: self.rng_state,
            adam: AdamDoc { hyper, step_count },
            tensors: entries,
            loss_log: self.loss_log.clone(),
        };
        let path = dir.join(CHECKPOINT_FILE);
        let text = serde_json::to_string_pretty(&doc)?;
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(dir.to_path_buf())
    }

    /// Loads a checkpoint directory (or the `checkpoint.json` inside one).
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let (dir, json) = if path.is_dir() {
            (path.to_path_buf(), path.join(CHECKPOINT_FILE))
        } else {
            (
                path.parent().map(Path::to_path_buf).unwrap_or_default(),
                path.to_path_buf(),
            )
        };
        let text = std::fs::read_to_string(&json).map_err(|e| Error::io(&json, e))?;
        let doc: CheckpointDoc = serde_json::from_str(&text).map_err(|e| Error::format(&json, e.to_string()))?;
        if doc.schema_version != CHECKPOINT_SCHEMA_VERSION {
            return Err(Error::format(
                &json,
                format!("unsupported schema {}", doc.schema_version),
            ));
        }
        doc.config.validate()?;

        let cfg = &doc.config;
        let mut params = CrosscoderParams::<f32>::zeros(cfg.model_ids.clone(), cfg.d_model, cfg.d_sparse);
        let expected: Vec<(String, (usize, usize))> = params.tensors().into_iter().map(|(n, s, _)| (n, s)).collect();
        if doc.tensors.len() != expected.len() * 3 {
            return Err(Error::format(&json, "tensor index does not match the config"));
        }
        let mut optimizer = Vec::with_capacity(expected.len());
        {
            let mut slots = params.tensors_mut();
            for (i, (name, (rows, cols))) in expected.iter().enumerate() {
                let load = |j: usize, want: String| -> Result<Matrix<f32>> {
                    let e = &doc.tensors[3 * i + j];
                    let file = dir.join(&e.file);
                    let s = read_shard(&file)?;
                    if s.header.model_id != want || s.data.shape() != (*rows, *cols) {
                        return Err(Error::format(
                            &file,
                            format!("expected tensor {want} of shape {rows}x{cols}"),
                        ));
                    }
                    Ok(s.data)
                };
                let p = load(0, name.clone())?;
                slots[i].copy_from_slice(p.as_slice());
                let m = load(1, format!("adam_m/{name}"))?;
                let v = load(2, format!("adam_v/{name}"))?;
                optimizer.push(AdamState {
                    first_moment: m,
                    second_moment: v,
                    step_count: doc.adam.step_count,
                    hyper: doc.adam.hyper,
                });
            }
        }
        Ok(Checkpoint {
            step: doc.step,
            tokens_seen: doc.tokens_seen,
            layer_index: doc.layer_index,
            params,
            config: doc.config,
            loss_log: doc.loss_log,
            rng_state: doc.rng_state,
            optimizer,
        })
    }
}

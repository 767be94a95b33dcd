use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::actstore::ActivationDataset;
use crate::error::{Error, Result};
use crate::numerics::Matrix;
use crate::SCHEMA_VERSION;

/// Correctness of each model on one evaluation sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalRecord {
    pub sample_id: String,
    pub task: String,
    pub correct_by_model: BTreeMap<String, bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalRecords {
    pub schema_version: u32,
    pub records: Vec<EvalRecord>,
}

impl EvalRecords {
    pub fn new(records: Vec<EvalRecord>) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            records,
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let doc: Self = serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
        if doc.schema_version != SCHEMA_VERSION {
            return Err(Error::format(
                path,
                format!("unsupported schema {}", doc.schema_version),
            ));
        }
        Ok(doc)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }
}

/// Samples of one task that the base model gets wrong and the RL model right.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriticalSet {
    pub task: String,
    pub sample_ids: Vec<String>,
}

/// Groups critical samples by task, tasks in order of first appearance and
/// samples in input order.
pub fn select_critical(records: &[EvalRecord], base_id: &str, rl_id: &str) -> Result<Vec<CriticalSet>> {
    let mut sets: Vec<CriticalSet> = Vec::new();
    let mut slot: HashMap<&str, usize> = HashMap::new();
    for r in records {
        let label = |id: &str| {
            r.correct_by_model
                .get(id)
                .copied()
                .ok_or_else(|| Error::MissingLabel(r.sample_id.clone()))
        };
        let (base_ok, rl_ok) = (label(base_id)?, label(rl_id)?);
        let i = *slot.entry(r.task.as_str()).or_insert_with(|| {
            sets.push(CriticalSet {
                task: r.task.clone(),
                sample_ids: Vec::new(),
            });
            sets.len() - 1
        });
        if !base_ok && rl_ok {
            sets[i].sample_ids.push(r.sample_id.clone());
        }
    }
    Ok(sets)
}

/// Final-token activations of the critical samples, one row per sample in
/// set order, for the two named models.
pub fn critical_activations(
    data: &ActivationDataset,
    set: &CriticalSet,
    base_id: &str,
    rl_id: &str,
) -> Result<(Matrix<f32>, Matrix<f32>)> {
    let meta = data
        .token_meta()
        .ok_or_else(|| Error::InvalidManifest("activations carry no token metadata".into()))?;
    let mut row_of: HashMap<&str, usize> = HashMap::new();
    for (i, m) in meta.iter().enumerate() {
        if m.is_final_token {
            row_of.entry(m.sample_id.as_str()).or_insert(i);
        }
    }
    let rows = set
        .sample_ids
        .iter()
        .map(|id| {
            row_of
                .get(id.as_str())
                .copied()
                .ok_or_else(|| Error::InvalidManifest(format!("no final-token activation for sample {id:?}")))
        })
        .collect::<Result<Vec<_>>>()?;
    let pick = |id: &str| -> Result<Matrix<f32>> {
        let m = data
            .models
            .iter()
            .position(|x| x == id)
            .ok_or_else(|| Error::ModelSetMismatch(format!("model {id:?} not in {:?}", data.models)))?;
        Ok(data.activations()[m].gather_rows(&rows))
    };
    Ok((pick(base_id)?, pick(rl_id)?))
}

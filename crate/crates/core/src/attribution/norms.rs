use serde::{Deserialize, Serialize};

use crate::crosscoder::CrosscoderParams;
use crate::error::{Error, Result};
use crate::numerics::Real;
use crate::par;

/// Per-model L1 norms of every decoder column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureNorms {
    pub model_ids: Vec<String>,
    /// `norms[m][k]` is the norm of feature `k`'s decoder column in model `m`.
    pub norms: Vec<Vec<f64>>,
}

impl FeatureNorms {
    pub fn new(model_ids: Vec<String>, norms: Vec<Vec<f64>>) -> Result<Self> {
        if model_ids.len() != norms.len() {
            return Err(Error::InvalidShape(format!(
                "{} model ids for {} norm vectors",
                model_ids.len(),
                norms.len()
            )));
        }
        if norms.windows(2).any(|w| w[0].len() != w[1].len()) {
            return Err(Error::InvalidShape("norm vectors differ in length".into()));
        }
        if norms.iter().flatten().any(|x| !(x.is_finite() && *x >= 0.0)) {
            return Err(Error::InvalidShape("norms must be finite and non-negative".into()));
        }
        Ok(Self { model_ids, norms })
    }

    pub fn d_sparse(&self) -> usize {
        self.norms.first().map_or(0, Vec::len)
    }

    pub fn model_index(&self, id: &str) -> Result<usize> {
        self.model_ids
            .iter()
            .position(|m| m == id)
            .ok_or_else(|| Error::ModelSetMismatch(format!("model {id:?} not in {:?}", self.model_ids)))
    }

    pub fn of(&self, id: &str) -> Result<&[f64]> {
        Ok(&self.norms[self.model_index(id)?])
    }
}

pub fn decoder_l1_norms<T: Real>(params: &CrosscoderParams<T>) -> FeatureNorms {
    let (d, s) = (params.d_model(), params.d_sparse());
    let norms = params
        .dec
        .iter()
        .map(|dec| par::map_range(s, |k| (0..d).map(|r| dec.get(r, k).as_f64().abs()).sum()))
        .collect();
    FeatureNorms {
        model_ids: params.model_ids.clone(),
        norms,
    }
}

/// Share of feature `k`'s decoder mass that sits in the tuned model. `None`
/// when both columns are zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NrnVector {
    pub base_model_id: String,
    pub tuned_model_id: String,
    pub values: Vec<Option<f64>>,
}

impl NrnVector {
    pub fn defined(&self) -> impl Iterator<Item = f64> + '_ {
        self.values.iter().flatten().copied()
    }
}

pub fn nrn(norms: &FeatureNorms, base_id: &str, tuned_id: &str) -> Result<NrnVector> {
    let base = norms.of(base_id)?;
    let tuned = norms.of(tuned_id)?;
    let values = base
        .iter()
        .zip(tuned)
        .map(|(&o, &t)| {
            let denom = o + t;
            (denom > 0.0).then(|| t / denom)
        })
        .collect();
    Ok(NrnVector {
        base_model_id: base_id.into(),
        tuned_model_id: tuned_id.into(),
        values,
    })
}

/// Decoder mass of each feature split across models; each defined row lies on
/// the probability simplex.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MasTable {
    /// Column order.
    pub model_ids: Vec<String>,
    pub rows: Vec<Option<Vec<f64>>>,
}

impl MasTable {
    pub fn column(&self, model_id: &str) -> Result<Vec<Option<f64>>> {
        let c = self
            .model_ids
            .iter()
            .position(|m| m == model_id)
            .ok_or_else(|| Error::ModelSetMismatch(format!("model {model_id:?} not in {:?}", self.model_ids)))?;
        Ok(self.rows.iter().map(|r| r.as_ref().map(|r| r[c])).collect())
    }
}

/// Normalizes the norms of the models in `order` per feature. Three models give
/// the usual base/SFT/RL table; two give `(1 − NRN, NRN)`.
pub fn mas(norms: &FeatureNorms, order: &[&str]) -> Result<MasTable> {
    if order.len() < 2 {
        return Err(Error::ModelSetMismatch(format!(
            "need at least two models, got {order:?}"
        )));
    }
    let cols: Vec<&[f64]> = order.iter().map(|id| norms.of(id)).collect::<Result<_>>()?;
    let rows = (0..norms.d_sparse())
        .map(|k| {
            let total: f64 = cols.iter().map(|c| c[k]).sum();
            (total > 0.0).then(|| cols.iter().map(|c| c[k] / total).collect())
        })
        .collect();
    Ok(MasTable {
        model_ids: order.iter().map(|s| s.to_string()).collect(),
        rows,
    })
}

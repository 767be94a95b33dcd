use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::dictionary::{AtomRole, GroundTruthDictionary};
use crate::attribution::{decoder_l1_norms, mas, nrn};
use crate::crosscoder::CrosscoderParams;
use crate::error::Result;
use crate::numerics::{l2_norm, Real};
use crate::par;

/// Cosine above which an atom counts as recovered in the role summaries.
pub const RECOVERY_COSINE: f64 = 0.9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AtomRecovery {
    pub atom: usize,
    pub role: AtomRole,
    /// Model whose decoder columns were searched; `None` for atoms absent from
    /// every model.
    pub model_id: Option<String>,
    pub feature: Option<usize>,
    pub cosine: f64,
    /// NRN of the matched feature between the first and last model.
    pub nrn: Option<f64>,
    /// MAS row of the matched feature, in model order, for three models.
    pub mas: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoleSummary {
    pub count: usize,
    pub mean_cosine: f64,
    pub recovered_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveryReport {
    pub atoms: Vec<AtomRecovery>,
    pub by_role: BTreeMap<AtomRole, RoleSummary>,
}

impl RecoveryReport {
    /// Share of present atoms of `role` satisfying `pred`; 0 when there are none.
    pub fn rate(&self, role: AtomRole, pred: impl Fn(&AtomRecovery) -> bool) -> f64 {
        let of_role: Vec<&AtomRecovery> = self
            .atoms
            .iter()
            .filter(|a| a.role == role && a.model_id.is_some())
            .collect();
        if of_role.is_empty() {
            return 0.0;
        }
        of_role.iter().filter(|a| pred(a)).count() as f64 / of_role.len() as f64
    }
}

/// Matches every present atom to the learned decoder column with the highest
/// cosine in the first model that carries it (the base model for shared atoms)
/// and reports the attribution of that feature.
pub fn recovery_eval<T: Real>(params: &CrosscoderParams<T>, dict: &GroundTruthDictionary) -> Result<RecoveryReport> {
    let norms = decoder_l1_norms(params);
    let first = &dict.model_ids[0];
    let last = dict.model_ids.last().expect("non-empty");
    let nrn_v = nrn(&norms, first, last)?;
    let order: Vec<&str> = dict.model_ids.iter().map(String::as_str).collect();
    let mas_t = if order.len() == 3 {
        Some(mas(&norms, &order)?)
    } else {
        None
    };

    let d = params.d_model();
    let mut unit_cols = Vec::with_capacity(params.n_models());
    for m in 0..params.n_models() {
        unit_cols.push(par::map_range(params.d_sparse(), |k| {
            let c: Vec<f64> = (0..d).map(|r| params.dec[m].get(r, k).as_f64()).collect();
            let n = l2_norm(&c);
            c.into_iter()
                .map(|x| if n > 0.0 { x / n } else { 0.0 })
                .collect::<Vec<f64>>()
        }));
    }

    let mut atoms = Vec::with_capacity(dict.n_atoms());
    for j in 0..dict.n_atoms() {
        let home = dict.model_ids.iter().find(|id| dict.presence[*id][j] > 0.0);
        let Some(home) = home else {
            atoms.push(AtomRecovery {
                atom: j,
                role: dict.roles[j],
                model_id: None,
                feature: None,
                cosine: 0.0,
                nrn: None,
                mas: None,
            });
            continue;
        };
        let m = params.model_index(home)?;
        let atom = dict.atom(j);
        let (feature, cosine) = unit_cols[m]
            .iter()
            .enumerate()
            .map(|(k, c)| (k, c.iter().zip(atom).map(|(x, y)| x * y).sum::<f64>()))
            .fold(
                (0, f64::NEG_INFINITY),
                |best, cur| {
                    if cur.1 > best.1 {
                        cur
                    } else {
                        best
                    }
                },
            );
        atoms.push(AtomRecovery {
            atom: j,
            role: dict.roles[j],
            model_id: Some(home.clone()),
            feature: Some(feature),
            cosine,
            nrn: nrn_v.values[feature],
            mas: mas_t.as_ref().and_then(|t| t.rows[feature].clone()),
        });
    }

    let mut by_role = BTreeMap::new();
    for role in [
        AtomRole::Shared,
        AtomRole::BaseOnly,
        AtomRole::SftSpecific,
        AtomRole::RlSpecific,
        AtomRole::Generalization,
    ] {
        let present: Vec<&AtomRecovery> = atoms
            .iter()
            .filter(|a| a.role == role && a.model_id.is_some())
            .collect();
        if present.is_empty() {
            continue;
        }
        let n = present.len() as f64;
        by_role.insert(
            role,
            RoleSummary {
                count: present.len(),
                mean_cosine: present.iter().map(|a| a.cosine).sum::<f64>() / n,
                recovered_rate: present.iter().filter(|a| a.cosine > RECOVERY_COSINE).count() as f64 / n,
            },
        );
    }
    Ok(RecoveryReport { atoms, by_role })
}

/// Crosscoder whose decoder columns are the atoms themselves, scaled by each
/// model's presence, with tied encoders and zero biases.
pub fn planted_params(dict: &GroundTruthDictionary) -> CrosscoderParams<f32> {
    let (d, n) = (dict.d_model(), dict.n_atoms());
    let mut p = CrosscoderParams::<f32>::zeros(dict.model_ids.clone(), d, n.max(d));
    for (m, id) in dict.model_ids.iter().enumerate() {
        let pres = &dict.presence[id];
        for j in 0..n {
            let col: Vec<f32> = dict.atom(j).iter().map(|&x| (x * pres[j]) as f32).collect();
            p.dec[m].set_column(j, &col);
        }
        p.enc[m] = p.dec[m].transpose();
    }
    p
}

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::config::SynthConfig;
use crate::error::{Error, Result};
use crate::numerics::{dot, unit_sphere, Matrix};

/// Largest allowed |cosine| between two atoms.
pub const MAX_ATOM_COSINE: f64 = 0.3;
/// Draws per atom before giving up.
pub const ATOM_ATTEMPTS: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AtomRole {
    Shared,
    BaseOnly,
    SftSpecific,
    RlSpecific,
    Generalization,
}

impl AtomRole {
    pub fn as_str(self) -> &'static str {
        match self {
            AtomRole::Shared => "shared",
            AtomRole::BaseOnly => "base_only",
            AtomRole::SftSpecific => "sft_specific",
            AtomRole::RlSpecific => "rl_specific",
            AtomRole::Generalization => "generalization",
        }
    }
}

/// Planted features: unit directions, how strongly each model carries them
/// and how often they fire.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthDictionary {
    pub model_ids: Vec<String>,
    /// `n_atoms × d_model`, unit rows.
    pub atoms: Matrix<f64>,
    /// Per model, per atom scale in `[0, 1]`.
    pub presence: BTreeMap<String, Vec<f64>>,
    pub firing_rate: Vec<f64>,
    pub roles: Vec<AtomRole>,
}

impl GroundTruthDictionary {
    pub fn n_atoms(&self) -> usize {
        self.roles.len()
    }

    pub fn d_model(&self) -> usize {
        self.atoms.cols()
    }

    pub fn atom(&self, j: usize) -> &[f64] {
        self.atoms.row(j)
    }

    pub fn presence_of(&self, model_id: &str) -> Result<&[f64]> {
        self.presence
            .get(model_id)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::ModelSetMismatch(format!("model {model_id:?} not in the dictionary")))
    }

    /// Indices of atoms carrying `role`.
    pub fn with_role(&self, role: AtomRole) -> Vec<usize> {
        (0..self.n_atoms()).filter(|&j| self.roles[j] == role).collect()
    }

    /// RL-specific atoms currently present in the last (RL) model.
    pub fn active_rl_specific(&self) -> Vec<usize> {
        let rl = &self.presence[self.model_ids.last().expect("non-empty")];
        self.with_role(AtomRole::RlSpecific)
            .into_iter()
            .filter(|&j| rl[j] > 0.0)
            .collect()
    }

    pub fn max_abs_cosine(&self) -> f64 {
        let n = self.n_atoms();
        let mut worst = 0.0f64;
        for i in 0..n {
            for j in i + 1..n {
                worst = worst.max(dot(self.atom(i), self.atom(j)).abs());
            }
        }
        worst
    }
}

/// Draws near-orthogonal atoms by rejection sampling and tags them, in order:
/// shared, base-only, SFT-specific, RL-specific, generalization, dormant.
pub fn gen_dictionary<R: Rng + ?Sized>(config: &SynthConfig, rng: &mut R) -> Result<GroundTruthDictionary> {
    config.validate()?;
    let d = config.d_model;
    let n = config.n_atoms();
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(n);
    for _ in 0..n {
        let mut accepted = None;
        for _ in 0..ATOM_ATTEMPTS {
            let cand = unit_sphere(rng, d);
            if rows.iter().all(|r| dot(r, &cand).abs() < MAX_ATOM_COSINE) {
                accepted = Some(cand);
                break;
            }
        }
        rows.push(accepted.ok_or(Error::DictionaryInfeasible {
            attempts: ATOM_ATTEMPTS,
        })?);
    }
    let atoms = Matrix::from_rows(&rows).unwrap_or_else(|_| Matrix::zeros(0, d));

    let mut roles = Vec::with_capacity(n);
    roles.extend(std::iter::repeat_n(AtomRole::Shared, config.n_shared));
    roles.extend(std::iter::repeat_n(AtomRole::BaseOnly, config.n_base_only));
    roles.extend(std::iter::repeat_n(AtomRole::SftSpecific, config.n_sft_specific));
    roles.extend(std::iter::repeat_n(AtomRole::RlSpecific, config.n_rl_specific));
    roles.extend(std::iter::repeat_n(AtomRole::Generalization, config.n_generalization));
    let first_dormant = roles.len();
    roles.extend(std::iter::repeat_n(AtomRole::RlSpecific, config.n_dormant));

    let base = config.base_id();
    let rl = config.rl_id();
    let sft = config.sft_id();
    let mut presence = BTreeMap::new();
    for id in &config.model_ids {
        let p: Vec<f64> = roles
            .iter()
            .enumerate()
            .map(|(j, role)| {
                let on = match role {
                    AtomRole::Shared => true,
                    AtomRole::BaseOnly => id == base,
                    AtomRole::SftSpecific => Some(id.as_str()) == sft,
                    AtomRole::RlSpecific => id == rl && j < first_dormant,
                    AtomRole::Generalization => id == rl,
                };
                if on {
                    1.0
                } else {
                    0.0
                }
            })
            .collect();
        presence.insert(id.clone(), p);
    }
    Ok(GroundTruthDictionary {
        model_ids: config.model_ids.clone(),
        atoms,
        presence,
        firing_rate: vec![config.firing_rate; n],
        roles,
    })
}

/// One dictionary per pseudo-checkpoint. Between consecutive checkpoints each
/// active RL-specific atom is, with probability `turnover_rate`, retired and
/// replaced by a randomly chosen inactive RL-specific atom.
pub fn turnover_sequence<R: Rng + ?Sized>(
    dict: &GroundTruthDictionary,
    config: &SynthConfig,
    rng: &mut R,
) -> Vec<GroundTruthDictionary> {
    let rl = config.rl_id().to_string();
    let mut out = vec![dict.clone()];
    for _ in 1..config.n_checkpoints {
        let mut next = out.last().expect("non-empty").clone();
        let pres = next.presence.get_mut(&rl).expect("rl model present");
        let specific: Vec<usize> = next
            .roles
            .iter()
            .enumerate()
            .filter(|(_, r)| **r == AtomRole::RlSpecific)
            .map(|(j, _)| j)
            .collect();
        let active: Vec<usize> = specific.iter().copied().filter(|&j| pres[j] > 0.0).collect();
        for j in active {
            if rng.random::<f64>() >= config.turnover_rate {
                continue;
            }
            let idle: Vec<usize> = specific.iter().copied().filter(|&k| pres[k] == 0.0).collect();
            if idle.is_empty() {
                continue;
            }
            let k = idle[rng.random_range(0..idle.len())];
            pres[k] = pres[j];
            pres[j] = 0.0;
        }
        out.push(next);
    }
    out
}

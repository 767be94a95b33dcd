use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::crosscoder::{encode_single, CrosscoderParams};
use crate::error::{Error, Result};
use crate::numerics::{Matrix, Real};

pub const DEFAULT_FRACTION: f64 = 0.2;

/// Mean single-branch feature activation gap (RL minus base) over a task's
/// critical samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenScoreVector {
    pub task: String,
    pub scores: Vec<f64>,
    pub n_samples: usize,
}

pub fn gen_scores<T: Real>(
    params: &CrosscoderParams<T>,
    base_id: &str,
    rl_id: &str,
    task: &str,
    base_acts: &Matrix<T>,
    rl_acts: &Matrix<T>,
) -> Result<GenScoreVector> {
    if base_acts.rows() == 0 {
        return Err(Error::EmptyCriticalSet(task.into()));
    }
    if base_acts.shape() != rl_acts.shape() {
        return Err(Error::InvalidShape(format!(
            "base activations {:?} vs RL activations {:?}",
            base_acts.shape(),
            rl_acts.shape()
        )));
    }
    let f_base = encode_single(params, base_id, base_acts)?;
    let f_rl = encode_single(params, rl_id, rl_acts)?;
    let n = base_acts.rows();
    let mut scores = vec![0.0f64; params.d_sparse()];
    for r in 0..n {
        for ((s, &x), &y) in scores.iter_mut().zip(f_rl.row(r)).zip(f_base.row(r)) {
            *s += x.as_f64() - y.as_f64();
        }
    }
    scores.iter_mut().for_each(|s| *s /= n as f64);
    Ok(GenScoreVector {
        task: task.into(),
        scores,
        n_samples: n,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskFeatureSet {
    pub task: String,
    pub fraction: f64,
    pub threshold: f64,
    /// Ascending.
    pub features: Vec<usize>,
}

/// Keeps features scoring strictly above `fraction` of the best score. Nothing
/// is selected when no score is positive.
pub fn threshold_features(scores: &GenScoreVector, fraction: f64) -> Result<TaskFeatureSet> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidConfig(format!(
            "fraction must lie in (0, 1], got {fraction}"
        )));
    }
    let max = scores.scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let threshold = fraction * max;
    let features = if max > 0.0 {
        scores
            .scores
            .iter()
            .enumerate()
            .filter(|(_, &s)| s > threshold)
            .map(|(k, _)| k)
            .collect()
    } else {
        Vec::new()
    };
    Ok(TaskFeatureSet {
        task: scores.task.clone(),
        fraction,
        threshold,
        features,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairOverlap {
    pub task_a: String,
    pub task_b: String,
    /// `|A ∩ B| / min(|A|, |B|)`; absent when either set is empty.
    pub fraction: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureIntersection {
    pub tasks: Vec<String>,
    pub features: Vec<usize>,
    pub pairwise: Vec<PairOverlap>,
}

pub fn intersect(sets: &[TaskFeatureSet]) -> Result<FeatureIntersection> {
    let first = sets
        .first()
        .ok_or_else(|| Error::InvalidConfig("need at least one task feature set".into()))?;
    let as_sets: Vec<BTreeSet<usize>> = sets.iter().map(|s| s.features.iter().copied().collect()).collect();
    let mut common: BTreeSet<usize> = first.features.iter().copied().collect();
    for s in &as_sets[1..] {
        common = common.intersection(s).copied().collect();
    }
    let mut pairwise = Vec::new();
    for i in 0..sets.len() {
        for j in i + 1..sets.len() {
            let small = as_sets[i].len().min(as_sets[j].len());
            let shared = as_sets[i].intersection(&as_sets[j]).count();
            pairwise.push(PairOverlap {
                task_a: sets[i].task.clone(),
                task_b: sets[j].task.clone(),
                fraction: (small > 0).then(|| shared as f64 / small as f64),
            });
        }
    }
    Ok(FeatureIntersection {
        tasks: sets.iter().map(|s| s.task.clone()).collect(),
        features: common.into_iter().collect(),
        pairwise,
    })
}

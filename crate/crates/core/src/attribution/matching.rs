use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::ranking::RankedFeatures;
use crate::crosscoder::CrosscoderParams;
use crate::error::{Error, Result};
use crate::numerics::{l2_norm, Real};
use crate::par;

pub const DEFAULT_MIN_COSINE: f64 = 0.7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchedPair {
    pub a: usize,
    pub b: usize,
    pub cosine: f64,
}

/// One-to-one correspondence between the features of two crosscoders.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMatching {
    pub reference_model_id: String,
    pub min_cosine: f64,
    /// In the order they were accepted: descending cosine.
    pub pairs: Vec<MatchedPair>,
}

impl FeatureMatching {
    pub fn a_to_b(&self) -> BTreeMap<usize, usize> {
        self.pairs.iter().map(|p| (p.a, p.b)).collect()
    }

    pub fn b_to_a(&self) -> BTreeMap<usize, usize> {
        self.pairs.iter().map(|p| (p.b, p.a)).collect()
    }

    pub fn reversed(&self) -> Self {
        Self {
            reference_model_id: self.reference_model_id.clone(),
            min_cosine: self.min_cosine,
            pairs: self
                .pairs
                .iter()
                .map(|p| MatchedPair {
                    a: p.b,
                    b: p.a,
                    cosine: p.cosine,
                })
                .collect(),
        }
    }
}

/// Unit-normalized decoder columns of one model as rows; zero columns stay zero.
fn unit_columns<T: Real>(params: &CrosscoderParams<T>, model: usize) -> Vec<Vec<f64>> {
    let dec = &params.dec[model];
    par::map_range(params.d_sparse(), |k| {
        let col: Vec<f64> = dec.column(k).iter().map(|x| x.as_f64()).collect();
        let n = l2_norm(&col);
        if n > 0.0 {
            col.iter().map(|x| x / n).collect()
        } else {
            col
        }
    })
}

/// Greedy matching on the cosine similarity of the reference model's decoder
/// columns: pairs are accepted from most to least similar, skipping features
/// already used and stopping below `min_cosine`.
pub fn match_features<T: Real>(
    params_a: &CrosscoderParams<T>,
    params_b: &CrosscoderParams<T>,
    reference_model_id: &str,
    min_cosine: f64,
) -> Result<FeatureMatching> {
    let ma = params_a.model_index(reference_model_id)?;
    let mb = params_b.model_index(reference_model_id)?;
    if params_a.d_model() != params_b.d_model() {
        return Err(Error::ModelSetMismatch(format!(
            "d_model {} vs {}",
            params_a.d_model(),
            params_b.d_model()
        )));
    }
    let ua = unit_columns(params_a, ma);
    let ub = unit_columns(params_b, mb);
    let candidates: Vec<Vec<MatchedPair>> = par::map_range(ua.len(), |a| {
        ub.iter()
            .enumerate()
            .filter_map(|(b, col)| {
                let cosine: f64 = ua[a].iter().zip(col).map(|(x, y)| x * y).sum();
                (cosine >= min_cosine).then_some(MatchedPair { a, b, cosine })
            })
            .collect()
    });
    let mut candidates: Vec<MatchedPair> = candidates.into_iter().flatten().collect();
    candidates.sort_by(|x, y| y.cosine.total_cmp(&x.cosine).then(x.a.cmp(&y.a)).then(x.b.cmp(&y.b)));
    let mut used_a = BTreeSet::new();
    let mut used_b = BTreeSet::new();
    let pairs = candidates
        .into_iter()
        .filter(|p| {
            if used_a.contains(&p.a) || used_b.contains(&p.b) {
                return false;
            }
            used_a.insert(p.a);
            used_b.insert(p.b);
            true
        })
        .collect();
    Ok(FeatureMatching {
        reference_model_id: reference_model_id.into(),
        min_cosine,
        pairs,
    })
}

/// Matchings for every ordered pair `i < j` of checkpoints.
pub fn match_all<T: Real>(
    params: &[CrosscoderParams<T>],
    reference_model_id: &str,
    min_cosine: f64,
) -> Result<BTreeMap<(usize, usize), FeatureMatching>> {
    let mut out = BTreeMap::new();
    for i in 0..params.len() {
        for j in i + 1..params.len() {
            out.insert(
                (i, j),
                match_features(&params[i], &params[j], reference_model_id, min_cosine)?,
            );
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlapMatrix {
    pub labels: Vec<String>,
    pub top_n: usize,
    pub counts: Vec<Vec<usize>>,
    pub fractions: Vec<Vec<f64>>,
}

impl OverlapMatrix {
    pub fn mean_off_diagonal(&self) -> f64 {
        let c = self.labels.len();
        if c < 2 {
            return 0.0;
        }
        let mut sum = 0.0;
        for i in 0..c {
            for j in 0..c {
                if i != j {
                    sum += self.fractions[i][j];
                }
            }
        }
        sum / (c * (c - 1)) as f64
    }
}

/// Entry `(i, j)` counts top features of checkpoint `i` whose match in
/// checkpoint `j` is also in `j`'s top set. `matchings[(i, j)]` maps features
/// of `i` onto `j` for every `i < j`.
pub fn overlap_matrix(
    rankings: &[RankedFeatures],
    matchings: &BTreeMap<(usize, usize), FeatureMatching>,
) -> Result<OverlapMatrix> {
    let top_n = rankings.first().map_or(0, |r| r.top_n);
    if rankings.iter().any(|r| r.top_n != top_n) {
        return Err(Error::InvalidConfig("rankings use different top_n".into()));
    }
    let sets: Vec<BTreeSet<usize>> = rankings.iter().map(|r| r.indices().into_iter().collect()).collect();
    let c = rankings.len();
    let mut counts = vec![vec![0usize; c]; c];
    for i in 0..c {
        counts[i][i] = sets[i].len();
        for j in i + 1..c {
            let m = matchings
                .get(&(i, j))
                .ok_or_else(|| Error::InvalidConfig(format!("no matching between checkpoints {i} and {j}")))?
                .a_to_b();
            let n = sets[i]
                .iter()
                .filter(|a| m.get(a).is_some_and(|b| sets[j].contains(b)))
                .count();
            counts[i][j] = n;
            counts[j][i] = n;
        }
    }
    let fractions = counts
        .iter()
        .map(|row| row.iter().map(|&n| n as f64 / top_n.max(1) as f64).collect())
        .collect();
    Ok(OverlapMatrix {
        labels: rankings.iter().map(|r| r.label.clone()).collect(),
        top_n,
        counts,
        fractions,
    })
}

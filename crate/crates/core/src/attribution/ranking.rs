use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::matching::FeatureMatching;
use crate::error::{Error, Result};

pub const DEFAULT_TOP_N: usize = 50;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedEntry {
    pub index: usize,
    pub value: f64,
}

/// Top features of one checkpoint by descending value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedFeatures {
    pub label: String,
    pub top_n: usize,
    pub entries: Vec<RankedEntry>,
    /// Fewer than `top_n` defined values were available.
    pub short: bool,
}

impl RankedFeatures {
    pub fn indices(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.index).collect()
    }

    /// 1-based rank of each listed feature.
    pub fn rank_of(&self) -> BTreeMap<usize, usize> {
        self.entries.iter().enumerate().map(|(r, e)| (e.index, r + 1)).collect()
    }
}

/// Sorts defined values descending, ties by ascending index, and keeps `top_n`.
pub fn rank_values(values: &[Option<f64>], label: &str, top_n: usize) -> Result<RankedFeatures> {
    if top_n == 0 {
        return Err(Error::InvalidConfig("top_n must be at least 1".into()));
    }
    let mut entries: Vec<RankedEntry> = values
        .iter()
        .enumerate()
        .filter_map(|(index, v)| v.map(|value| RankedEntry { index, value }))
        .collect();
    entries.sort_by(|a, b| b.value.total_cmp(&a.value).then(a.index.cmp(&b.index)));
    let short = entries.len() < top_n;
    entries.truncate(top_n);
    Ok(RankedFeatures {
        label: label.into(),
        top_n,
        entries,
        short,
    })
}

pub fn rank_by_nrn(nrn: &super::NrnVector, label: &str, top_n: usize) -> Result<RankedFeatures> {
    rank_values(&nrn.values, label, top_n)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankShiftRow {
    pub old_index: Option<usize>,
    pub new_index: Option<usize>,
    pub old_rank: Option<usize>,
    pub new_rank: Option<usize>,
    pub shift: Option<usize>,
    /// In the top set on one side only.
    pub blank: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankShiftTable {
    pub from_label: String,
    pub to_label: String,
    pub rows: Vec<RankShiftRow>,
}

impl RankShiftTable {
    pub fn blank_count(&self) -> usize {
        self.rows.iter().filter(|r| r.blank).count()
    }
}

/// Rank changes between consecutive checkpoints; `matching` maps features of
/// `old` onto features of `new`. Rows follow the old ranking, then features
/// that only appear in the new one, in new-rank order.
pub fn rank_shift(old: &RankedFeatures, new: &RankedFeatures, matching: &FeatureMatching) -> Result<RankShiftTable> {
    if old.top_n != new.top_n {
        return Err(Error::InvalidConfig(format!(
            "rankings use different top_n ({} vs {})",
            old.top_n, new.top_n
        )));
    }
    let forward = matching.a_to_b();
    let new_rank = new.rank_of();
    let mut claimed = BTreeMap::new();
    let mut rows = Vec::new();
    for (r, e) in old.entries.iter().enumerate() {
        let old_rank = r + 1;
        let hit = forward.get(&e.index).and_then(|b| new_rank.get(b).map(|nr| (*b, *nr)));
        match hit {
            Some((b, nr)) => {
                claimed.insert(b, ());
                rows.push(RankShiftRow {
                    old_index: Some(e.index),
                    new_index: Some(b),
                    old_rank: Some(old_rank),
                    new_rank: Some(nr),
                    shift: Some(old_rank.abs_diff(nr)),
                    blank: false,
                });
            }
            None => rows.push(RankShiftRow {
                old_index: Some(e.index),
                new_index: forward.get(&e.index).copied(),
                old_rank: Some(old_rank),
                new_rank: None,
                shift: None,
                blank: true,
            }),
        }
    }
    let backward = matching.b_to_a();
    for (r, e) in new.entries.iter().enumerate() {
        if !claimed.contains_key(&e.index) {
            rows.push(RankShiftRow {
                old_index: backward.get(&e.index).copied(),
                new_index: Some(e.index),
                old_rank: None,
                new_rank: Some(r + 1),
                shift: None,
                blank: true,
            });
        }
    }
    Ok(RankShiftTable {
        from_label: old.label.clone(),
        to_label: new.label.clone(),
        rows,
    })
}

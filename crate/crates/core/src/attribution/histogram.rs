use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Uniform bins over `[0, 1]`; the last bin is closed on the right.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub bin_edges: Vec<f64>,
    pub counts: Vec<u64>,
}

impl Histogram {
    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }
}

/// Counts the defined values; values outside `[0, 1]` land in the edge bins.
pub fn histogram<'a>(values: impl IntoIterator<Item = &'a Option<f64>>, bin_count: usize) -> Result<Histogram> {
    if bin_count == 0 {
        return Err(Error::InvalidConfig("bin count must be at least 1".into()));
    }
    let mut counts = vec![0u64; bin_count];
    for v in values.into_iter().flatten() {
        let b = ((v * bin_count as f64).floor().max(0.0) as usize).min(bin_count - 1);
        counts[b] += 1;
    }
    let bin_edges = (0..=bin_count).map(|i| i as f64 / bin_count as f64).collect();
    Ok(Histogram { bin_edges, counts })
}

use serde::{Deserialize, Serialize};

use super::Pack;

/// Count of packs whose visual-token total lies in `[lo, hi)`; `hi = None`
/// is the open-ended last bucket.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HistogramBucket {
    pub lo: u64,
    pub hi: Option<u64>,
    pub count: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FillReport {
    pub pack_count: u64,
    pub samples: u64,
    pub used_tokens: u64,
    pub pad_tokens: u64,
    /// `sum(used) / sum(sequence_length)`; 1.0 when there are no packs.
    pub mean_fill: f64,
    pub min_fill: f64,
    pub visual_histogram: Vec<HistogramBucket>,
}

/// Fill statistics over packs. `edges` must be strictly increasing; they
/// split visual-token counts into `[0, e0), [e0, e1), ..., [e_last, inf)`.
pub fn fill_report(packs: &[Pack], edges: &[u64]) -> FillReport {
    assert!(
        edges.windows(2).all(|w| w[0] < w[1]),
        "histogram edges must be strictly increasing"
    );
    let mut bounds = vec![0];
    bounds.extend(edges.iter().copied().filter(|&e| e > 0));
    let mut visual_histogram: Vec<HistogramBucket> = bounds
        .iter()
        .enumerate()
        .map(|(i, &lo)| HistogramBucket {
            lo,
            hi: bounds.get(i + 1).copied(),
            count: 0,
        })
        .collect();

    let mut used = 0u64;
    let mut capacity = 0u64;
    let mut min_fill = 1.0f64;
    let mut samples = 0u64;
    for pack in packs {
        used += pack.used_tokens;
        capacity += pack.sequence_length();
        samples += pack.entries.len() as u64;
        min_fill = min_fill.min(pack.used_tokens as f64 / pack.sequence_length() as f64);
        let visual = pack.visual_tokens();
        let bucket = bounds.partition_point(|&lo| lo <= visual) - 1;
        visual_histogram[bucket].count += 1;
    }
    FillReport {
        pack_count: packs.len() as u64,
        samples,
        used_tokens: used,
        pad_tokens: capacity - used,
        mean_fill: if capacity == 0 {
            1.0
        } else {
            used as f64 / capacity as f64
        },
        min_fill,
        visual_histogram,
    }
}

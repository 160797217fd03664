//! Compressed attention masks for packed sequences.
//!
//! A pack's mask is block-diagonal: tokens attend only within their own
//! sample, and padding attends to nothing. The cumulative segment offsets
//! are enough to describe it, which is the form variable-length attention
//! kernels take (`cu_seqlens`).

use serde::{Deserialize, Serialize};

use super::Pack;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    BlockDiagonal,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskDescriptor {
    pub bounds: Vec<u64>,
    pub total_length: u64,
    pub mode: MaskMode,
}

impl MaskDescriptor {
    pub fn from_pack(pack: &Pack) -> Self {
        Self {
            bounds: pack.segment_bounds.clone(),
            total_length: pack.sequence_length(),
            mode: MaskMode::BlockDiagonal,
        }
    }

    pub fn used_tokens(&self) -> u64 {
        self.bounds.last().copied().unwrap_or(0)
    }

    pub fn segment_count(&self) -> usize {
        self.bounds.len().saturating_sub(1)
    }

    pub fn max_segment_len(&self) -> u64 {
        self.bounds.windows(2).map(|w| w[1] - w[0]).max().unwrap_or(0)
    }

    /// Offsets as the `i32` cumulative lengths attention kernels expect.
    pub fn cu_seqlens(&self) -> Vec<i32> {
        self.bounds
            .iter()
            .map(|&b| i32::try_from(b).expect("pack offsets fit in i32"))
            .collect()
    }

    /// Segment id of each position, `None` for padding.
    pub fn segment_ids(&self) -> Vec<Option<usize>> {
        let mut ids = vec![None; self.total_length as usize];
        for (seg, w) in self.bounds.windows(2).enumerate() {
            for slot in &mut ids[w[0] as usize..w[1] as usize] {
                *slot = Some(seg);
            }
        }
        ids
    }

    /// Dense row-major `total_length x total_length` boolean mask.
    pub fn expand(&self) -> Vec<bool> {
        let n = self.total_length as usize;
        let mut dense = vec![false; n * n];
        for w in self.bounds.windows(2) {
            let (lo, hi) = (w[0] as usize, w[1] as usize);
            for row in lo..hi {
                dense[row * n + lo..row * n + hi].fill(true);
            }
        }
        dense
    }
}

/// Compressed mask for a pack.
pub fn mask_descriptor(pack: &Pack) -> MaskDescriptor {
    MaskDescriptor::from_pack(pack)
}

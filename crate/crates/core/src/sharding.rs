//! Deterministic assignment of samples to data-parallel ranks.
//!
//! The manifest is permuted with a Fisher-Yates shuffle driven by SplitMix64
//! and then dealt round-robin: shuffled position `i` goes to rank
//! `i % dp_ranks`. Both algorithms are pinned (see [`SHUFFLE_ALGORITHM`]) so
//! a plan can be rebuilt bit-for-bit by any implementation:
//!
//! * SplitMix64: `state += 0x9E3779B97F4A7C15`, then
//!   `z = (z ^ z>>30) * 0xBF58476D1CE4E5B9`, `z = (z ^ z>>27) * 0x94D049BB133111EB`,
//!   output `z ^ z>>31`.
//! * Uniform draw below `n`: reject outputs `< 2^64 mod n`, return `r % n`.
//! * Shuffle: for `i` from `len-1` down to `1`, swap `i` with a draw below `i+1`.
//! * Epoch `e` seeds the generator with `mix(seed, e)`, the first SplitMix64
//!   output of `seed ^ e * 0xD1B54A32D192ED03`.

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::manifest::{hex, manifest_digest, SampleKey, SampleRecord};

pub const SHUFFLE_ALGORITHM: &str = "splitmix64-fisher-yates-v1";

#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Unbiased draw from `0..bound`.
    pub fn below(&mut self, bound: u64) -> u64 {
        assert!(bound > 0, "empty range");
        let threshold = bound.wrapping_neg() % bound;
        loop {
            let r = self.next_u64();
            if r >= threshold {
                return r % bound;
            }
        }
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }
}

/// Seed for a given epoch.
pub fn epoch_seed(seed: u64, epoch: u64) -> u64 {
    SplitMix64::new(seed ^ epoch.wrapping_mul(0xD1B5_4A32_D192_ED03)).next_u64()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Shuffle {
    /// Keep manifest order; only round-robin dealing applies.
    Identity,
    Seeded(u64),
}

impl Shuffle {
    fn seed(&self) -> Option<u64> {
        match *self {
            Shuffle::Identity => None,
            Shuffle::Seeded(s) => Some(s),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShardPlan {
    pub dp_ranks: usize,
    /// `None` for an unshuffled plan.
    pub seed: Option<u64>,
    pub epoch: u64,
    pub shuffle: String,
    pub manifest_digest: String,
    /// `assignment[rank]` is that rank's ordered shard.
    pub assignment: Vec<Vec<SampleKey>>,
}

/// Seeded plan for epoch 0.
pub fn build_plan(manifest: &[SampleRecord], dp_ranks: usize, seed: u64) -> Result<ShardPlan> {
    ShardPlan::build(manifest, dp_ranks, Shuffle::Seeded(seed), 0)
}

impl ShardPlan {
    pub fn build(manifest: &[SampleRecord], dp_ranks: usize, shuffle: Shuffle, epoch: u64) -> Result<Self> {
        if dp_ranks == 0 {
            return Err(Error::Config("dp_ranks must be at least 1".into()));
        }
        let mut order: Vec<usize> = (0..manifest.len()).collect();
        if let Shuffle::Seeded(seed) = shuffle {
            SplitMix64::new(epoch_seed(seed, epoch)).shuffle(&mut order);
        }
        let mut assignment = vec![Vec::with_capacity(manifest.len() / dp_ranks + 1); dp_ranks];
        for (pos, &i) in order.iter().enumerate() {
            assignment[pos % dp_ranks].push(manifest[i].key());
        }
        Ok(Self {
            dp_ranks,
            seed: shuffle.seed(),
            epoch,
            shuffle: SHUFFLE_ALGORITHM.to_string(),
            manifest_digest: manifest_digest(manifest),
            assignment,
        })
    }

    /// Same manifest and seed, next epoch.
    pub fn for_epoch(&self, manifest: &[SampleRecord], epoch: u64) -> Result<Self> {
        self.verify_manifest(manifest)?;
        let shuffle = self.seed.map_or(Shuffle::Identity, Shuffle::Seeded);
        Self::build(manifest, self.dp_ranks, shuffle, epoch)
    }

    pub fn shard(&self, rank: usize) -> Result<&[SampleKey]> {
        self.assignment
            .get(rank)
            .map(Vec::as_slice)
            .ok_or(Error::RankOutOfRange {
                rank,
                dp_ranks: self.dp_ranks,
            })
    }

    pub fn shard_len(&self, rank: usize) -> Result<u64> {
        Ok(self.shard(rank)?.len() as u64)
    }

    pub fn total_samples(&self) -> usize {
        self.assignment.iter().map(Vec::len).sum()
    }

    /// Content hash over everything that determines the assignment.
    pub fn fingerprint(&self) -> String {
        let seed = self.seed.map_or_else(|| "none".to_string(), |s| s.to_string());
        let mut hasher = Sha256::new();
        hasher.update(
            format!(
                "shard-plan\n{}\n{}\n{}\n{}\n{}\n",
                self.shuffle, self.dp_ranks, seed, self.epoch, self.manifest_digest
            )
            .as_bytes(),
        );
        hex(&hasher.finalize())
    }

    pub fn verify_manifest(&self, manifest: &[SampleRecord]) -> Result<()> {
        let actual = manifest_digest(manifest);
        if actual != self.manifest_digest {
            return Err(Error::ManifestMismatch {
                expected: self.manifest_digest.clone(),
                actual,
            });
        }
        Ok(())
    }

    /// Structural checks for a plan read from disk.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::CorruptState(format!("shard plan: {msg}")));
        if self.dp_ranks == 0 || self.assignment.len() != self.dp_ranks {
            return bad(format!(
                "{} rank lists for dp_ranks {}",
                self.assignment.len(),
                self.dp_ranks
            ));
        }
        if self.shuffle != SHUFFLE_ALGORITHM {
            return bad(format!("unknown shuffle algorithm '{}'", self.shuffle));
        }
        let sizes = self.assignment.iter().map(Vec::len);
        let (lo, hi) = (sizes.clone().min().unwrap_or(0), sizes.max().unwrap_or(0));
        if hi - lo > 1 {
            return bad(format!("rank sizes range {lo}..={hi}"));
        }
        let mut seen = HashSet::new();
        for key in self.assignment.iter().flatten() {
            if !seen.insert(key) {
                return bad(format!("{key} assigned twice"));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(self)?;
        bytes.push(b'\n');
        write_atomic(path, &bytes)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let plan: Self = serde_json::from_slice(&bytes)
            .map_err(|e| Error::CorruptState(format!("{}: {e}", path.display())))?;
        plan.validate()?;
        Ok(plan)
    }
}

/// The keys a rank reads, in order.
pub fn rank_stream(plan: &ShardPlan, rank: usize) -> Result<impl Iterator<Item = &SampleKey> + '_> {
    Ok(plan.shard(rank)?.iter())
}

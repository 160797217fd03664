//! Consumed-data tracking and exact resume.
//!
//! Each rank owns a cursor into its shard: how many samples the packer has
//! taken. State is only persisted at pack boundaries, together with the keys
//! still sitting in open packs, so a restarted packer rebuilds its window
//! exactly and emits the same remaining packs byte for byte.

use std::collections::HashMap;
use std::path::Path;

use log::{debug, warn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::manifest::{hex, SampleKey, SampleRecord};
use crate::packing::{OnlinePacker, Pack, PackItem};
use crate::sharding::ShardPlan;

pub const STATE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankCursor {
    pub rank: usize,
    pub cursor: u64,
    pub last_pack_id: Option<u64>,
    pub shard_len: u64,
    /// Keys of packs still open at the last boundary, in creation order.
    #[serde(default)]
    pub open_packs: Vec<Vec<SampleKey>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrackerState {
    pub version: u32,
    pub plan_fingerprint: String,
    pub epoch: u64,
    /// Digest of the packing settings; `None` until a packer records into it.
    #[serde(default)]
    pub pack_config: Option<String>,
    pub ranks: Vec<RankCursor>,
}

impl TrackerState {
    /// Fresh state with every cursor at zero.
    pub fn new(plan: &ShardPlan) -> Self {
        Self {
            version: STATE_VERSION,
            plan_fingerprint: plan.fingerprint(),
            epoch: plan.epoch,
            pack_config: None,
            ranks: plan
                .assignment
                .iter()
                .enumerate()
                .map(|(rank, shard)| RankCursor {
                    rank,
                    cursor: 0,
                    last_pack_id: None,
                    shard_len: shard.len() as u64,
                    open_packs: Vec::new(),
                })
                .collect(),
        }
    }

    pub fn rank(&self, rank: usize) -> Result<&RankCursor> {
        self.ranks.get(rank).ok_or(Error::RankOutOfRange {
            rank,
            dp_ranks: self.ranks.len(),
        })
    }

    pub fn cursor(&self, rank: usize) -> Result<u64> {
        Ok(self.rank(rank)?.cursor)
    }

    /// Advance `rank` by `n_samples` and mark `pack_id` as its last emitted
    /// pack. The receiver is left untouched.
    pub fn record_consumed(&self, rank: usize, n_samples: u64, pack_id: u64) -> Result<Self> {
        let open = self.rank(rank)?.open_packs.clone();
        self.record_boundary(rank, n_samples, Some(pack_id), open)
    }

    /// Like [`record_consumed`](Self::record_consumed), also replacing the
    /// open-pack snapshot.
    pub fn record_boundary(
        &self,
        rank: usize,
        n_samples: u64,
        pack_id: Option<u64>,
        open_packs: Vec<Vec<SampleKey>>,
    ) -> Result<Self> {
        let current = self.rank(rank)?;
        if current.cursor + n_samples > current.shard_len {
            return Err(Error::CursorOverflow {
                rank,
                cursor: current.cursor,
                requested: n_samples,
                shard_len: current.shard_len,
            });
        }
        if n_samples == 0 {
            debug!("rank {rank}: consumed 0 samples at pack {pack_id:?}");
        }
        let mut next = self.clone();
        let slot = &mut next.ranks[rank];
        slot.cursor += n_samples;
        if pack_id.is_some() {
            slot.last_pack_id = pack_id;
        }
        slot.open_packs = open_packs;
        Ok(next)
    }

    fn check_plan(&self, plan: &ShardPlan) -> Result<()> {
        let actual = plan.fingerprint();
        if self.plan_fingerprint != actual {
            return Err(Error::FingerprintMismatch {
                expected: self.plan_fingerprint.clone(),
                actual,
            });
        }
        Ok(())
    }

    /// Structural checks for state read from disk.
    pub fn validate(&self) -> Result<()> {
        if self.version != STATE_VERSION {
            return Err(Error::StateVersion {
                found: self.version,
                expected: STATE_VERSION,
            });
        }
        for (i, r) in self.ranks.iter().enumerate() {
            if r.rank != i {
                return Err(Error::CorruptState(format!(
                    "rank entry {i} is labelled {}",
                    r.rank
                )));
            }
            if r.cursor > r.shard_len {
                return Err(Error::CorruptState(format!(
                    "rank {i} cursor {} beyond shard length {}",
                    r.cursor, r.shard_len
                )));
            }
            let open: u64 = r.open_packs.iter().map(|p| p.len() as u64).sum();
            if open > r.cursor {
                return Err(Error::CorruptState(format!(
                    "rank {i} holds {open} open samples but consumed only {}",
                    r.cursor
                )));
            }
        }
        Ok(())
    }
}

/// The rest of `rank`'s shard after its recorded cursor.
pub fn resume_stream<'a>(
    plan: &'a ShardPlan,
    state: &TrackerState,
    rank: usize,
) -> Result<impl Iterator<Item = &'a SampleKey> + 'a> {
    state.check_plan(plan)?;
    let shard = plan.shard(rank)?;
    let cursor = state.cursor(rank)?;
    if cursor > shard.len() as u64 {
        return Err(Error::CursorOverflow {
            rank,
            cursor,
            requested: 0,
            shard_len: shard.len() as u64,
        });
    }
    Ok(shard[cursor as usize..].iter())
}

pub fn checkpoint(state: &TrackerState, path: impl AsRef<Path>) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(state)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

pub fn restore(path: impl AsRef<Path>) -> Result<TrackerState> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    // Read the version on its own first so a future format reports as a
    // version mismatch rather than a parse failure.
    #[derive(Deserialize)]
    struct Versioned {
        version: u32,
    }
    let versioned: Versioned = serde_json::from_slice(&bytes)
        .map_err(|e| Error::CorruptState(format!("{}: {e}", path.display())))?;
    if versioned.version != STATE_VERSION {
        return Err(Error::StateVersion {
            found: versioned.version,
            expected: STATE_VERSION,
        });
    }
    let state: TrackerState = serde_json::from_slice(&bytes)
        .map_err(|e| Error::CorruptState(format!("{}: {e}", path.display())))?;
    state.validate()?;
    Ok(state)
}

/// Digest of every setting that changes how samples are packed.
pub fn pack_config_digest(cfg: &PipelineConfig) -> String {
    let text = format!(
        "pack-config\n{}\n{}\n{}\n{}\n{:?}\n{}\n",
        cfg.sequence_length, cfg.min_pixels, cfg.max_pixels, cfg.visual_token_cap, cfg.pack_window, cfg.patch
    );
    hex(&Sha256::digest(text.as_bytes()))
}

/// What to do with a sample that cannot fit any pack.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OversizePolicy {
    Fail,
    Skip,
}

/// One pack boundary: the packs just emitted and the state to persist.
#[derive(Debug, Clone)]
pub struct Boundary {
    pub packs: Vec<Pack>,
    pub state: TrackerState,
}

/// Packs one rank's shard, resumable from any recorded boundary.
pub struct RankPacker<'a> {
    plan: &'a ShardPlan,
    rank: usize,
    cfg: PipelineConfig,
    records: HashMap<&'a SampleKey, &'a SampleRecord>,
    packer: Option<OnlinePacker>,
    state: TrackerState,
    policy: OversizePolicy,
    skipped: Vec<SampleKey>,
}

impl<'a> RankPacker<'a> {
    /// Start or resume packing `rank`. With `state`, the plan fingerprint and
    /// packing settings must match what produced it.
    pub fn new(
        manifest: &'a [SampleRecord],
        plan: &'a ShardPlan,
        rank: usize,
        cfg: &PipelineConfig,
        state: Option<TrackerState>,
        policy: OversizePolicy,
    ) -> Result<Self> {
        plan.verify_manifest(manifest)?;
        plan.shard(rank)?;
        let digest = pack_config_digest(cfg);
        let mut state = match state {
            Some(state) => {
                state.validate()?;
                state.check_plan(plan)?;
                if let Some(recorded) = &state.pack_config {
                    if *recorded != digest {
                        return Err(Error::CorruptState(
                            "packing settings differ from the ones the state was recorded with".into(),
                        ));
                    }
                }
                if state.ranks.len() != plan.dp_ranks {
                    return Err(Error::CorruptState(format!(
                        "state has {} ranks, plan has {}",
                        state.ranks.len(),
                        plan.dp_ranks
                    )));
                }
                state
            }
            None => TrackerState::new(plan),
        };
        state.pack_config = Some(digest);

        let records: HashMap<&SampleKey, &SampleRecord> = HashMap::new();
        let mut this = Self {
            plan,
            rank,
            cfg: cfg.clone(),
            records,
            packer: None,
            state,
            policy,
            skipped: Vec::new(),
        };
        // Keys only borrow from the plan; records from the manifest.
        let keys: HashMap<SampleKey, &'a SampleRecord> = manifest.iter().map(|r| (r.key(), r)).collect();
        for key in plan.shard(rank)? {
            let record = keys
                .get(key)
                .ok_or_else(|| Error::CorruptState(format!("plan key {key} is not in the manifest")))?;
            this.records.insert(key, record);
        }

        let slot = this.state.rank(rank)?.clone();
        let open = slot
            .open_packs
            .iter()
            .map(|group| group.iter().map(|k| this.item(k)).collect::<Result<Vec<_>>>())
            .collect::<Result<Vec<_>>>()?;
        let next_id = slot.last_pack_id.map_or(0, |id| id + 1);
        let finished = slot.cursor == slot.shard_len && slot.open_packs.is_empty();
        if !finished {
            this.packer = Some(OnlinePacker::restore(cfg, open, next_id, slot.cursor)?);
        }
        Ok(this)
    }

    fn item(&self, key: &SampleKey) -> Result<PackItem> {
        let record = self
            .records
            .get(key)
            .ok_or_else(|| Error::CorruptState(format!("{key} is not in rank {}'s shard", self.rank)))?;
        PackItem::from_record(record, &self.cfg)
    }

    pub fn state(&self) -> &TrackerState {
        &self.state
    }

    pub fn into_state(self) -> TrackerState {
        self.state
    }

    /// Samples skipped under [`OversizePolicy::Skip`] during this run.
    pub fn skipped(&self) -> &[SampleKey] {
        &self.skipped
    }

    /// Feed samples until at least one pack is emitted (or the shard runs
    /// out and everything is flushed). `None` once the shard is exhausted.
    pub fn next_boundary(&mut self) -> Result<Option<Boundary>> {
        let Some(packer) = self.packer.as_mut() else {
            return Ok(None);
        };
        let shard = self.plan.shard(self.rank)?;
        let start = self.state.cursor(self.rank)?;
        let mut position = start;
        let mut taken = 0u64;
        while (position as usize) < shard.len() {
            let key = &shard[position as usize];
            position += 1;
            taken += 1;
            let record = self.records[key];
            let pushed = PackItem::from_record(record, &self.cfg).and_then(|item| packer.push(item));
            let packs = match pushed {
                Ok(packs) => packs,
                Err(
                    e @ (Error::OversizedSample { .. }
                    | Error::EmptySample(_)
                    | Error::ResizeInfeasible { .. }),
                ) if self.policy == OversizePolicy::Skip => {
                    warn!("rank {}: skipping {key}: {e}", self.rank);
                    self.skipped.push(key.clone());
                    continue;
                }
                Err(e) => return Err(e),
            };
            if let Some(last) = packs.last() {
                let last_id = last.pack_id;
                self.state =
                    self.state
                        .record_boundary(self.rank, taken, Some(last_id), packer.open_packs())?;
                return Ok(Some(Boundary {
                    packs,
                    state: self.state.clone(),
                }));
            }
        }

        let packer = self.packer.take().expect("checked above");
        let packs = packer.finish();
        let last_id = packs.last().map(|p| p.pack_id);
        self.state = self
            .state
            .record_boundary(self.rank, taken, last_id, Vec::new())?;
        if packs.is_empty() && taken == 0 {
            return Ok(None);
        }
        Ok(Some(Boundary {
            packs,
            state: self.state.clone(),
        }))
    }

    /// Drain every remaining boundary.
    pub fn run_to_end(&mut self) -> Result<Vec<Pack>> {
        let mut out = Vec::new();
        while let Some(boundary) = self.next_boundary()? {
            out.extend(boundary.packs);
        }
        Ok(out)
    }
}

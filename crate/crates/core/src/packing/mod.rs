//! Packing whole samples into fixed-length training sequences.
//!
//! [`OnlinePacker`] is the streaming path: first-fit over a bounded window of
//! open packs, scanned in creation order. [`pack_offline`] is the
//! first-fit-decreasing baseline over the whole input. Both enforce the
//! sequence budget and the per-pack visual-token cap, and neither ever
//! splits a sample.

mod index;
mod mask;
mod report;

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::config::{PackWindow, PipelineConfig, VisualCap};
use crate::error::{Error, Result};
use crate::manifest::{SampleKey, SampleRecord};

use index::FirstFitIndex;
pub use mask::{mask_descriptor, MaskDescriptor, MaskMode};
pub use report::{fill_report, FillReport, HistogramBucket};

/// A sample reduced to what packing needs.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct PackItem {
    pub key: SampleKey,
    pub tokens: u64,
    pub visual_tokens: u64,
}

impl PackItem {
    pub fn new(key: SampleKey, tokens: u64, visual_tokens: u64) -> Self {
        Self {
            key,
            tokens,
            visual_tokens,
        }
    }

    /// Resolve token counts for a record under `cfg`.
    pub fn from_record(record: &SampleRecord, cfg: &PipelineConfig) -> Result<Self> {
        let visual_tokens = record.visual_tokens(cfg)?;
        Ok(Self {
            key: record.key(),
            tokens: record.text_tokens + visual_tokens,
            visual_tokens,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PackEntry {
    pub dataset_id: String,
    pub sample_index: u64,
    pub tokens: u64,
    pub visual_tokens: u64,
}

impl PackEntry {
    pub fn key(&self) -> SampleKey {
        SampleKey::new(self.dataset_id.clone(), self.sample_index)
    }
}

impl From<PackItem> for PackEntry {
    fn from(item: PackItem) -> Self {
        Self {
            dataset_id: item.key.dataset_id,
            sample_index: item.key.sample_index,
            tokens: item.tokens,
            visual_tokens: item.visual_tokens,
        }
    }
}

/// One fixed-length sequence: whole samples followed by padding.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Pack {
    pub pack_id: u64,
    pub entries: Vec<PackEntry>,
    #[serde(rename = "used")]
    pub used_tokens: u64,
    #[serde(rename = "pad")]
    pub pad_tokens: u64,
    /// Cumulative token offsets: `[0, l1, l1 + l2, ..., used_tokens]`.
    #[serde(rename = "bounds")]
    pub segment_bounds: Vec<u64>,
}

impl Pack {
    pub fn from_entries(pack_id: u64, entries: Vec<PackEntry>, sequence_length: u64) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::InvalidPack(format!("pack {pack_id} has no entries")));
        }
        let mut segment_bounds = Vec::with_capacity(entries.len() + 1);
        segment_bounds.push(0);
        let mut used = 0u64;
        for entry in &entries {
            if entry.tokens == 0 {
                return Err(Error::EmptySample(entry.key()));
            }
            used += entry.tokens;
            segment_bounds.push(used);
        }
        if used > sequence_length {
            return Err(Error::InvalidPack(format!(
                "pack {pack_id} uses {used} tokens, more than {sequence_length}"
            )));
        }
        Ok(Self {
            pack_id,
            entries,
            used_tokens: used,
            pad_tokens: sequence_length - used,
            segment_bounds,
        })
    }

    pub fn sequence_length(&self) -> u64 {
        self.used_tokens + self.pad_tokens
    }

    pub fn visual_tokens(&self) -> u64 {
        self.entries.iter().map(|e| e.visual_tokens).sum()
    }

    pub fn segment_lengths(&self) -> impl Iterator<Item = u64> + '_ {
        self.segment_bounds.windows(2).map(|w| w[1] - w[0])
    }

    pub fn keys(&self) -> impl Iterator<Item = SampleKey> + '_ {
        self.entries.iter().map(PackEntry::key)
    }

    /// Check every structural invariant against the limits that built it.
    pub fn validate(&self, sequence_length: u64, visual_cap: VisualCap) -> Result<()> {
        let fail = |msg: String| Err(Error::InvalidPack(format!("pack {}: {msg}", self.pack_id)));
        if self.entries.is_empty() {
            return fail("no entries".into());
        }
        if self.used_tokens + self.pad_tokens != sequence_length {
            return fail(format!(
                "used {} + pad {} != {sequence_length}",
                self.used_tokens, self.pad_tokens
            ));
        }
        let sum: u64 = self.entries.iter().map(|e| e.tokens).sum();
        if sum != self.used_tokens {
            return fail(format!("entries sum to {sum}, used is {}", self.used_tokens));
        }
        if !visual_cap.admits(self.visual_tokens()) {
            return fail(format!(
                "{} visual tokens over cap {visual_cap}",
                self.visual_tokens()
            ));
        }
        let mut expected = vec![0];
        let mut acc = 0;
        for e in &self.entries {
            acc += e.tokens;
            expected.push(acc);
        }
        if expected != self.segment_bounds {
            return fail("segment bounds disagree with entry lengths".into());
        }
        if self.entries.iter().any(|e| e.tokens == 0) {
            return fail("zero-length segment".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Limits {
    sequence_length: u64,
    visual_cap: VisualCap,
}

impl Limits {
    fn of(cfg: &PipelineConfig) -> Self {
        Self {
            sequence_length: cfg.sequence_length,
            visual_cap: cfg.visual_token_cap,
        }
    }

    fn check(&self, item: &PackItem) -> Result<()> {
        if item.tokens == 0 {
            return Err(Error::EmptySample(item.key.clone()));
        }
        if item.tokens > self.sequence_length || !self.visual_cap.admits(item.visual_tokens) {
            return Err(Error::OversizedSample {
                key: item.key.clone(),
                total_tokens: item.tokens,
                visual_tokens: item.visual_tokens,
                sequence_length: self.sequence_length,
                visual_cap: self.visual_cap.to_string(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default)]
struct OpenPack {
    items: Vec<PackItem>,
    used: u64,
    visual: u64,
}

impl OpenPack {
    fn fits(&self, item: &PackItem, limits: &Limits) -> bool {
        self.used + item.tokens <= limits.sequence_length
            && limits.visual_cap.admits(self.visual + item.visual_tokens)
    }

    fn add(&mut self, item: PackItem) {
        self.used += item.tokens;
        self.visual += item.visual_tokens;
        self.items.push(item);
    }

    fn is_full(&self, limits: &Limits) -> bool {
        self.used == limits.sequence_length
    }

    fn remaining(&self, limits: &Limits) -> (u64, u64) {
        let visual = match limits.visual_cap {
            VisualCap::Unlimited => u64::MAX,
            VisualCap::Tokens(cap) => cap - self.visual,
        };
        (limits.sequence_length - self.used, visual)
    }

    fn seal(self, pack_id: u64, sequence_length: u64) -> Pack {
        let entries = self.items.into_iter().map(PackEntry::from).collect();
        Pack::from_entries(pack_id, entries, sequence_length)
            .expect("open packs only hold admitted, non-empty items")
    }
}

/// Open packs in creation order, either a small scanned window or the
/// tree-indexed unbounded variant.
#[derive(Debug, Clone)]
enum OpenSet {
    Window {
        packs: VecDeque<OpenPack>,
        capacity: usize,
    },
    Unbounded {
        slots: Vec<Option<OpenPack>>,
        index: FirstFitIndex,
        live: usize,
    },
}

/// Streaming first-fit packer. Feed samples with [`push`](Self::push), collect
/// emitted packs, and [`finish`](Self::finish) to flush what is still open.
///
/// A pack is emitted as soon as it is exactly full, when opening a new pack
/// pushes the window past its capacity (the oldest open pack goes), or at
/// end of stream. Pack ids are assigned in emission order.
#[derive(Debug, Clone)]
pub struct OnlinePacker {
    limits: Limits,
    open: OpenSet,
    next_pack_id: u64,
    consumed: u64,
}

impl OnlinePacker {
    pub fn new(cfg: &PipelineConfig) -> Result<Self> {
        cfg.validate()?;
        let open = match cfg.pack_window {
            PackWindow::Bounded(capacity) => OpenSet::Window {
                packs: VecDeque::with_capacity(capacity + 1),
                capacity,
            },
            PackWindow::Unbounded => OpenSet::Unbounded {
                slots: Vec::new(),
                index: FirstFitIndex::new(),
                live: 0,
            },
        };
        Ok(Self {
            limits: Limits::of(cfg),
            open,
            next_pack_id: 0,
            consumed: 0,
        })
    }

    /// Rebuild a packer from a pack boundary: the groups still open (in
    /// creation order) and the id the next emitted pack will carry.
    pub fn restore(
        cfg: &PipelineConfig,
        open_packs: Vec<Vec<PackItem>>,
        next_pack_id: u64,
        consumed: u64,
    ) -> Result<Self> {
        let mut packer = Self::new(cfg)?;
        packer.next_pack_id = next_pack_id;
        packer.consumed = consumed;
        for group in open_packs {
            let mut pack = OpenPack::default();
            for item in group {
                packer.limits.check(&item)?;
                if !pack.fits(&item, &packer.limits) {
                    return Err(Error::InvalidPack(format!(
                        "restored open pack overflows at {}",
                        item.key
                    )));
                }
                pack.add(item);
            }
            if pack.items.is_empty() {
                return Err(Error::InvalidPack("restored open pack is empty".into()));
            }
            match &mut packer.open {
                OpenSet::Window { packs, capacity } => {
                    if packs.len() == *capacity {
                        return Err(Error::InvalidPack(format!(
                            "more open packs than the window of {capacity}"
                        )));
                    }
                    packs.push_back(pack);
                }
                OpenSet::Unbounded { slots, index, live } => {
                    let (t, v) = pack.remaining(&packer.limits);
                    index.push(t, v);
                    slots.push(Some(pack));
                    *live += 1;
                }
            }
        }
        Ok(packer)
    }

    pub fn next_pack_id(&self) -> u64 {
        self.next_pack_id
    }

    /// Samples accepted so far, including ones still sitting in open packs.
    pub fn consumed(&self) -> u64 {
        self.consumed
    }

    /// Keys of the packs still open, in creation order.
    pub fn open_packs(&self) -> Vec<Vec<SampleKey>> {
        let keys = |p: &OpenPack| p.items.iter().map(|i| i.key.clone()).collect();
        match &self.open {
            OpenSet::Window { packs, .. } => packs.iter().map(keys).collect(),
            OpenSet::Unbounded { slots, .. } => slots.iter().flatten().map(keys).collect(),
        }
    }

    pub fn open_count(&self) -> usize {
        match &self.open {
            OpenSet::Window { packs, .. } => packs.len(),
            OpenSet::Unbounded { live, .. } => *live,
        }
    }

    /// Place one sample; returns the packs this caused to be emitted.
    pub fn push(&mut self, item: PackItem) -> Result<Vec<Pack>> {
        self.limits.check(&item)?;
        self.consumed += 1;
        let limits = self.limits;
        let mut sealed = Vec::new();
        match &mut self.open {
            OpenSet::Window { packs, capacity } => {
                let target = packs.iter().position(|p| p.fits(&item, &limits));
                let slot = match target {
                    Some(i) => {
                        packs[i].add(item);
                        i
                    }
                    None => {
                        let mut pack = OpenPack::default();
                        pack.add(item);
                        packs.push_back(pack);
                        packs.len() - 1
                    }
                };
                if packs[slot].is_full(&limits) {
                    sealed.push(packs.remove(slot).expect("slot is in range"));
                }
                if packs.len() > *capacity {
                    sealed.push(packs.pop_front().expect("window is non-empty"));
                }
            }
            OpenSet::Unbounded { slots, index, live } => {
                let (tokens, visual) = (item.tokens, item.visual_tokens);
                let slot = match index.first_fit(tokens, visual) {
                    Some(slot) => slot,
                    None => {
                        slots.push(Some(OpenPack::default()));
                        *live += 1;
                        index.push(0, 0)
                    }
                };
                let pack = slots[slot].as_mut().expect("indexed slots are open");
                pack.add(item);
                if pack.is_full(&limits) {
                    sealed.push(slots[slot].take().expect("slot is open"));
                    *live -= 1;
                    index.update(slot, 0, 0);
                } else {
                    let (t, v) = pack.remaining(&limits);
                    index.update(slot, t, v);
                }
            }
        }
        Ok(sealed.into_iter().map(|p| self.seal(p)).collect())
    }

    /// Flush every open pack in creation order.
    pub fn finish(mut self) -> Vec<Pack> {
        let open: Vec<OpenPack> = match std::mem::replace(
            &mut self.open,
            OpenSet::Window {
                packs: VecDeque::new(),
                capacity: 0,
            },
        ) {
            OpenSet::Window { packs, .. } => packs.into_iter().collect(),
            OpenSet::Unbounded { slots, .. } => slots.into_iter().flatten().collect(),
        };
        open.into_iter().map(|p| self.seal(p)).collect()
    }

    fn seal(&mut self, pack: OpenPack) -> Pack {
        let id = self.next_pack_id;
        self.next_pack_id += 1;
        pack.seal(id, self.limits.sequence_length)
    }
}

/// Lazily packs a stream of records. Yields an error and stops at the first
/// sample that cannot be packed.
pub struct PackStream<I> {
    samples: I,
    cfg: PipelineConfig,
    packer: Option<OnlinePacker>,
    ready: VecDeque<Pack>,
    failed: bool,
}

pub fn pack_stream<I>(samples: I, cfg: &PipelineConfig) -> Result<PackStream<I::IntoIter>>
where
    I: IntoIterator<Item = SampleRecord>,
{
    Ok(PackStream {
        samples: samples.into_iter(),
        cfg: cfg.clone(),
        packer: Some(OnlinePacker::new(cfg)?),
        ready: VecDeque::new(),
        failed: false,
    })
}

impl<I: Iterator<Item = SampleRecord>> Iterator for PackStream<I> {
    type Item = Result<Pack>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            if let Some(pack) = self.ready.pop_front() {
                return Some(Ok(pack));
            }
            if self.failed {
                return None;
            }
            let packer = self.packer.as_mut()?;
            match self.samples.next() {
                Some(record) => {
                    let pushed = PackItem::from_record(&record, &self.cfg).and_then(|item| packer.push(item));
                    match pushed {
                        Ok(packs) => self.ready.extend(packs),
                        Err(e) => {
                            self.failed = true;
                            return Some(Err(e));
                        }
                    }
                }
                None => {
                    let packer = self.packer.take()?;
                    self.ready.extend(packer.finish());
                }
            }
        }
    }
}

/// Pack pre-resolved items through the online path.
pub fn pack_items<I>(items: I, cfg: &PipelineConfig) -> Result<Vec<Pack>>
where
    I: IntoIterator<Item = PackItem>,
{
    let mut packer = OnlinePacker::new(cfg)?;
    let mut out = Vec::new();
    for item in items {
        out.extend(packer.push(item)?);
    }
    out.extend(packer.finish());
    Ok(out)
}

/// First-fit-decreasing over the whole input, ignoring the window setting.
/// Ties in length keep input order; packs come out in creation order.
pub fn pack_offline(samples: &[SampleRecord], cfg: &PipelineConfig) -> Result<Vec<Pack>> {
    let items = samples
        .iter()
        .map(|r| PackItem::from_record(r, cfg))
        .collect::<Result<Vec<_>>>()?;
    pack_items_offline(items, cfg)
}

pub fn pack_items_offline(mut items: Vec<PackItem>, cfg: &PipelineConfig) -> Result<Vec<Pack>> {
    cfg.validate()?;
    let limits = Limits::of(cfg);
    for item in &items {
        limits.check(item)?;
    }
    items.sort_by_key(|i| std::cmp::Reverse(i.tokens));

    let mut bins: Vec<OpenPack> = Vec::new();
    let mut index = FirstFitIndex::new();
    for item in items {
        let slot = match index.first_fit(item.tokens, item.visual_tokens) {
            Some(slot) => slot,
            None => {
                bins.push(OpenPack::default());
                index.push(0, 0)
            }
        };
        bins[slot].add(item);
        let (t, v) = bins[slot].remaining(&limits);
        index.update(slot, t, v);
    }
    Ok(bins
        .into_iter()
        .enumerate()
        .map(|(id, bin)| bin.seal(id as u64, limits.sequence_length))
        .collect())
}

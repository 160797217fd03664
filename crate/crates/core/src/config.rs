use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::resolution::{CELL_PIXELS, PATCH};

pub const DEFAULT_SEQUENCE_LENGTH: u64 = 8192;
pub const DEFAULT_MIN_PIXELS: u64 = 4 * CELL_PIXELS;
pub const DEFAULT_MAX_PIXELS: u64 = 1280 * CELL_PIXELS;
pub const DEFAULT_PACK_WINDOW: usize = 8;

/// Per-pack limit on visual tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VisualCap {
    Unlimited,
    Tokens(u64),
}

impl VisualCap {
    pub fn admits(&self, visual_tokens: u64) -> bool {
        match *self {
            VisualCap::Unlimited => true,
            VisualCap::Tokens(cap) => visual_tokens <= cap,
        }
    }

    pub fn as_u64(&self) -> u64 {
        match *self {
            VisualCap::Unlimited => u64::MAX,
            VisualCap::Tokens(cap) => cap,
        }
    }
}

impl fmt::Display for VisualCap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            VisualCap::Unlimited => f.write_str("unlimited"),
            VisualCap::Tokens(cap) => write!(f, "{cap}"),
        }
    }
}

/// How many packs the online packer keeps open at once.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PackWindow {
    Bounded(usize),
    Unbounded,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub sequence_length: u64,
    pub min_pixels: u64,
    pub max_pixels: u64,
    pub visual_token_cap: VisualCap,
    pub seed: u64,
    pub dp_ranks: usize,
    pub pack_window: PackWindow,
    /// Edge of one visual-token cell in pixels.
    pub patch: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self::with_budget(DEFAULT_SEQUENCE_LENGTH, DEFAULT_MAX_PIXELS)
    }
}

impl PipelineConfig {
    /// Config for a sequence length and max-pixel budget, all else default.
    /// The visual cap is half the sequence so no single pack is image-dominated.
    pub fn with_budget(sequence_length: u64, max_pixels: u64) -> Self {
        Self {
            sequence_length,
            min_pixels: DEFAULT_MIN_PIXELS,
            max_pixels,
            visual_token_cap: VisualCap::Tokens(sequence_length / 2),
            seed: 0,
            dp_ranks: 1,
            pack_window: PackWindow::Bounded(DEFAULT_PACK_WINDOW),
            patch: PATCH,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.sequence_length == 0 {
            return Err(Error::Config("sequence_length must be positive".into()));
        }
        if self.patch == 0 {
            return Err(Error::Config("patch must be positive".into()));
        }
        if self.min_pixels > self.max_pixels {
            return Err(Error::Config(format!(
                "min_pixels {} exceeds max_pixels {}",
                self.min_pixels, self.max_pixels
            )));
        }
        if self.max_pixels < self.patch * self.patch {
            return Err(Error::Config(format!(
                "max_pixels {} is below one visual-token cell",
                self.max_pixels
            )));
        }
        if let VisualCap::Tokens(cap) = self.visual_token_cap {
            if cap == 0 || cap > self.sequence_length {
                return Err(Error::Config(format!(
                    "visual_token_cap {cap} must be in 1..={}",
                    self.sequence_length
                )));
            }
        }
        if self.dp_ranks == 0 {
            return Err(Error::Config("dp_ranks must be positive".into()));
        }
        if self.pack_window == PackWindow::Bounded(0) {
            return Err(Error::Config("pack window must hold at least one pack".into()));
        }
        Ok(())
    }
}

/// The three SFT variants that get averaged into one model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Preset {
    Sft2k,
    Sft4k,
    Sft8k,
}

impl Preset {
    pub const ALL: [Preset; 3] = [Preset::Sft2k, Preset::Sft4k, Preset::Sft8k];

    pub fn name(&self) -> &'static str {
        match self {
            Preset::Sft2k => "sft-2k",
            Preset::Sft4k => "sft-4k",
            Preset::Sft8k => "sft-8k",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|p| p.name() == name)
    }

    pub fn sequence_length(&self) -> u64 {
        match self {
            Preset::Sft2k => 2048,
            Preset::Sft4k => 4096,
            Preset::Sft8k => 8192,
        }
    }

    pub fn max_pixels(&self) -> u64 {
        match self {
            Preset::Sft2k => 1280 * CELL_PIXELS,
            Preset::Sft4k => 3072 * CELL_PIXELS,
            Preset::Sft8k => 4096 * CELL_PIXELS,
        }
    }

    pub fn config(&self) -> PipelineConfig {
        PipelineConfig::with_budget(self.sequence_length(), self.max_pixels())
    }
}

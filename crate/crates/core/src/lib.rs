//! Data-plane toolkit for multimodal training: shard-local loading, online
//! sequence packing under visual-token budgets, exact resume, compressed
//! attention metadata, checkpoint weight averaging and test-time resolution
//! search.

pub mod config;
pub mod error;
pub mod fsutil;
pub mod manifest;
pub mod merge;
pub mod packing;
pub mod resolution;
pub mod search;
pub mod sharding;
pub mod tracker;

pub use config::{PackWindow, PipelineConfig, Preset, VisualCap};
pub use error::{Error, ErrorKind, Result};
pub use manifest::{load_manifest, total_tokens, ImageSpec, SampleKey, SampleRecord};
pub use packing::{mask_descriptor, pack_offline, pack_stream, Pack, PackItem};
pub use resolution::{smart_resize, visual_tokens, ResizedImage};
pub use sharding::{build_plan, rank_stream, ShardPlan};
pub use tracker::{resume_stream, TrackerState};

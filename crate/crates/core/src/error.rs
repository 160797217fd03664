use std::path::PathBuf;

use thiserror::Error;

use crate::manifest::SampleKey;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("manifest line {line}: {message}")]
    ManifestParse { line: usize, message: String },

    #[error("manifest line {line}: duplicate sample {key}")]
    DuplicateSample { line: usize, key: SampleKey },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(
        "no aspect-preserving 28-grid size for {width}x{height} inside [{min_pixels}, {max_pixels}] \
         pixels; nearest candidate {candidate_width}x{candidate_height} ({candidate_area} pixels)"
    )]
    ResizeInfeasible {
        width: u64,
        height: u64,
        min_pixels: u64,
        max_pixels: u64,
        candidate_width: u64,
        candidate_height: u64,
        candidate_area: u64,
    },

    #[error("{width}x{height} is not on the {patch}-pixel grid")]
    OffGrid { width: u64, height: u64, patch: u64 },

    #[error(
        "sample {key} does not fit a pack: {total_tokens} tokens ({visual_tokens} visual), \
         limits {sequence_length} tokens / {visual_cap} visual"
    )]
    OversizedSample {
        key: SampleKey,
        total_tokens: u64,
        visual_tokens: u64,
        sequence_length: u64,
        visual_cap: String,
    },

    #[error("sample {0} has zero tokens")]
    EmptySample(SampleKey),

    #[error("invalid pack: {0}")]
    InvalidPack(String),

    #[error("rank {rank} out of range for {dp_ranks} data-parallel ranks")]
    RankOutOfRange { rank: usize, dp_ranks: usize },

    #[error("plan fingerprint mismatch: state has {expected}, live plan has {actual}")]
    FingerprintMismatch { expected: String, actual: String },

    #[error("manifest digest mismatch: plan was built from {expected}, manifest hashes to {actual}")]
    ManifestMismatch { expected: String, actual: String },

    #[error("rank {rank}: cursor {cursor} + {requested} exceeds shard length {shard_len}")]
    CursorOverflow {
        rank: usize,
        cursor: u64,
        requested: u64,
        shard_len: u64,
    },

    #[error("corrupt state: {0}")]
    CorruptState(String),

    #[error("unsupported state version {found} (expected {expected})")]
    StateVersion { found: u32, expected: u32 },

    #[error("corrupt container: {0}")]
    CorruptContainer(String),

    #[error("tensor '{name}' shape mismatch: {left:?} vs {right:?}")]
    ShapeMismatch {
        name: String,
        left: Vec<u64>,
        right: Vec<u64>,
    },

    #[error("tensor '{name}' missing from input {input}")]
    MissingTensor { name: String, input: usize },

    #[error("schema mismatch: only in left {only_left:?}, only in right {only_right:?}")]
    SchemaMismatch {
        only_left: Vec<String>,
        only_right: Vec<String>,
    },

    #[error("invalid merge spec: {0}")]
    MergeSpec(String),

    #[error("invalid resolution grid: {0}")]
    Grid(String),

    #[error("every configuration failed to score ({0} holes)")]
    AllHoles(usize),

    #[error("{0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Coarse classification used by front-ends to pick exit codes.
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Io { .. } => ErrorKind::Io,
            Error::FingerprintMismatch { .. }
            | Error::ManifestMismatch { .. }
            | Error::CorruptState(_)
            | Error::StateVersion { .. } => ErrorKind::StateMismatch,
            _ => ErrorKind::Validation,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Validation,
    Io,
    StateMismatch,
}

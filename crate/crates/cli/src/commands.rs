use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::Args;
use log::{info, warn};
use serde::Deserialize;
use serde_json::json;

use mmpipe_core::fsutil::write_atomic;
use mmpipe_core::merge::{
    average, diff_report, resolve_weights, KeyFilter, MergeOptions, MergeSpec, TensorContainer,
};
use mmpipe_core::packing::{fill_report, pack_items, pack_items_offline};
use mmpipe_core::search::{run_search, CommandScorer, ResolutionGrid, SearchReport};
use mmpipe_core::sharding::Shuffle;
use mmpipe_core::tracker::{checkpoint, restore, OversizePolicy, RankPacker};
use mmpipe_core::{load_manifest, Error, Pack, PackItem, PipelineConfig, Result, ShardPlan, VisualCap};

use crate::options::{parse_pixels, PackOptions};

#[derive(Args, Debug)]
pub struct PlanArgs {
    /// Sample manifest (one JSON record per line)
    #[arg(long)]
    pub manifest: PathBuf,
    /// Number of data-parallel ranks
    #[arg(long)]
    pub dp_ranks: usize,
    /// Shuffle seed
    #[arg(long, default_value_t = 0, conflicts_with = "no_shuffle")]
    pub seed: u64,
    /// Keep manifest order (round-robin deal only)
    #[arg(long)]
    pub no_shuffle: bool,
    #[arg(long, default_value_t = 0)]
    pub epoch: u64,
    /// Where to write the plan
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct PackArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Plan written by `plan`
    #[arg(long)]
    pub plan: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub rank: usize,
    /// Tracker state; resumed from when it exists, updated at every pack boundary
    #[arg(long)]
    pub state: PathBuf,
    /// Pack output, one JSON pack per line
    #[arg(long)]
    pub out: PathBuf,
    /// Fail on samples that cannot fit any pack instead of skipping them
    #[arg(long)]
    pub strict: bool,
    /// Stop at the first pack boundary after this many packs
    #[arg(long)]
    pub max_packs: Option<u64>,
    #[command(flatten)]
    pub options: PackOptions,
}

#[derive(Args, Debug)]
pub struct MergeArgs {
    /// Input containers (at least two)
    #[arg(required = true, num_args = 2..)]
    pub inputs: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Comma-separated weights summing to 1 [default: uniform]
    #[arg(long, value_delimiter = ',')]
    pub weights: Option<Vec<f64>>,
    /// Only average tensors whose name starts with this prefix
    #[arg(long)]
    pub filter: Option<String>,
    /// Input (0-based) that supplies tensors outside the filter
    #[arg(long, default_value_t = 0)]
    pub passthrough: usize,
}

#[derive(Args, Debug)]
pub struct DiffArgs {
    pub left: PathBuf,
    pub right: PathBuf,
}

#[derive(Args, Debug)]
pub struct SearchArgs {
    /// Evaluation manifest
    #[arg(long)]
    pub manifest: PathBuf,
    /// Scorer executable, run as `<scorer> [args] <min_pixels> <max_pixels> <summary.json>`
    #[arg(long)]
    pub scorer: PathBuf,
    /// Extra argument passed to the scorer before the config (repeatable)
    #[arg(long = "scorer-arg", allow_hyphen_values = true)]
    pub scorer_args: Vec<String>,
    /// min_pixels grid values [default: 4,16,32,64 times 28*28]
    #[arg(long, value_delimiter = ',', value_parser = parse_pixels)]
    pub min_values: Option<Vec<u64>>,
    /// max_pixels grid values [default: 1280,2048,2560,3072,4096,8192 times 28*28]
    #[arg(long, value_delimiter = ',', value_parser = parse_pixels)]
    pub max_values: Option<Vec<u64>>,
    /// Where to write the search report
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
#[group(id = "source", required = true, args = ["packs", "manifest"])]
pub struct StatsArgs {
    /// Report on an existing pack file
    #[arg(long)]
    pub packs: Option<PathBuf>,
    /// Pack a manifest online and offline and compare
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Visual-token histogram edges [default: quarters of the visual cap]
    #[arg(long, value_delimiter = ',')]
    pub edges: Option<Vec<u64>>,
    #[command(flatten)]
    pub options: PackOptions,
}

fn print_json(value: &serde_json::Value) {
    println!("{value}");
}

pub fn plan(args: &PlanArgs) -> Result<()> {
    let manifest = load_manifest(&args.manifest)?;
    let shuffle = if args.no_shuffle {
        Shuffle::Identity
    } else {
        Shuffle::Seeded(args.seed)
    };
    let plan = ShardPlan::build(&manifest, args.dp_ranks, shuffle, args.epoch)?;
    plan.save(&args.out)?;
    let sizes: Vec<usize> = plan.assignment.iter().map(Vec::len).collect();
    print_json(&json!({
        "plan": args.out,
        "fingerprint": plan.fingerprint(),
        "dp_ranks": plan.dp_ranks,
        "seed": plan.seed,
        "epoch": plan.epoch,
        "samples": plan.total_samples(),
        "shard_sizes": sizes,
    }));
    Ok(())
}

#[derive(Deserialize)]
struct PackId {
    pack_id: u64,
}

/// Byte length of `path` up to and including the line for `pack_id`.
fn offset_after(path: &Path, pack_id: u64) -> Result<u64> {
    let file = File::open(path).map_err(|e| {
        Error::CorruptState(format!(
            "state records pack {pack_id} but {} cannot be read: {e}",
            path.display()
        ))
    })?;
    let mut reader = BufReader::new(file);
    let mut offset = 0u64;
    let mut line = String::new();
    loop {
        line.clear();
        let n = reader.read_line(&mut line).map_err(|e| io_error(path, e))?;
        if n == 0 || !line.ends_with('\n') {
            break;
        }
        offset += n as u64;
        match serde_json::from_str::<PackId>(&line) {
            Ok(id) if id.pack_id == pack_id => return Ok(offset),
            Ok(_) => {}
            Err(_) => break,
        }
    }
    Err(Error::CorruptState(format!(
        "{} does not contain pack {pack_id} recorded in the state",
        path.display()
    )))
}

fn io_error(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Open the pack file for appending, dropping anything written after the
/// last pack the state knows about.
fn open_output(path: &Path, last_pack_id: Option<u64>) -> Result<BufWriter<File>> {
    let keep = match last_pack_id {
        Some(id) => offset_after(path, id)?,
        None => 0,
    };
    let file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| io_error(path, e))?;
    if file.metadata().map_err(|e| io_error(path, e))?.len() != keep {
        info!("truncating {} to {keep} bytes", path.display());
        file.set_len(keep).map_err(|e| io_error(path, e))?;
    }
    Ok(BufWriter::new(file))
}

pub fn pack(args: &PackArgs, require_state: bool) -> Result<()> {
    let cfg = args.options.config()?;
    let manifest = load_manifest(&args.manifest)?;
    let plan = ShardPlan::load(&args.plan)?;
    let state = if args.state.exists() {
        Some(restore(&args.state)?)
    } else if require_state {
        return Err(io_error(
            &args.state,
            std::io::Error::new(std::io::ErrorKind::NotFound, "no tracker state to resume from"),
        ));
    } else {
        None
    };
    let resumed = state.is_some();
    let policy = if args.strict {
        OversizePolicy::Fail
    } else {
        OversizePolicy::Skip
    };
    let mut packer = RankPacker::new(&manifest, &plan, args.rank, &cfg, state, policy)?;
    let start = packer.state().rank(args.rank)?.clone();
    if resumed {
        info!(
            "rank {}: resuming at cursor {} after pack {:?}",
            args.rank, start.cursor, start.last_pack_id
        );
    }
    let mut out = open_output(&args.out, start.last_pack_id)?;

    let mut written = 0u64;
    let mut stopped_early = false;
    while let Some(boundary) = packer.next_boundary()? {
        for pack in &boundary.packs {
            serde_json::to_writer(&mut out, pack)?;
            out.write_all(b"\n").map_err(|e| io_error(&args.out, e))?;
        }
        out.flush().map_err(|e| io_error(&args.out, e))?;
        out.get_ref().sync_data().map_err(|e| io_error(&args.out, e))?;
        checkpoint(&boundary.state, &args.state)?;
        written += boundary.packs.len() as u64;
        if args.max_packs.is_some_and(|m| written >= m) {
            stopped_early = true;
            break;
        }
    }
    checkpoint(packer.state(), &args.state)?;

    let cursor = packer.state().rank(args.rank)?.clone();
    for key in packer.skipped() {
        warn!("skipped {key}");
    }
    print_json(&json!({
        "rank": args.rank,
        "resumed": resumed,
        "packs_written": written,
        "last_pack_id": cursor.last_pack_id,
        "cursor": cursor.cursor,
        "shard_len": cursor.shard_len,
        "complete": !stopped_early && cursor.cursor == cursor.shard_len && cursor.open_packs.is_empty(),
        "skipped": packer.skipped().iter().map(ToString::to_string).collect::<Vec<_>>(),
    }));
    Ok(())
}

pub fn merge(args: &MergeArgs) -> Result<()> {
    let weights = resolve_weights(args.weights.as_deref(), args.inputs.len())?;
    let key_filter = args.filter.clone().map(KeyFilter::prefix).unwrap_or_default();
    let spec = MergeSpec {
        inputs: args.inputs.clone(),
        options: MergeOptions {
            weights: Some(weights.clone()),
            key_filter: key_filter.clone(),
            passthrough_source: args.passthrough,
        },
    };
    let merged = average(&spec)?;
    merged.save(&args.out)?;
    let averaged = merged.names().filter(|n| key_filter.matches(n)).count();
    print_json(&json!({
        "out": args.out,
        "inputs": args.inputs,
        "weights": weights,
        "tensors": merged.len(),
        "averaged": averaged,
        "passthrough": merged.len() - averaged,
    }));
    Ok(())
}

pub fn diff(args: &DiffArgs) -> Result<()> {
    let left = TensorContainer::load(&args.left)?;
    let right = TensorContainer::load(&args.right)?;
    let rows = diff_report(&left, &right)?;
    let max_abs = rows.first().map_or(0.0, |r| r.max_abs);
    print_json(&json!({ "max_abs": max_abs, "tensors": rows }));
    Ok(())
}

pub fn search(args: &SearchArgs) -> Result<()> {
    let defaults = ResolutionGrid::default();
    let grid = ResolutionGrid {
        min_values: args.min_values.clone().unwrap_or(defaults.min_values),
        max_values: args.max_values.clone().unwrap_or(defaults.max_values),
    };
    grid.validate()?;
    let manifest = load_manifest(&args.manifest)?;
    let scorer = CommandScorer::new(&args.scorer, args.scorer_args.clone());
    let result = run_search(&grid, &manifest, &scorer)?;
    for hole in &result.holes {
        warn!(
            "no score for ({}, {}): {}",
            hole.min_pixels, hole.max_pixels, hole.error
        );
    }
    let report = SearchReport::new(&grid, &result);
    write_atomic(&args.out, &serde_json::to_vec_pretty(&report)?)?;
    print_json(&json!({
        "report": args.out,
        "configs": grid.len(),
        "scored": result.surface.len(),
        "holes": result.holes.len(),
        "best": report.best,
    }));
    Ok(())
}

/// Quarter steps of the visual cap (or of the sequence when uncapped).
fn default_edges(cfg: &PipelineConfig) -> Vec<u64> {
    let top = match cfg.visual_token_cap {
        VisualCap::Tokens(cap) => cap,
        VisualCap::Unlimited => cfg.sequence_length,
    };
    let mut edges: Vec<u64> = (1..=4).map(|q| top * q / 4).filter(|&e| e > 0).collect();
    edges.dedup();
    edges
}

fn read_packs(path: &Path) -> Result<Vec<Pack>> {
    let file = File::open(path).map_err(|e| io_error(path, e))?;
    let mut packs = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| io_error(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let pack: Pack = serde_json::from_str(&line).map_err(|e| Error::ManifestParse {
            line: i + 1,
            message: e.to_string(),
        })?;
        packs.push(pack);
    }
    Ok(packs)
}

pub fn stats(args: &StatsArgs) -> Result<()> {
    let cfg = args.options.config()?;
    let edges = args.edges.clone().unwrap_or_else(|| default_edges(&cfg));
    if !edges.windows(2).all(|w| w[0] < w[1]) {
        return Err(Error::Config(
            "histogram edges must be strictly increasing".into(),
        ));
    }
    if let Some(path) = &args.packs {
        let packs = read_packs(path)?;
        print_json(&json!({ "packs": fill_report(&packs, &edges) }));
        return Ok(());
    }
    let path = args.manifest.as_ref().expect("clap requires one source");
    let manifest = load_manifest(path)?;
    let items = manifest
        .iter()
        .map(|r| PackItem::from_record(r, &cfg))
        .collect::<Result<Vec<_>>>()?;
    let total: u64 = items.iter().map(|i| i.tokens).sum();
    let online = pack_items(items.iter().cloned(), &cfg)?;
    let offline = pack_items_offline(items, &cfg)?;
    print_json(&json!({
        "samples": manifest.len(),
        "total_tokens": total,
        "lower_bound": total.div_ceil(cfg.sequence_length),
        "online": fill_report(&online, &edges),
        "offline": fill_report(&offline, &edges),
    }));
    Ok(())
}

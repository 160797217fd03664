//! Test-time resolution search.
//!
//! Every `(min_pixels, max_pixels)` pair of a grid is applied to an
//! evaluation manifest, the resized manifest is handed to a [`Scorer`], and
//! the best-scoring pair is returned along with the whole score surface.
//! Scoring is pluggable: in production it is an external model harness run
//! as a subprocess ([`CommandScorer`]), in tests any closure.

use std::io::Write;
use std::path::PathBuf;
use std::process::Command;

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::manifest::SampleRecord;
use crate::resolution::{smart_resize_with_patch, PixelWindow, ResizedImage, CELL_PIXELS, PATCH};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResolutionGrid {
    pub min_values: Vec<u64>,
    pub max_values: Vec<u64>,
}

impl Default for ResolutionGrid {
    fn default() -> Self {
        Self {
            min_values: [4, 16, 32, 64].map(|c| c * CELL_PIXELS).to_vec(),
            max_values: [1280, 2048, 2560, 3072, 4096, 8192]
                .map(|c| c * CELL_PIXELS)
                .to_vec(),
        }
    }
}

impl ResolutionGrid {
    pub fn validate(&self) -> Result<()> {
        for (axis, values) in [("min_pixels", &self.min_values), ("max_pixels", &self.max_values)] {
            if values.is_empty() {
                return Err(Error::Grid(format!("{axis} axis is empty")));
            }
            if values.contains(&0) {
                return Err(Error::Grid(format!("{axis} values must be positive")));
            }
            let mut sorted = values.clone();
            sorted.sort_unstable();
            sorted.dedup();
            if sorted.len() != values.len() {
                return Err(Error::Grid(format!("{axis} has duplicate values")));
            }
        }
        let largest_min = *self.min_values.iter().max().expect("non-empty");
        let smallest_max = *self.max_values.iter().min().expect("non-empty");
        if largest_min > smallest_max {
            return Err(Error::Grid(format!(
                "min_pixels {largest_min} exceeds max_pixels {smallest_max}"
            )));
        }
        if smallest_max < CELL_PIXELS {
            return Err(Error::Grid(format!(
                "max_pixels {smallest_max} is below one visual-token cell"
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.min_values.len() * self.max_values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ResolutionConfig {
    pub min_pixels: u64,
    pub max_pixels: u64,
}

/// Cartesian product ordered by `max_pixels`, then `min_pixels`, ascending.
pub fn enumerate_grid(grid: &ResolutionGrid) -> Result<Vec<ResolutionConfig>> {
    grid.validate()?;
    let mut maxes = grid.max_values.clone();
    let mut mins = grid.min_values.clone();
    maxes.sort_unstable();
    mins.sort_unstable();
    Ok(maxes
        .iter()
        .flat_map(|&max_pixels| {
            mins.iter().map(move |&min_pixels| ResolutionConfig {
                min_pixels,
                max_pixels,
            })
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResizedSample {
    pub dataset_id: String,
    pub sample_index: u64,
    pub text_tokens: u64,
    /// `None` where the image has no admissible size under this config.
    pub images: Vec<Option<ResizedImage>>,
}

/// The evaluation manifest as seen under one configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResizeSummary {
    pub min_pixels: u64,
    pub max_pixels: u64,
    pub images: u64,
    pub infeasible_images: u64,
    pub total_visual_tokens: u64,
    /// Over feasible images; 0 when there are none.
    pub mean_visual_tokens: f64,
    pub samples: Vec<ResizedSample>,
}

pub fn summarize(manifest: &[SampleRecord], config: ResolutionConfig) -> ResizeSummary {
    let window = PixelWindow {
        min_pixels: config.min_pixels,
        max_pixels: config.max_pixels,
    };
    let (mut images, mut infeasible, mut total) = (0u64, 0u64, 0u64);
    let samples = manifest
        .iter()
        .map(|record| ResizedSample {
            dataset_id: record.dataset_id.clone(),
            sample_index: record.sample_index,
            text_tokens: record.text_tokens,
            images: record
                .images
                .iter()
                .map(|&img| {
                    images += 1;
                    match smart_resize_with_patch(img, window, PATCH) {
                        Ok(r) => {
                            total += r.visual_tokens;
                            Some(r)
                        }
                        Err(_) => {
                            infeasible += 1;
                            None
                        }
                    }
                })
                .collect(),
        })
        .collect();
    let feasible = images - infeasible;
    ResizeSummary {
        min_pixels: config.min_pixels,
        max_pixels: config.max_pixels,
        images,
        infeasible_images: infeasible,
        total_visual_tokens: total,
        mean_visual_tokens: if feasible == 0 {
            0.0
        } else {
            total as f64 / feasible as f64
        },
        samples,
    }
}

/// Scores one resolution configuration. Must be deterministic; an `Err`
/// leaves a hole in the surface.
pub trait Scorer: Sync {
    fn score(&self, config: ResolutionConfig, summary: &ResizeSummary) -> std::result::Result<f64, String>;
}

impl<F> Scorer for F
where
    F: Fn(ResolutionConfig, &ResizeSummary) -> std::result::Result<f64, String> + Sync,
{
    fn score(&self, config: ResolutionConfig, summary: &ResizeSummary) -> std::result::Result<f64, String> {
        self(config, summary)
    }
}

/// Runs an external program once per configuration:
///
/// ```text
/// <program> [args...] <min_pixels> <max_pixels> <summary.json>
/// ```
///
/// The summary file is the [`ResizeSummary`] as JSON. Exit status 0 with a
/// number on the last non-empty stdout line is a score; anything else is a
/// hole.
#[derive(Debug, Clone)]
pub struct CommandScorer {
    pub program: PathBuf,
    pub args: Vec<String>,
}

impl CommandScorer {
    pub fn new(program: impl Into<PathBuf>, args: Vec<String>) -> Self {
        Self {
            program: program.into(),
            args,
        }
    }
}

impl Scorer for CommandScorer {
    fn score(&self, config: ResolutionConfig, summary: &ResizeSummary) -> std::result::Result<f64, String> {
        let mut file = tempfile::Builder::new()
            .prefix("resize-summary-")
            .suffix(".json")
            .tempfile()
            .map_err(|e| format!("creating summary file: {e}"))?;
        serde_json::to_writer(&mut file, summary).map_err(|e| format!("writing summary: {e}"))?;
        file.flush().map_err(|e| format!("writing summary: {e}"))?;

        let output = Command::new(&self.program)
            .args(&self.args)
            .arg(config.min_pixels.to_string())
            .arg(config.max_pixels.to_string())
            .arg(file.path())
            .output()
            .map_err(|e| format!("running {}: {e}", self.program.display()))?;
        if !output.status.success() {
            let stderr = String::from_utf8_lossy(&output.stderr);
            let tail = stderr.lines().last().unwrap_or("").trim();
            return Err(format!("scorer exited with {}: {tail}", output.status));
        }
        let stdout = String::from_utf8_lossy(&output.stdout);
        let line = stdout
            .lines()
            .rev()
            .find(|l| !l.trim().is_empty())
            .ok_or("scorer printed no score")?;
        line.trim()
            .parse::<f64>()
            .map_err(|_| format!("scorer printed '{}', not a number", line.trim()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurfacePoint {
    pub min_pixels: u64,
    pub max_pixels: u64,
    pub score: f64,
    pub mean_visual_tokens: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hole {
    pub min_pixels: u64,
    pub max_pixels: u64,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub best: ResolutionConfig,
    pub best_score: f64,
    /// Scored configurations in grid order.
    pub surface: Vec<SurfacePoint>,
    pub holes: Vec<Hole>,
}

/// Higher score wins; ties go to the smaller `max_pixels`, then the larger
/// `min_pixels`.
fn beats(a: &SurfacePoint, b: &SurfacePoint) -> bool {
    a.score
        .total_cmp(&b.score)
        .then(b.max_pixels.cmp(&a.max_pixels))
        .then(a.min_pixels.cmp(&b.min_pixels))
        .is_gt()
}

pub fn run_search(
    grid: &ResolutionGrid,
    manifest: &[SampleRecord],
    scorer: &dyn Scorer,
) -> Result<SearchResult> {
    let configs = enumerate_grid(grid)?;
    let outcomes: Vec<(ResolutionConfig, f64, std::result::Result<f64, String>)> = configs
        .par_iter()
        .map(|&config| {
            let summary = summarize(manifest, config);
            let score = match scorer.score(config, &summary) {
                Ok(s) if s.is_finite() => Ok(s),
                Ok(s) => Err(format!("non-finite score {s}")),
                Err(e) => Err(e),
            };
            (config, summary.mean_visual_tokens, score)
        })
        .collect();

    let mut surface = Vec::new();
    let mut holes = Vec::new();
    for (config, mean_visual_tokens, score) in outcomes {
        match score {
            Ok(score) => surface.push(SurfacePoint {
                min_pixels: config.min_pixels,
                max_pixels: config.max_pixels,
                score,
                mean_visual_tokens,
            }),
            Err(error) => {
                warn!(
                    "scoring ({}, {}) failed: {error}",
                    config.min_pixels, config.max_pixels
                );
                holes.push(Hole {
                    min_pixels: config.min_pixels,
                    max_pixels: config.max_pixels,
                    error,
                });
            }
        }
    }
    let best = surface
        .iter()
        .fold(None::<&SurfacePoint>, |best, p| match best {
            Some(b) if !beats(p, b) => Some(b),
            _ => Some(p),
        })
        .ok_or(Error::AllHoles(holes.len()))?;
    Ok(SearchResult {
        best: ResolutionConfig {
            min_pixels: best.min_pixels,
            max_pixels: best.max_pixels,
        },
        best_score: best.score,
        surface: surface.clone(),
        holes,
    })
}

/// Box-plot statistics of one `max_pixels` column across `min_pixels`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxStats {
    pub max_pixels: u64,
    pub n: usize,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

/// Quantile of sorted data by linear interpolation between closest ranks:
/// position `p * (n - 1)`, interpolating between its floor and ceiling.
pub fn quantile(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of empty data");
    let pos = p * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

pub fn box_stats(max_pixels: u64, scores: &[f64]) -> Option<BoxStats> {
    if scores.is_empty() {
        return None;
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    Some(BoxStats {
        max_pixels,
        n: sorted.len(),
        min: sorted[0],
        q1: quantile(&sorted, 0.25),
        median: quantile(&sorted, 0.5),
        q3: quantile(&sorted, 0.75),
        max: sorted[sorted.len() - 1],
    })
}

/// One row per `max_pixels` column that has any score, ascending. Columns
/// made only of holes are skipped with a warning.
pub fn surface_report(result: &SearchResult) -> Vec<BoxStats> {
    let mut columns: Vec<u64> = result
        .surface
        .iter()
        .map(|p| p.max_pixels)
        .chain(result.holes.iter().map(|h| h.max_pixels))
        .collect();
    columns.sort_unstable();
    columns.dedup();
    columns
        .into_iter()
        .filter_map(|max_pixels| {
            let scores: Vec<f64> = result
                .surface
                .iter()
                .filter(|p| p.max_pixels == max_pixels)
                .map(|p| p.score)
                .collect();
            let stats = box_stats(max_pixels, &scores);
            if stats.is_none() {
                warn!("max_pixels {max_pixels}: every configuration is a hole, omitted");
            }
            stats
        })
        .collect()
}

/// Everything a run produces, as one document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchReport {
    pub grid: ResolutionGrid,
    pub best: SurfacePoint,
    pub surface: Vec<SurfacePoint>,
    pub holes: Vec<Hole>,
    pub box_plot: Vec<BoxStats>,
}

impl SearchReport {
    pub fn new(grid: &ResolutionGrid, result: &SearchResult) -> Self {
        let best = result
            .surface
            .iter()
            .find(|p| p.min_pixels == result.best.min_pixels && p.max_pixels == result.best.max_pixels)
            .cloned()
            .expect("best is on the surface");
        Self {
            grid: grid.clone(),
            best,
            surface: result.surface.clone(),
            holes: result.holes.clone(),
            box_plot: surface_report(result),
        }
    }
}

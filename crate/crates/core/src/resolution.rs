//! Native-resolution quantization onto the patch grid.
//!
//! A visual token covers one `PATCH x PATCH` pixel cell (14-pixel ViT patches
//! merged 2x2), so every pixel budget in this crate is a multiple of
//! `PATCH * PATCH = 784` in practice.
//!
//! All rounding is done in exact integer arithmetic. Scaling by
//! `sqrt(bound / (w * h))` and snapping to the grid is equivalent to finding
//! the extreme `k` with `(k * PATCH)^2 * h <=> w * bound`, which avoids the
//! float drift that turns `10 * 5.6` into `56.000000000000007` and pushes a
//! ceil one cell too far.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::manifest::ImageSpec;

/// Edge length in pixels of one visual-token cell.
pub const PATCH: u64 = 28;

/// Pixel area of one visual-token cell.
pub const CELL_PIXELS: u64 = PATCH * PATCH;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ResizedImage {
    pub width: u64,
    pub height: u64,
    pub visual_tokens: u64,
}

impl ResizedImage {
    pub fn area(&self) -> u64 {
        self.width * self.height
    }
}

/// Inclusive pixel-area window an image is resized into.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PixelWindow {
    pub min_pixels: u64,
    pub max_pixels: u64,
}

impl PixelWindow {
    pub fn new(min_pixels: u64, max_pixels: u64) -> Result<Self> {
        let window = Self {
            min_pixels,
            max_pixels,
        };
        window.validate(PATCH)?;
        Ok(window)
    }

    fn validate(&self, patch: u64) -> Result<()> {
        if self.min_pixels > self.max_pixels {
            return Err(Error::Config(format!(
                "min_pixels {} exceeds max_pixels {}",
                self.min_pixels, self.max_pixels
            )));
        }
        if self.max_pixels < patch * patch {
            return Err(Error::Config(format!(
                "max_pixels {} is below one {patch}x{patch} cell",
                self.max_pixels
            )));
        }
        Ok(())
    }

    pub fn contains(&self, area: u64) -> bool {
        (self.min_pixels..=self.max_pixels).contains(&area)
    }
}

/// Visual tokens of a grid-aligned image.
pub fn visual_tokens(width: u64, height: u64) -> Result<u64> {
    visual_tokens_with_patch(width, height, PATCH)
}

pub fn visual_tokens_with_patch(width: u64, height: u64, patch: u64) -> Result<u64> {
    if width == 0 || height == 0 || !width.is_multiple_of(patch) || !height.is_multiple_of(patch) {
        return Err(Error::OffGrid { width, height, patch });
    }
    Ok((width / patch) * (height / patch))
}

/// Resize `img` onto the 28-pixel grid with its area inside `[min_pixels, max_pixels]`.
pub fn smart_resize(img: ImageSpec, min_pixels: u64, max_pixels: u64) -> Result<ResizedImage> {
    smart_resize_with_patch(
        img,
        PixelWindow {
            min_pixels,
            max_pixels,
        },
        PATCH,
    )
}

/// Grid quantization for an arbitrary patch edge.
///
/// Images with an edge shorter than one patch are first enlarged by the
/// smallest integer factor that brings the short edge to `patch`, which keeps
/// the aspect ratio exact. Each edge is then rounded to the nearest multiple
/// of `patch` (half up). If that overshoots `max_pixels` both edges are
/// rescaled by `sqrt(max / area)` and floored; if it undershoots `min_pixels`
/// they are rescaled by `sqrt(min / area)` and ceiled.
///
/// The result must land in the window and keep the aspect-ratio drift within
/// [`within_drift_bound`]. When the primary rounding misses either, the
/// other floor/ceil neighbours of the scaled edges are tried and the one with
/// the least distortion wins. With no admissible neighbour the image is
/// reported as infeasible.
pub fn smart_resize_with_patch(img: ImageSpec, window: PixelWindow, patch: u64) -> Result<ResizedImage> {
    if patch == 0 {
        return Err(Error::Config("patch size must be positive".into()));
    }
    window.validate(patch)?;
    let (w, h) = (img.width, img.height);
    if w == 0 || h == 0 {
        return Err(Error::Config(format!("image {w}x{h} has a zero edge")));
    }
    let factor = patch.div_ceil(w.min(h));
    let (sw, sh) = (w * factor, h * factor);

    let nearest = (round_nearest(sw, patch), round_nearest(sh, patch));
    let area = nearest.0 as u128 * nearest.1 as u128;
    let primary = if area > window.max_pixels as u128 {
        (
            floor_scaled(sw, sh, window.max_pixels, patch),
            floor_scaled(sh, sw, window.max_pixels, patch),
        )
    } else if area < window.min_pixels as u128 {
        (
            ceil_scaled(sw, sh, window.min_pixels, patch),
            ceil_scaled(sh, sw, window.min_pixels, patch),
        )
    } else {
        nearest
    };

    let admissible = |(ow, oh): (u64, u64)| {
        let area = ow as u128 * oh as u128;
        area >= window.min_pixels as u128
            && area <= window.max_pixels as u128
            && within_drift_bound(w, h, ow, oh, patch)
    };
    let chosen = if admissible(primary) {
        Some(primary)
    } else {
        fallback_candidates(w, h, primary, window, patch)
            .into_iter()
            .filter(|&c| admissible(c))
            .min_by(|&a, &b| {
                distortion(w, h, a)
                    .total_cmp(&distortion(w, h, b))
                    .then((a.0 * a.1).cmp(&(b.0 * b.1)).reverse())
            })
    };
    let Some((out_w, out_h)) = chosen else {
        let area = primary.0 as u128 * primary.1 as u128;
        return Err(Error::ResizeInfeasible {
            width: w,
            height: h,
            min_pixels: window.min_pixels,
            max_pixels: window.max_pixels,
            candidate_width: primary.0,
            candidate_height: primary.1,
            candidate_area: area.min(u64::MAX as u128) as u64,
        });
    };
    Ok(ResizedImage {
        width: out_w,
        height: out_h,
        visual_tokens: (out_w / patch) * (out_h / patch),
    })
}

// Candidates near `primary`: the short edge moves by at most one cell and
// the long edge takes the in-window cell count closest to the true ratio.
fn fallback_candidates(
    w: u64,
    h: u64,
    primary: (u64, u64),
    window: PixelWindow,
    patch: u64,
) -> Vec<(u64, u64)> {
    let wide = w >= h;
    let (short_px, long_px) = if wide { (h, w) } else { (w, h) };
    let primary_short = if wide { primary.1 } else { primary.0 } / patch;
    let cell = patch as u128 * patch as u128;
    let mut out = Vec::new();
    for short in primary_short.saturating_sub(1).max(1)..=primary_short + 1 {
        let short = short as u128;
        let lo = (window.min_pixels as u128).div_ceil(cell * short).max(1);
        let hi = window.max_pixels as u128 / (cell * short);
        if lo > hi {
            continue;
        }
        // long / short ~= long_px / short_px, rounded half up.
        let ideal = (2 * short * long_px as u128 + short_px as u128) / (2 * short_px as u128);
        let long = ideal.clamp(lo, hi);
        let (s_px, l_px) = (
            (short as u64) * patch,
            (long.min(u64::MAX as u128 / 2) as u64) * patch,
        );
        out.push(if wide { (l_px, s_px) } else { (s_px, l_px) });
    }
    out
}

fn distortion(w: u64, h: u64, (ow, oh): (u64, u64)) -> f64 {
    (ow as f64 / oh as f64 - w as f64 / h as f64).abs()
}

/// `|out_w/out_h - w/h| <= patch * (out_w + out_h) / out_h^2`, cross-multiplied.
pub fn within_drift_bound(w: u64, h: u64, out_w: u64, out_h: u64, patch: u64) -> bool {
    // |out_w*h - w*out_h| * out_h <= patch * (out_w + out_h) * h
    let (w, h, ow, oh, p) = (w as u128, h as u128, out_w as u128, out_h as u128, patch as u128);
    let lhs = (ow * h).abs_diff(w * oh) * oh;
    let rhs = p * (ow + oh) * h;
    lhs <= rhs
}

fn round_nearest(x: u64, patch: u64) -> u64 {
    ((x + patch / 2) / patch).max(1) * patch
}

// Largest multiple of `patch` not above edge * sqrt(bound / (edge * other)),
// i.e. the largest k with (k*patch)^2 * other <= edge * bound.
fn floor_scaled(edge: u64, other: u64, bound: u64, patch: u64) -> u64 {
    let num = edge as u128 * bound as u128;
    let den = other as u128 * (patch as u128 * patch as u128);
    let k = (num / den).isqrt();
    (k.max(1) as u64) * patch
}

// Smallest multiple of `patch` not below edge * sqrt(bound / (edge * other)).
fn ceil_scaled(edge: u64, other: u64, bound: u64, patch: u64) -> u64 {
    let num = edge as u128 * bound as u128;
    let den = other as u128 * (patch as u128 * patch as u128);
    let target = num.div_ceil(den);
    let mut k = target.isqrt();
    if k * k < target {
        k += 1;
    }
    (k.max(1) as u64) * patch
}

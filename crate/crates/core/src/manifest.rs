//! Sample records and the newline-delimited manifest format.
//!
//! One JSON object per line:
//!
//! ```text
//! {"dataset_id":"coco","sample_index":0,"text_tokens":120,"images":[{"w":640,"h":480}]}
//! ```
//!
//! Only image shapes are stored; packing and budgeting never need pixels.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::resolution::{smart_resize_with_patch, PixelWindow};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ImageSpec {
    #[serde(rename = "w")]
    pub width: u64,
    #[serde(rename = "h")]
    pub height: u64,
}

impl ImageSpec {
    pub fn new(width: u64, height: u64) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Config(format!("image {width}x{height} has a zero edge")));
        }
        Ok(Self { width, height })
    }
}

/// Identity of a sample: dataset plus position within it.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SampleKey {
    pub dataset_id: String,
    pub sample_index: u64,
}

impl SampleKey {
    pub fn new(dataset_id: impl Into<String>, sample_index: u64) -> Self {
        Self {
            dataset_id: dataset_id.into(),
            sample_index,
        }
    }
}

impl fmt::Display for SampleKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}#{}", self.dataset_id, self.sample_index)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub dataset_id: String,
    pub sample_index: u64,
    pub text_tokens: u64,
    #[serde(default)]
    pub images: Vec<ImageSpec>,
}

impl SampleRecord {
    pub fn text_only(dataset_id: impl Into<String>, sample_index: u64, text_tokens: u64) -> Self {
        Self {
            dataset_id: dataset_id.into(),
            sample_index,
            text_tokens,
            images: Vec::new(),
        }
    }

    pub fn key(&self) -> SampleKey {
        SampleKey::new(self.dataset_id.clone(), self.sample_index)
    }

    /// Visual tokens of every image after resizing under `cfg`.
    pub fn visual_tokens(&self, cfg: &PipelineConfig) -> Result<u64> {
        let window = PixelWindow {
            min_pixels: cfg.min_pixels,
            max_pixels: cfg.max_pixels,
        };
        self.images.iter().try_fold(0u64, |acc, img| {
            let resized = smart_resize_with_patch(*img, window, cfg.patch)?;
            Ok(acc + resized.visual_tokens)
        })
    }
}

/// Text tokens plus resized visual tokens.
pub fn total_tokens(sample: &SampleRecord, cfg: &PipelineConfig) -> Result<u64> {
    Ok(sample.text_tokens + sample.visual_tokens(cfg)?)
}

// Signed on the wire so negative counts get a validation error instead of a
// generic type error.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRecord {
    dataset_id: String,
    sample_index: i64,
    text_tokens: i64,
    #[serde(default)]
    images: Vec<RawImage>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawImage {
    w: i64,
    h: i64,
}

fn parse_line(line: &str, lineno: usize) -> Result<SampleRecord> {
    let bad = |message: String| Error::ManifestParse {
        line: lineno,
        message,
    };
    let raw: RawRecord = serde_json::from_str(line).map_err(|e| bad(e.to_string()))?;
    if raw.sample_index < 0 {
        return Err(bad(format!("negative sample_index {}", raw.sample_index)));
    }
    if raw.text_tokens < 0 {
        return Err(bad(format!("negative text_tokens {}", raw.text_tokens)));
    }
    let images = raw
        .images
        .iter()
        .map(|img| {
            if img.w < 1 || img.h < 1 {
                Err(bad(format!("image {}x{} must have positive edges", img.w, img.h)))
            } else {
                Ok(ImageSpec {
                    width: img.w as u64,
                    height: img.h as u64,
                })
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SampleRecord {
        dataset_id: raw.dataset_id,
        sample_index: raw.sample_index as u64,
        text_tokens: raw.text_tokens as u64,
        images,
    })
}

/// Parse manifest text. Blank lines are skipped; line numbers are 1-based.
pub fn parse_manifest<R: BufRead>(reader: R) -> Result<Vec<SampleRecord>> {
    let mut seen = HashSet::new();
    let mut records = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| Error::ManifestParse {
            line: lineno,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let record = parse_line(&line, lineno)?;
        if !seen.insert(record.key()) {
            return Err(Error::DuplicateSample {
                line: lineno,
                key: record.key(),
            });
        }
        records.push(record);
    }
    Ok(records)
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<Vec<SampleRecord>> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_manifest(BufReader::new(file))
}

pub fn write_manifest<W: Write>(mut out: W, records: &[SampleRecord]) -> std::io::Result<()> {
    for record in records {
        serde_json::to_writer(&mut out, record)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// SHA-256 over the canonical serialization of the records, in order.
pub fn manifest_digest(records: &[SampleRecord]) -> String {
    let mut hasher = Sha256::new();
    for record in records {
        hasher.update(serde_json::to_vec(record).expect("records always serialize"));
        hasher.update(b"\n");
    }
    hex(&hasher.finalize())
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}


#[cfg(test)]
mod props {
    use super::*;
    use crate::resolution::CELL_PIXELS;
    use proptest::prelude::*;

    fn record() -> impl Strategy<Value = SampleRecord> {
        (
            "[a-z]{1,4}",
            0u64..50,
            0u64..100_000,
            prop::collection::vec((1u64..5000, 1u64..5000), 0..4),
        )
            .prop_map(|(dataset_id, sample_index, text_tokens, images)| SampleRecord {
                dataset_id,
                sample_index,
                text_tokens,
                images: images
                    .into_iter()
                    .map(|(width, height)| ImageSpec { width, height })
                    .collect(),
            })
    }

    proptest! {
        #[test]
        fn write_then_load_is_identity(records in prop::collection::vec(record(), 0..40)) {
            let mut seen = HashSet::new();
            let records: Vec<SampleRecord> = records.into_iter().filter(|r| seen.insert(r.key())).collect();
            let mut buf = Vec::new();
            write_manifest(&mut buf, &records).unwrap();
            prop_assert_eq!(parse_manifest(buf.as_slice()).unwrap(), records);
        }

        #[test]
        fn total_tokens_monotone_in_max_pixels(r in record(), a in 4u64..3000, b in 4u64..3000) {
            let (lo, hi) = (a.min(b), a.max(b));
            let small = PipelineConfig::with_budget(8192, lo * CELL_PIXELS);
            let large = PipelineConfig::with_budget(8192, hi * CELL_PIXELS);
            if let (Ok(x), Ok(y)) = (total_tokens(&r, &small), total_tokens(&r, &large)) {
                prop_assert!(x <= y, "{} > {}", x, y);
            }
        }
    }
}

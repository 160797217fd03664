//! Checkpoint weight averaging.
//!
//! `average` computes `sum_i w_i * input_i` elementwise over every tensor
//! selected by the key filter, accumulating in f64 and storing f32. Tensors
//! outside the filter are copied verbatim from the passthrough input, which
//! is how a language-backbone-only merge keeps the vision tower of one
//! checkpoint untouched.

mod container;

use std::collections::HashSet;
use std::path::PathBuf;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use container::{DType, Tensor, TensorContainer, FORMAT_VERSION, MAGIC};

/// Tolerance on `sum(weights) == 1`.
pub const WEIGHT_SUM_TOLERANCE: f64 = 1e-9;

/// Which tensors get averaged.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct KeyFilter {
    pub prefix: Option<String>,
}

impl KeyFilter {
    pub fn all() -> Self {
        Self { prefix: None }
    }

    pub fn prefix(prefix: impl Into<String>) -> Self {
        Self {
            prefix: Some(prefix.into()),
        }
    }

    pub fn matches(&self, name: &str) -> bool {
        self.prefix.as_deref().is_none_or(|p| name.starts_with(p))
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MergeOptions {
    /// Per-input weights; uniform when `None`.
    pub weights: Option<Vec<f64>>,
    pub key_filter: KeyFilter,
    /// Input that supplies tensors the filter does not select.
    pub passthrough_source: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MergeSpec {
    pub inputs: Vec<PathBuf>,
    pub options: MergeOptions,
}

/// Load the inputs named by `spec` and average them.
pub fn average(spec: &MergeSpec) -> Result<TensorContainer> {
    let inputs = spec
        .inputs
        .iter()
        .map(TensorContainer::load)
        .collect::<Result<Vec<_>>>()?;
    average_containers(&inputs, &spec.options)
}

/// Resolve and check the weight vector for `n` inputs.
pub fn resolve_weights(weights: Option<&[f64]>, n: usize) -> Result<Vec<f64>> {
    if n < 2 {
        return Err(Error::MergeSpec(format!("need at least 2 inputs, got {n}")));
    }
    let Some(weights) = weights else {
        return Ok(vec![1.0 / n as f64; n]);
    };
    if weights.len() != n {
        return Err(Error::MergeSpec(format!(
            "{} weights for {n} inputs",
            weights.len()
        )));
    }
    if let Some(w) = weights.iter().find(|w| !w.is_finite() || **w < 0.0) {
        return Err(Error::MergeSpec(format!(
            "weight {w} is not a non-negative number"
        )));
    }
    let sum: f64 = weights.iter().sum();
    if (sum - 1.0).abs() > WEIGHT_SUM_TOLERANCE {
        return Err(Error::MergeSpec(format!("weights sum to {sum}, not 1")));
    }
    Ok(weights.to_vec())
}

/// `sum_i weights[i] * tensors[i][j]` for every element `j`, in f64, adding
/// inputs in order.
pub fn weighted_sum(tensors: &[&[f32]], weights: &[f64]) -> Vec<f64> {
    assert_eq!(tensors.len(), weights.len());
    let n = tensors.first().map_or(0, |t| t.len());
    let mut acc = vec![0.0f64; n];
    for (data, &w) in tensors.iter().zip(weights) {
        assert_eq!(data.len(), n);
        for (a, &x) in acc.iter_mut().zip(data.iter()) {
            *a += w * x as f64;
        }
    }
    acc
}

pub fn average_containers(inputs: &[TensorContainer], opts: &MergeOptions) -> Result<TensorContainer> {
    let weights = resolve_weights(opts.weights.as_deref(), inputs.len())?;
    let source = opts.passthrough_source;
    let passthrough = inputs.get(source).ok_or_else(|| {
        Error::MergeSpec(format!(
            "passthrough source {source} out of range for {} inputs",
            inputs.len()
        ))
    })?;

    // Selected names must exist everywhere, including the passthrough input
    // whose order the output follows.
    for input in inputs {
        if let Some(name) = input
            .names()
            .find(|n| opts.key_filter.matches(n) && !passthrough.contains(n))
        {
            return Err(Error::MissingTensor {
                name: name.to_string(),
                input: source,
            });
        }
    }

    let plan: Vec<(&str, &Tensor, bool)> = passthrough
        .iter()
        .map(|(name, tensor)| (name, tensor, opts.key_filter.matches(name)))
        .collect();
    for &(name, tensor, selected) in &plan {
        if !selected {
            continue;
        }
        for (i, input) in inputs.iter().enumerate() {
            let other = input.get(name).ok_or_else(|| Error::MissingTensor {
                name: name.to_string(),
                input: i,
            })?;
            if other.shape != tensor.shape || other.dtype != tensor.dtype {
                return Err(Error::ShapeMismatch {
                    name: name.to_string(),
                    left: tensor.shape.clone(),
                    right: other.shape.clone(),
                });
            }
        }
    }

    let merged: Vec<(String, Tensor)> = plan
        .par_iter()
        .map(|&(name, tensor, selected)| {
            if !selected {
                return (name.to_string(), tensor.clone());
            }
            let parts: Vec<&[f32]> = inputs
                .iter()
                .map(|c| c.get(name).expect("checked above").data.as_slice())
                .collect();
            let data = weighted_sum(&parts, &weights)
                .into_iter()
                .map(|x| x as f32)
                .collect();
            let out = Tensor {
                dtype: tensor.dtype,
                shape: tensor.shape.clone(),
                data,
            };
            (name.to_string(), out)
        })
        .collect();

    let mut out = TensorContainer::new();
    for (name, tensor) in merged {
        out.insert(name, tensor)?;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorDiff {
    pub name: String,
    pub numel: usize,
    pub max_abs: f64,
    pub rms: f64,
}

/// Per-tensor max-abs and RMS difference, largest max-abs first.
pub fn diff_report(a: &TensorContainer, b: &TensorContainer) -> Result<Vec<TensorDiff>> {
    let left: HashSet<&str> = a.names().collect();
    let right: HashSet<&str> = b.names().collect();
    if left != right {
        let only_left = a
            .names()
            .filter(|n| !right.contains(n))
            .map(String::from)
            .collect();
        let only_right = b
            .names()
            .filter(|n| !left.contains(n))
            .map(String::from)
            .collect();
        return Err(Error::SchemaMismatch {
            only_left,
            only_right,
        });
    }
    let mut rows = a
        .iter()
        .map(|(name, ta)| {
            let tb = b.get(name).expect("same name set");
            if ta.shape != tb.shape {
                return Err(Error::ShapeMismatch {
                    name: name.to_string(),
                    left: ta.shape.clone(),
                    right: tb.shape.clone(),
                });
            }
            let (mut max_abs, mut sq) = (0.0f64, 0.0f64);
            for (&x, &y) in ta.data.iter().zip(&tb.data) {
                let d = (x as f64 - y as f64).abs();
                max_abs = max_abs.max(d);
                sq += d * d;
            }
            Ok(TensorDiff {
                name: name.to_string(),
                numel: ta.numel(),
                max_abs,
                rms: (sq / ta.numel() as f64).sqrt(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    rows.sort_by(|x, y| y.max_abs.total_cmp(&x.max_abs));
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn container(entries: &[(&str, &[f32])]) -> TensorContainer {
        let mut c = TensorContainer::new();
        for (name, data) in entries {
            c.insert(
                *name,
                Tensor::new(vec![data.len() as u64], data.to_vec()).unwrap(),
            )
            .unwrap();
        }
        c
    }

    #[test]
    fn uniform_mean() {
        let a = container(&[("w", &[2.0]), ("b", &[0.0])]);
        let b = container(&[("w", &[4.0]), ("b", &[2.0])]);
        let out = average_containers(&[a, b], &MergeOptions::default()).unwrap();
        assert_eq!(out, container(&[("w", &[3.0]), ("b", &[1.0])]));
    }

    #[test]
    fn identical_inputs_are_identity() {
        let a = container(&[("x", &[0.1, -7.25, 3.0e-5]), ("y", &[1.0e20])]);
        let out = average_containers(&[a.clone(), a.clone(), a.clone()], &MergeOptions::default()).unwrap();
        assert_eq!(out, a);
    }

    #[test]
    fn selective_merge_passes_through() {
        let sft = container(&[("vision.w", &[9.0, 9.0]), ("lang.w", &[1.0])]);
        let base = container(&[("lang.w", &[3.0])]);
        let opts = MergeOptions {
            key_filter: KeyFilter::prefix("lang."),
            passthrough_source: 0,
            ..MergeOptions::default()
        };
        let out = average_containers(&[sft.clone(), base], &opts).unwrap();
        assert_eq!(out.get("lang.w").unwrap().data, vec![2.0]);
        assert_eq!(out.get("vision.w"), sft.get("vision.w"));
        assert_eq!(out.names().collect::<Vec<_>>(), ["vision.w", "lang.w"]);
    }

    #[test]
    fn explicit_weights() {
        let a = container(&[("w", &[0.0])]);
        let b = container(&[("w", &[10.0])]);
        let opts = MergeOptions {
            weights: Some(vec![0.25, 0.75]),
            ..MergeOptions::default()
        };
        let out = average_containers(&[a, b], &opts).unwrap();
        assert_eq!(out.get("w").unwrap().data, vec![7.5]);
    }

    #[test]
    fn spec_errors() {
        let a = container(&[("w", &[0.0])]);
        let b = container(&[("w", &[1.0, 2.0])]);
        assert!(matches!(
            average_containers(&[a.clone(), b], &MergeOptions::default()),
            Err(Error::ShapeMismatch { ref name, .. }) if name == "w"
        ));
        let c = container(&[("v", &[0.0])]);
        assert!(matches!(
            average_containers(&[a.clone(), c], &MergeOptions::default()),
            Err(Error::MissingTensor { .. })
        ));
        let bad_weights = MergeOptions {
            weights: Some(vec![1.0]),
            ..MergeOptions::default()
        };
        assert!(matches!(
            average_containers(&[a.clone(), a.clone()], &bad_weights),
            Err(Error::MergeSpec(_))
        ));
        let unnormalized = MergeOptions {
            weights: Some(vec![0.5, 0.6]),
            ..MergeOptions::default()
        };
        assert!(average_containers(&[a.clone(), a.clone()], &unnormalized).is_err());
        let negative = MergeOptions {
            weights: Some(vec![1.5, -0.5]),
            ..MergeOptions::default()
        };
        assert!(average_containers(&[a.clone(), a.clone()], &negative).is_err());
        assert!(average_containers(&[a], &MergeOptions::default()).is_err());
    }

    #[test]
    fn diff_examples() {
        let a = container(&[("x", &[1.0, 2.0]), ("y", &[0.0, 0.0, 0.0])]);
        assert!(diff_report(&a, &a)
            .unwrap()
            .iter()
            .all(|r| r.max_abs == 0.0 && r.rms == 0.0));

        let b = container(&[("x", &[1.0, 2.0]), ("y", &[0.0, 1.0, 0.0])]);
        let rows = diff_report(&a, &b).unwrap();
        assert_eq!(rows[0].name, "y");
        assert_eq!(rows[0].max_abs, 1.0);
        assert!((rows[0].rms - (1.0f64 / 3.0).sqrt()).abs() < 1e-15);

        let c = container(&[("z", &[1.0])]);
        match diff_report(&a, &c).unwrap_err() {
            Error::SchemaMismatch {
                only_left,
                only_right,
            } => {
                assert_eq!(only_left, ["x", "y"]);
                assert_eq!(only_right, ["z"]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }
}

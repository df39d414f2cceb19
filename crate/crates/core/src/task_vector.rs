//! Task vectors: extraction, magnitude sparsification, norm-preserving
//! rescaling and linear merging.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dtype::Dtype;
use crate::quantile::{self, ValueSource};
use crate::tensor_archive::{ArchiveError, ArchiveWriter, Metadata, TensorArchive, TensorSpec};

pub const DEFAULT_RETENTION: f64 = 0.30;
pub const DEFAULT_EPSILON: f64 = 1e-8;

#[derive(Debug, thiserror::Error)]
pub enum TaskVectorError {
    #[error("tensor {name}: shape {left:?} does not match {right:?}")]
    ShapeMismatch {
        name: String,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("tensor name sets differ (e.g. {0:?})")]
    NameSetMismatch(String),
    #[error("tensor {name}: dtype {left} does not match {right}")]
    DtypeMismatch { name: String, left: Dtype, right: Dtype },
    #[error("task vector has no parameters")]
    EmptyVector,
    #[error("retention {0} is outside (0, 1]")]
    InvalidRetention(f64),
    #[error("rescale needs a sparsified vector")]
    NotSparsified,
    #[error("invalid task vector file: {0}")]
    InvalidMetadata(String),
    #[error(transparent)]
    Archive(#[from] ArchiveError),
}

type Result<T> = std::result::Result<T, TaskVectorError>;

/// Flat delta buffer for one tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Delta {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparsityInfo {
    pub retention_p: f64,
    /// Global threshold; in per-tensor scope the smallest per-tensor threshold.
    pub threshold: f64,
    /// Non-zero entries that survived the mask.
    pub retained_count: usize,
    pub original_norm: f64,
    pub sparse_norm: f64,
    /// 1 until [`rescale`] runs.
    pub rescale_gamma: f64,
    pub epsilon: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskVector {
    pub tensors: BTreeMap<String, Delta>,
    pub source_base_id: String,
    pub source_ft_id: String,
    pub sparsity: Option<SparsityInfo>,
}

impl ValueSource for TaskVector {
    fn for_each_chunk(&self, f: &mut dyn FnMut(&[f64])) {
        for delta in self.tensors.values() {
            f(&delta.values);
        }
    }
}

impl TaskVector {
    pub fn num_parameters(&self) -> usize {
        self.tensors.values().map(|d| d.values.len()).sum()
    }

    pub fn count_nonzero(&self) -> usize {
        self.tensors
            .values()
            .map(|d| d.values.iter().filter(|v| **v != 0.0).count())
            .sum()
    }

    /// Values of all tensors concatenated in name order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_parameters());
        self.for_each_chunk(&mut |c| out.extend_from_slice(c));
        out
    }

    fn map_values(&self, f: impl Fn(&str, &[f64]) -> Vec<f64> + Sync) -> BTreeMap<String, Delta> {
        self.tensors
            .par_iter()
            .map(|(name, d)| {
                (
                    name.clone(),
                    Delta {
                        shape: d.shape.clone(),
                        values: f(name, &d.values),
                    },
                )
            })
            .collect()
    }

    /// Checks that `other` has exactly the same tensor names and shapes.
    pub fn check_compatible(&self, other: &TaskVector) -> Result<()> {
        for (name, delta) in &self.tensors {
            let theirs = other
                .tensors
                .get(name)
                .ok_or_else(|| TaskVectorError::NameSetMismatch(name.clone()))?;
            if theirs.shape != delta.shape {
                return Err(TaskVectorError::ShapeMismatch {
                    name: name.clone(),
                    left: delta.shape.clone(),
                    right: theirs.shape.clone(),
                });
            }
        }
        if let Some(extra) = other.tensors.keys().find(|k| !self.tensors.contains_key(*k)) {
            return Err(TaskVectorError::NameSetMismatch(extra.clone()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DtypePolicy {
    /// Base and fine-tuned tensors must share a dtype.
    #[default]
    Require,
    /// Mixed dtypes are fine; everything is widened to f64 anyway.
    Allow,
}

/// `finetuned - base`, tensor by tensor.
pub fn extract_task_vector(base: &TensorArchive, finetuned: &TensorArchive, policy: DtypePolicy) -> Result<TaskVector> {
    for name in base.names() {
        if finetuned.meta(name).is_none() {
            return Err(TaskVectorError::NameSetMismatch(name.to_string()));
        }
    }
    if let Some(extra) = finetuned.names().find(|n| base.meta(n).is_none()) {
        return Err(TaskVectorError::NameSetMismatch(extra.to_string()));
    }
    for (name, meta) in base.entries() {
        let other = &finetuned.entries()[name];
        if meta.shape != other.shape {
            return Err(TaskVectorError::ShapeMismatch {
                name: name.clone(),
                left: meta.shape.clone(),
                right: other.shape.clone(),
            });
        }
        if policy == DtypePolicy::Require && meta.dtype != other.dtype {
            return Err(TaskVectorError::DtypeMismatch {
                name: name.clone(),
                left: meta.dtype,
                right: other.dtype,
            });
        }
    }

    let mut tensors = BTreeMap::new();
    for entry in base.iter_tensors() {
        let (name, base_tensor) = entry?;
        let ft = finetuned.read_tensor(&name)?;
        let values = ft.values.iter().zip(&base_tensor.values).map(|(f, b)| f - b).collect();
        tensors.insert(
            name,
            Delta {
                shape: base_tensor.meta.shape,
                values,
            },
        );
    }
    Ok(TaskVector {
        tensors,
        source_base_id: base.path().display().to_string(),
        source_ft_id: finetuned.path().display().to_string(),
        sparsity: None,
    })
}

/// Square root of the sum of squares, reduced per tensor and combined in
/// name order so the result does not depend on scheduling.
pub fn global_l2_norm(tv: &TaskVector) -> f64 {
    let partials: Vec<f64> = tv.tensors.par_iter().map(|(_, d)| sum_of_squares(&d.values)).collect();
    partials.iter().sum::<f64>().sqrt()
}

pub(crate) fn sum_of_squares(values: &[f64]) -> f64 {
    values.iter().map(|v| v * v).sum()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QuantileMode {
    #[default]
    Exact,
    Streaming,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QuantileScope {
    #[default]
    Global,
    PerTensor,
}

fn check_retention(p: f64) -> Result<()> {
    if p > 0.0 && p <= 1.0 {
        Ok(())
    } else {
        Err(TaskVectorError::InvalidRetention(p))
    }
}

fn threshold_of(source: &dyn ValueSource, k: usize, mode: QuantileMode) -> f64 {
    match mode {
        QuantileMode::Exact => quantile::exact_threshold(source, k),
        QuantileMode::Streaming => quantile::streaming_threshold(source, k),
    }
}

/// Magnitude `t` such that keeping `|v| >= t` (with ties resolved by
/// position) keeps `ceil(p * N)` entries.
pub fn quantile_threshold(tv: &TaskVector, p: f64, mode: QuantileMode) -> Result<f64> {
    check_retention(p)?;
    let total = tv.num_parameters();
    if total == 0 {
        return Err(TaskVectorError::EmptyVector);
    }
    Ok(threshold_of(tv, quantile::retained_count(p, total), mode))
}

/// Keeps the top `p` fraction of entries by magnitude across the whole vector.
pub fn sparsify(tv: &TaskVector, p: f64, mode: QuantileMode) -> Result<TaskVector> {
    sparsify_scoped(tv, p, mode, QuantileScope::Global)
}

/// Like [`sparsify`], optionally selecting the top fraction within each
/// tensor separately.
///
/// In exact mode entries tied at the threshold are kept in ascending
/// (tensor name, flat index) order until exactly `ceil(p * N)` survive. Zero
/// entries never count as retained.
pub fn sparsify_scoped(tv: &TaskVector, p: f64, mode: QuantileMode, scope: QuantileScope) -> Result<TaskVector> {
    check_retention(p)?;
    if tv.num_parameters() == 0 {
        return Err(TaskVectorError::EmptyVector);
    }
    let original_norm = global_l2_norm(tv);

    let (tensors, threshold) = match scope {
        QuantileScope::Global => {
            let k = quantile::retained_count(p, tv.num_parameters());
            let t = threshold_of(tv, k, mode);
            let mut ties = tie_budget(tv, k, t, mode);
            let tensors = tv
                .tensors
                .iter()
                .map(|(name, d)| {
                    let values = mask(&d.values, t, &mut ties);
                    (
                        name.clone(),
                        Delta {
                            shape: d.shape.clone(),
                            values,
                        },
                    )
                })
                .collect();
            (tensors, t)
        }
        QuantileScope::PerTensor => {
            let masked: Vec<(String, Delta, f64)> = tv
                .tensors
                .par_iter()
                .map(|(name, d)| {
                    if d.values.is_empty() {
                        return (name.clone(), d.clone(), f64::INFINITY);
                    }
                    let k = quantile::retained_count(p, d.values.len());
                    let t = threshold_of(&d.values, k, mode);
                    let mut ties = tie_budget(&d.values, k, t, mode);
                    let values = mask(&d.values, t, &mut ties);
                    (
                        name.clone(),
                        Delta {
                            shape: d.shape.clone(),
                            values,
                        },
                        t,
                    )
                })
                .collect();
            let t = masked.iter().map(|m| m.2).fold(f64::INFINITY, f64::min);
            (masked.into_iter().map(|(n, d, _)| (n, d)).collect(), t)
        }
    };

    let mut out = TaskVector {
        tensors,
        source_base_id: tv.source_base_id.clone(),
        source_ft_id: tv.source_ft_id.clone(),
        sparsity: None,
    };
    let sparse_norm = global_l2_norm(&out);
    out.sparsity = Some(SparsityInfo {
        retention_p: p,
        threshold,
        retained_count: out.count_nonzero(),
        original_norm,
        sparse_norm,
        rescale_gamma: 1.0,
        epsilon: None,
    });
    Ok(out)
}

/// How many entries exactly at the threshold may survive. Streaming mode
/// keeps every tie.
fn tie_budget(source: &dyn ValueSource, k: usize, t: f64, mode: QuantileMode) -> usize {
    if mode == QuantileMode::Streaming {
        return usize::MAX;
    }
    let mut above = 0usize;
    source.for_each_chunk(&mut |c| above += c.iter().filter(|v| v.abs() > t).count());
    k.saturating_sub(above)
}

fn mask(values: &[f64], t: f64, ties: &mut usize) -> Vec<f64> {
    values
        .iter()
        .map(|&v| {
            let a = v.abs();
            if a > t {
                v
            } else if a == t && v != 0.0 && *ties > 0 {
                *ties -= 1;
                v
            } else {
                0.0
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RescaleWarning {
    /// The sparse vector was all zeros, so gamma is `original_norm / epsilon`.
    DegenerateRescale,
}

#[derive(Debug, Clone)]
pub struct Rescaled {
    pub vector: TaskVector,
    pub gamma: f64,
    pub warning: Option<RescaleWarning>,
}

/// Multiplies every entry by `original_norm / (sparse_norm + epsilon)`.
pub fn rescale(tv_sparse: &TaskVector, original_norm: f64, epsilon: f64) -> Result<Rescaled> {
    let info = tv_sparse.sparsity.as_ref().ok_or(TaskVectorError::NotSparsified)?;
    let sparse_norm = global_l2_norm(tv_sparse);
    let gamma = original_norm / (sparse_norm + epsilon);
    let warning = if sparse_norm == 0.0 {
        log::warn!("rescaling an all-zero task vector; gamma = {gamma:e}");
        Some(RescaleWarning::DegenerateRescale)
    } else {
        None
    };
    let tensors = tv_sparse.map_values(|_, values| values.iter().map(|v| v * gamma).collect());
    let vector = TaskVector {
        tensors,
        source_base_id: tv_sparse.source_base_id.clone(),
        source_ft_id: tv_sparse.source_ft_id.clone(),
        sparsity: Some(SparsityInfo {
            original_norm,
            sparse_norm,
            rescale_gamma: gamma,
            epsilon: Some(epsilon),
            ..info.clone()
        }),
    };
    Ok(Rescaled { vector, gamma, warning })
}

/// Sparsify at retention `p`, then rescale back to the original norm.
pub fn sparsify_and_rescale(
    tv: &TaskVector,
    p: f64,
    mode: QuantileMode,
    scope: QuantileScope,
    epsilon: f64,
) -> Result<Rescaled> {
    let sparse = sparsify_scoped(tv, p, mode, scope)?;
    let original = sparse.sparsity.as_ref().map(|s| s.original_norm).unwrap_or(0.0);
    rescale(&sparse, original, epsilon)
}

/// `base + sum(lambda_i * tau_i)` for one tensor, accumulated in term order.
/// Terms with a zero coefficient are skipped so the base passes through
/// bit-for-bit.
pub fn merge_values(base: &[f64], terms: &[(&[f64], f64)]) -> Vec<f64> {
    let mut out = base.to_vec();
    for (delta, lambda) in terms {
        if *lambda == 0.0 {
            continue;
        }
        for (o, d) in out.iter_mut().zip(delta.iter()) {
            *o += lambda * d;
        }
    }
    out
}

fn check_merge_terms(base: &TensorArchive, terms: &[(&TaskVector, f64)]) -> Result<()> {
    for (tv, _) in terms {
        for (name, meta) in base.entries() {
            let delta = tv
                .tensors
                .get(name)
                .ok_or_else(|| TaskVectorError::NameSetMismatch(name.clone()))?;
            if delta.shape != meta.shape {
                return Err(TaskVectorError::ShapeMismatch {
                    name: name.clone(),
                    left: meta.shape.clone(),
                    right: delta.shape.clone(),
                });
            }
        }
        if let Some(extra) = tv.tensors.keys().find(|n| base.meta(n).is_none()) {
            return Err(TaskVectorError::NameSetMismatch(extra.clone()));
        }
    }
    Ok(())
}

/// Merged values at full precision, keyed by tensor name.
pub fn merge_in_memory(base: &TensorArchive, terms: &[(&TaskVector, f64)]) -> Result<BTreeMap<String, Vec<f64>>> {
    check_merge_terms(base, terms)?;
    let mut out = BTreeMap::new();
    for entry in base.iter_tensors() {
        let (name, tensor) = entry?;
        let slices: Vec<(&[f64], f64)> = terms
            .iter()
            .map(|(tv, l)| (tv.tensors[&name].values.as_slice(), *l))
            .collect();
        out.insert(name, merge_values(&tensor.values, &slices));
    }
    Ok(out)
}

/// Streams `base + sum(lambda_i * tau_i)` into a new archive, one tensor at a
/// time, narrowing to `dtype` (default: each base tensor's own dtype).
pub fn merge(
    base: &TensorArchive,
    terms: &[(&TaskVector, f64)],
    out: &Path,
    dtype: Option<Dtype>,
    metadata: Option<&Metadata>,
) -> Result<TensorArchive> {
    check_merge_terms(base, terms)?;
    let specs = base
        .entries()
        .values()
        .map(|m| TensorSpec {
            name: m.name.clone(),
            dtype: dtype.unwrap_or(m.dtype),
            shape: m.shape.clone(),
        })
        .collect();
    let mut writer = ArchiveWriter::create(out, specs, metadata)?;
    for entry in base.iter_tensors() {
        let (name, tensor) = entry?;
        let slices: Vec<(&[f64], f64)> = terms
            .iter()
            .map(|(tv, l)| (tv.tensors[&name].values.as_slice(), *l))
            .collect();
        writer.write_tensor(&name, &merge_values(&tensor.values, &slices))?;
    }
    Ok(writer.finish()?)
}

/// Metadata keys for persisted task vectors.
pub mod meta_keys {
    pub const SOURCE_BASE_ID: &str = "source_base_id";
    pub const SOURCE_FT_ID: &str = "source_ft_id";
    pub const RETENTION_P: &str = "retention_p";
    pub const THRESHOLD: &str = "threshold";
    pub const GAMMA: &str = "gamma";
    pub const EPSILON: &str = "epsilon";
    pub const ORIGINAL_NORM: &str = "original_norm";
    pub const SPARSE_NORM: &str = "sparse_norm";
    pub const RETAINED_COUNT: &str = "retained_count";
}

/// Writes a task vector as a tensor archive. `Dtype::F64` keeps it lossless.
pub fn save_task_vector(tv: &TaskVector, path: &Path, dtype: Dtype) -> Result<TensorArchive> {
    use meta_keys::*;
    let mut metadata = Metadata::new();
    metadata.insert(SOURCE_BASE_ID.into(), tv.source_base_id.clone());
    metadata.insert(SOURCE_FT_ID.into(), tv.source_ft_id.clone());
    if let Some(s) = &tv.sparsity {
        metadata.insert(RETENTION_P.into(), s.retention_p.to_string());
        metadata.insert(THRESHOLD.into(), s.threshold.to_string());
        metadata.insert(GAMMA.into(), s.rescale_gamma.to_string());
        metadata.insert(ORIGINAL_NORM.into(), s.original_norm.to_string());
        metadata.insert(SPARSE_NORM.into(), s.sparse_norm.to_string());
        metadata.insert(RETAINED_COUNT.into(), s.retained_count.to_string());
        if let Some(eps) = s.epsilon {
            metadata.insert(EPSILON.into(), eps.to_string());
        }
    }
    let specs = tv
        .tensors
        .iter()
        .map(|(name, d)| TensorSpec {
            name: name.clone(),
            dtype,
            shape: d.shape.clone(),
        })
        .collect();
    let mut writer = ArchiveWriter::create(path, specs, Some(&metadata))?;
    for (name, d) in &tv.tensors {
        writer.write_tensor(name, &d.values)?;
    }
    Ok(writer.finish()?)
}

pub fn load_task_vector(path: &Path) -> Result<TaskVector> {
    use meta_keys::*;
    let archive = TensorArchive::open(path)?;
    let empty = Metadata::new();
    let metadata = archive.metadata().unwrap_or(&empty);
    let get = |key: &str| metadata.get(key).cloned();
    let num = |key: &str| -> Result<Option<f64>> {
        get(key)
            .map(|s| {
                s.parse::<f64>()
                    .map_err(|_| TaskVectorError::InvalidMetadata(format!("{key} = {s:?}")))
            })
            .transpose()
    };

    let mut tensors = BTreeMap::new();
    for entry in archive.iter_tensors() {
        let (name, t) = entry?;
        tensors.insert(
            name,
            Delta {
                shape: t.meta.shape,
                values: t.values,
            },
        );
    }
    let mut tv = TaskVector {
        tensors,
        source_base_id: get(SOURCE_BASE_ID).unwrap_or_default(),
        source_ft_id: get(SOURCE_FT_ID).unwrap_or_default(),
        sparsity: None,
    };
    if let Some(retention_p) = num(RETENTION_P)? {
        let retained_count = tv.count_nonzero();
        tv.sparsity = Some(SparsityInfo {
            retention_p,
            threshold: num(THRESHOLD)?.unwrap_or(0.0),
            retained_count,
            original_norm: num(ORIGINAL_NORM)?.unwrap_or(0.0),
            sparse_norm: num(SPARSE_NORM)?.unwrap_or(0.0),
            rescale_gamma: num(GAMMA)?.unwrap_or(1.0),
            epsilon: num(EPSILON)?,
        });
    }
    Ok(tv)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor_archive::{write_archive, TensorEntry};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use tempfile::tempdir;

    pub(crate) fn tv_from(tensors: &[(&str, Vec<f64>)]) -> TaskVector {
        TaskVector {
            tensors: tensors
                .iter()
                .map(|(n, v)| {
                    (
                        n.to_string(),
                        Delta {
                            shape: vec![v.len()],
                            values: v.clone(),
                        },
                    )
                })
                .collect(),
            source_base_id: "base".into(),
            source_ft_id: "ft".into(),
            sparsity: None,
        }
    }

    #[test]
    fn extraction_subtracts() {
        let dir = tempdir().unwrap();
        let base = write_archive(
            dir.path().join("b"),
            &[TensorEntry::new("w", Dtype::F32, vec![2], vec![1.0, 1.0])],
            None,
        )
        .unwrap();
        let ft = write_archive(
            dir.path().join("f"),
            &[TensorEntry::new("w", Dtype::F32, vec![2], vec![2.0, 3.0])],
            None,
        )
        .unwrap();
        let tv = extract_task_vector(&base, &ft, DtypePolicy::Require).unwrap();
        assert_eq!(tv.tensors["w"].values, vec![1.0, 2.0]);
        let same = extract_task_vector(&base, &base, DtypePolicy::Require).unwrap();
        assert_eq!(global_l2_norm(&same), 0.0);
    }

    #[test]
    fn extraction_rejects_mismatches() {
        let dir = tempdir().unwrap();
        let base = write_archive(
            dir.path().join("b"),
            &[TensorEntry::new("w", Dtype::F32, vec![2], vec![1.0, 1.0])],
            None,
        )
        .unwrap();
        let reshaped = write_archive(
            dir.path().join("r"),
            &[TensorEntry::new("w", Dtype::F32, vec![1, 2], vec![1.0, 1.0])],
            None,
        )
        .unwrap();
        let renamed = write_archive(
            dir.path().join("n"),
            &[TensorEntry::new("v", Dtype::F32, vec![2], vec![1.0, 1.0])],
            None,
        )
        .unwrap();
        let retyped = write_archive(
            dir.path().join("t"),
            &[TensorEntry::new("w", Dtype::BF16, vec![2], vec![1.0, 1.0])],
            None,
        )
        .unwrap();
        assert!(matches!(
            extract_task_vector(&base, &reshaped, DtypePolicy::Require),
            Err(TaskVectorError::ShapeMismatch { .. })
        ));
        assert!(matches!(
            extract_task_vector(&base, &renamed, DtypePolicy::Require),
            Err(TaskVectorError::NameSetMismatch(_))
        ));
        assert!(matches!(
            extract_task_vector(&base, &retyped, DtypePolicy::Require),
            Err(TaskVectorError::DtypeMismatch { .. })
        ));
        assert!(extract_task_vector(&base, &retyped, DtypePolicy::Allow).is_ok());
    }

    #[test]
    fn norms() {
        assert_eq!(global_l2_norm(&tv_from(&[("a", vec![3.0, 4.0])])), 5.0);
        assert_eq!(global_l2_norm(&tv_from(&[("a", vec![0.0; 5])])), 0.0);
        let two = tv_from(&[("a", vec![1.0, 2.0]), ("b", vec![2.0])]);
        let flat: f64 = two.flatten().iter().map(|v| v * v).sum();
        assert_eq!(global_l2_norm(&two), flat.sqrt());
        assert_eq!(global_l2_norm(&two), 3.0);
    }

    #[test]
    fn threshold_examples() {
        let tv = tv_from(&[("a", vec![3.0, -1.0, 0.5, 2.0])]);
        assert_eq!(quantile_threshold(&tv, 0.5, QuantileMode::Exact).unwrap(), 2.0);
        assert_eq!(quantile_threshold(&tv, 1.0, QuantileMode::Exact).unwrap(), 0.5);
        let with_zero = tv_from(&[("a", vec![3.0, 0.0, 0.5])]);
        assert_eq!(quantile_threshold(&with_zero, 1.0, QuantileMode::Exact).unwrap(), 0.0);
        assert!(matches!(
            quantile_threshold(&tv_from(&[]), 0.5, QuantileMode::Exact),
            Err(TaskVectorError::EmptyVector)
        ));
        assert!(matches!(
            quantile_threshold(&tv, 0.0, QuantileMode::Exact),
            Err(TaskVectorError::InvalidRetention(_))
        ));
    }

    #[test]
    fn sparsify_examples() {
        let tv = tv_from(&[("a", vec![3.0, -1.0, 0.5, 2.0])]);
        let s = sparsify(&tv, 0.5, QuantileMode::Exact).unwrap();
        assert_eq!(s.tensors["a"].values, vec![3.0, 0.0, 0.0, 2.0]);
        let info = s.sparsity.unwrap();
        assert_eq!(info.retained_count, 2);
        assert_eq!(info.threshold, 2.0);

        let full = sparsify(&tv, 1.0, QuantileMode::Exact).unwrap();
        assert_eq!(full.tensors, tv.tensors);

        let ties = tv_from(&[("a", vec![1.0, 1.0, 1.0, 1.0])]);
        let s = sparsify(&ties, 0.5, QuantileMode::Exact).unwrap();
        assert_eq!(s.tensors["a"].values, vec![1.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn ties_break_across_tensors_by_name() {
        let tv = tv_from(&[("b", vec![1.0, 1.0]), ("a", vec![1.0, 1.0])]);
        let s = sparsify(&tv, 0.75, QuantileMode::Exact).unwrap();
        assert_eq!(s.tensors["a"].values, vec![1.0, 1.0]);
        assert_eq!(s.tensors["b"].values, vec![1.0, 0.0]);
    }

    #[test]
    fn zeros_never_count_as_retained() {
        let tv = tv_from(&[("a", vec![0.0, 0.0, 2.0, 0.0])]);
        let s = sparsify(&tv, 1.0, QuantileMode::Exact).unwrap();
        assert_eq!(s.sparsity.unwrap().retained_count, 1);
    }

    #[test]
    fn per_tensor_scope_selects_within_each_tensor() {
        let tv = tv_from(&[("a", vec![10.0, 9.0, 8.0, 7.0]), ("b", vec![0.1, 0.2, 0.3, 0.4])]);
        let global = sparsify(&tv, 0.5, QuantileMode::Exact).unwrap();
        assert_eq!(global.tensors["b"].values, vec![0.0; 4]);
        let local = sparsify_scoped(&tv, 0.5, QuantileMode::Exact, QuantileScope::PerTensor).unwrap();
        assert_eq!(local.tensors["a"].values, vec![10.0, 9.0, 0.0, 0.0]);
        assert_eq!(local.tensors["b"].values, vec![0.0, 0.0, 0.3, 0.4]);
        assert_eq!(local.sparsity.unwrap().retained_count, 4);
    }

    #[test]
    fn rescale_example() {
        // Frozen from a 50-digit mpmath evaluation:
        // gamma = sqrt(14.25) / (sqrt(13) + 1e-8)
        let tv = tv_from(&[("a", vec![3.0, -1.0, 0.5, 2.0])]);
        let s = sparsify(&tv, 0.5, QuantileMode::Exact).unwrap();
        let r = rescale(&s, 14.25f64.sqrt(), 1e-8).unwrap();
        assert!(r.warning.is_none());
        assert_abs_diff_eq!(r.gamma, 1.046_973_657_774_386_7, epsilon = 1e-12);
        let v = &r.vector.tensors["a"].values;
        assert_abs_diff_eq!(v[0], 3.140_920_973_323_160_2, epsilon = 1e-11);
        assert_abs_diff_eq!(v[3], 2.093_947_315_548_773_4, epsilon = 1e-11);
        assert_eq!((v[1], v[2]), (0.0, 0.0));
        assert_eq!(r.vector.sparsity.as_ref().unwrap().rescale_gamma, r.gamma);
    }

    #[test]
    fn rescale_identity_and_degenerate() {
        let tv = tv_from(&[("a", vec![3.0, 4.0])]);
        let s = sparsify(&tv, 1.0, QuantileMode::Exact).unwrap();
        let r = rescale(&s, 5.0, 1e-15).unwrap();
        assert_abs_diff_eq!(r.gamma, 1.0, epsilon = 1e-6);

        let zero = tv_from(&[("a", vec![0.0, 0.0])]);
        let s = sparsify(&zero, 1.0, QuantileMode::Exact).unwrap();
        let r = rescale(&s, 1.0, 1e-8).unwrap();
        assert_eq!(r.warning, Some(RescaleWarning::DegenerateRescale));
        assert_abs_diff_eq!(r.gamma, 1e8, epsilon = 1e-6);

        assert!(matches!(rescale(&tv, 1.0, 1e-8), Err(TaskVectorError::NotSparsified)));
    }

    fn base_archive(dir: &Path) -> TensorArchive {
        write_archive(
            dir.join("base"),
            &[TensorEntry::new("w", Dtype::F32, vec![2], vec![1.0, 1.0])],
            None,
        )
        .unwrap()
    }

    #[test]
    fn merge_example() {
        let dir = tempdir().unwrap();
        let base = base_archive(dir.path());
        let t1 = tv_from(&[("w", vec![1.0, 0.0])]);
        let t2 = tv_from(&[("w", vec![0.0, 2.0])]);
        let merged = merge_in_memory(&base, &[(&t1, 0.5), (&t2, 0.25)]).unwrap();
        assert_eq!(merged["w"], vec![1.5, 1.5]);

        let out = merge(&base, &[(&t1, 0.5), (&t2, 0.25)], &dir.path().join("m"), None, None).unwrap();
        assert_eq!(out.read_tensor("w").unwrap().values, vec![1.5, 1.5]);
        assert_eq!(out.meta("w").unwrap().dtype, Dtype::F32);
    }

    #[test]
    fn zero_coefficients_pass_base_through() {
        let base = [-0.0, 1.5, f64::MIN_POSITIVE];
        let tau = [1.0, -2.0, 3.0];
        let out = merge_values(&base, &[(&tau, 0.0), (&tau, 0.0)]);
        assert!(out.iter().zip(&base).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn merge_rejects_shape_mismatch() {
        let dir = tempdir().unwrap();
        let base = base_archive(dir.path());
        let mut tv = tv_from(&[("w", vec![1.0, 0.0, 3.0])]);
        assert!(matches!(
            merge_in_memory(&base, &[(&tv, 1.0)]),
            Err(TaskVectorError::ShapeMismatch { .. })
        ));
        tv.tensors.clear();
        assert!(matches!(
            merge_in_memory(&base, &[(&tv, 1.0)]),
            Err(TaskVectorError::NameSetMismatch(_))
        ));
    }

    #[test]
    fn task_vector_file_round_trip() {
        let dir = tempdir().unwrap();
        let tv = tv_from(&[("a", vec![3.0, -1.0, 0.5, 2.0]), ("b", vec![0.25])]);
        let r = sparsify_and_rescale(&tv, 0.5, QuantileMode::Exact, QuantileScope::Global, 1e-8).unwrap();
        let path = dir.path().join("tv.safetensors");
        let archive = save_task_vector(&r.vector, &path, Dtype::F64).unwrap();
        let md = archive.metadata().unwrap();
        for key in [
            "source_base_id",
            "source_ft_id",
            "retention_p",
            "threshold",
            "gamma",
            "epsilon",
            "original_norm",
        ] {
            assert!(md.contains_key(key), "missing {key}");
        }
        let back = load_task_vector(&path).unwrap();
        assert_eq!(back, r.vector);
    }

    proptest! {
        #[test]
        fn linearity(a in -2.0f64..2.0, b in -2.0f64..2.0, vals in prop::collection::vec(-10.0f64..10.0, 1..50)) {
            let base: Vec<f64> = vals.iter().map(|v| v * 0.5).collect();
            let once = merge_values(&base, &[(&vals, a + b)]);
            let twice = merge_values(&base, &[(&vals, a), (&vals, b)]);
            for (x, y) in once.iter().zip(&twice) {
                prop_assert!((x - y).abs() <= 1e-12 * (1.0 + x.abs()));
            }
        }

        #[test]
        fn support_is_monotone_in_retention(
            vals in prop::collection::vec(-5i32..5, 1..200),
            p1 in 0.01f64..1.0,
            p2 in 0.01f64..1.0,
        ) {
            let (lo, hi) = if p1 < p2 { (p1, p2) } else { (p2, p1) };
            let tv = tv_from(&[("x", vals.iter().map(|&v| v as f64).collect())]);
            let small = sparsify(&tv, lo, QuantileMode::Exact).unwrap();
            let large = sparsify(&tv, hi, QuantileMode::Exact).unwrap();
            for (s, l) in small.tensors["x"].values.iter().zip(&large.tensors["x"].values) {
                prop_assert!(*s == 0.0 || *l != 0.0);
            }
        }
    }
}

//! Task-vector diagnostics: per-layer norms, sign interference between two
//! vectors, and how retained entries spread across module types.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::task_vector::{self, sum_of_squares, QuantileMode, TaskVector, TaskVectorError};

#[derive(Debug, thiserror::Error)]
pub enum DiagnosticsError {
    #[error("invalid layer pattern {pattern:?}: {reason}")]
    InvalidPattern { pattern: String, reason: String },
    #[error("unknown module class {0:?}")]
    UnknownClass(String),
    #[error("retention list is empty")]
    EmptySweep,
    #[error(transparent)]
    TaskVector(#[from] TaskVectorError),
    #[error("failed to write report: {0}")]
    Report(String),
}

type Result<T> = std::result::Result<T, DiagnosticsError>;

pub const DEFAULT_LAYER_PATTERN: &str = r"layers\.(\d+)";

/// Regex whose first capture group is the layer index.
#[derive(Debug, Clone)]
pub struct LayerPattern(Regex);

impl LayerPattern {
    pub fn new(pattern: &str) -> Result<Self> {
        let re = Regex::new(pattern).map_err(|e| DiagnosticsError::InvalidPattern {
            pattern: pattern.to_string(),
            reason: e.to_string(),
        })?;
        if re.captures_len() < 2 {
            return Err(DiagnosticsError::InvalidPattern {
                pattern: pattern.to_string(),
                reason: "needs a capture group for the layer index".into(),
            });
        }
        Ok(Self(re))
    }

    pub fn layer_of(&self, name: &str) -> Option<u64> {
        self.0.captures(name)?.get(1)?.as_str().parse().ok()
    }
}

impl Default for LayerPattern {
    fn default() -> Self {
        Self::new(DEFAULT_LAYER_PATTERN).expect("default pattern compiles")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerNormProfile {
    pub per_layer: BTreeMap<u64, f64>,
    pub non_layer: f64,
}

impl LayerNormProfile {
    pub fn combined_norm(&self) -> f64 {
        let layers: f64 = self.per_layer.values().map(|n| n * n).sum();
        (layers + self.non_layer * self.non_layer).sqrt()
    }
}

pub fn layerwise_norms(tv: &TaskVector, pattern: &LayerPattern) -> LayerNormProfile {
    let mut per_layer: BTreeMap<u64, f64> = BTreeMap::new();
    let mut non_layer = 0.0;
    for (name, delta) in &tv.tensors {
        let ss = sum_of_squares(&delta.values);
        match pattern.layer_of(name) {
            Some(layer) => *per_layer.entry(layer).or_default() += ss,
            None => non_layer += ss,
        }
    }
    per_layer.values_mut().for_each(|v| *v = v.sqrt());
    LayerNormProfile {
        per_layer,
        non_layer: non_layer.sqrt(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterferenceReport {
    pub retention_a: f64,
    pub retention_b: f64,
    pub conflict_ratio: f64,
    pub conflicting_count: usize,
    /// Non-zero entries of the sparsified second vector.
    pub denominator_count: usize,
}

/// Fraction of the sparsified `tv_b`'s support where the sparsified `tv_a`
/// has the opposite sign. Entries zeroed in `tv_a` never conflict. The
/// measure is deliberately asymmetric.
pub fn sign_interference(
    tv_a: &TaskVector,
    tv_b: &TaskVector,
    retention_a: f64,
    retention_b: f64,
) -> Result<InterferenceReport> {
    tv_a.check_compatible(tv_b)?;
    let b_sparse = task_vector::sparsify(tv_b, retention_b, QuantileMode::Exact)?;
    interference_against(tv_a, &b_sparse, retention_a, retention_b)
}

fn interference_against(
    tv_a: &TaskVector,
    b_sparse: &TaskVector,
    retention_a: f64,
    retention_b: f64,
) -> Result<InterferenceReport> {
    let a_sparse = task_vector::sparsify(tv_a, retention_a, QuantileMode::Exact)?;
    let mut conflicting = 0usize;
    let mut denominator = 0usize;
    for (name, b) in &b_sparse.tensors {
        let a = &a_sparse.tensors[name];
        for (x, y) in a.values.iter().zip(&b.values) {
            if *y != 0.0 {
                denominator += 1;
                if (*x > 0.0 && *y < 0.0) || (*x < 0.0 && *y > 0.0) {
                    conflicting += 1;
                }
            }
        }
    }
    let conflict_ratio = if denominator == 0 {
        0.0
    } else {
        conflicting as f64 / denominator as f64
    };
    Ok(InterferenceReport {
        retention_a,
        retention_b,
        conflict_ratio,
        conflicting_count: conflicting,
        denominator_count: denominator,
    })
}

/// One report per entry of `retentions_a`, with `tv_b` held at `retention_b`.
pub fn interference_sweep(
    tv_a: &TaskVector,
    tv_b: &TaskVector,
    retentions_a: &[f64],
    retention_b: f64,
) -> Result<Vec<InterferenceReport>> {
    if retentions_a.is_empty() {
        return Err(DiagnosticsError::EmptySweep);
    }
    tv_a.check_compatible(tv_b)?;
    let b_sparse = task_vector::sparsify(tv_b, retention_b, QuantileMode::Exact)?;
    retentions_a
        .iter()
        .map(|&r| interference_against(tv_a, &b_sparse, r, retention_b))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ModuleClass {
    Attention,
    Embedding,
    LMHead,
    LayerNorm,
    MLP,
    Other,
}

impl ModuleClass {
    pub const ALL: [ModuleClass; 6] = [
        ModuleClass::Attention,
        ModuleClass::Embedding,
        ModuleClass::LMHead,
        ModuleClass::LayerNorm,
        ModuleClass::MLP,
        ModuleClass::Other,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ModuleClass::Attention => "Attention",
            ModuleClass::Embedding => "Embedding",
            ModuleClass::LMHead => "LMHead",
            ModuleClass::LayerNorm => "LayerNorm",
            ModuleClass::MLP => "MLP",
            ModuleClass::Other => "Other",
        }
    }
}

impl fmt::Display for ModuleClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModuleClass {
    type Err = DiagnosticsError;

    fn from_str(s: &str) -> Result<Self> {
        ModuleClass::ALL
            .into_iter()
            .find(|c| c.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| DiagnosticsError::UnknownClass(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MatchKind {
    #[default]
    Contains,
    Exact,
}

/// `pattern -> class`; the first matching rule wins.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModuleRule {
    pub pattern: String,
    pub class: ModuleClass,
    #[serde(default, rename = "match")]
    pub match_kind: MatchKind,
}

impl ModuleRule {
    pub fn contains(pattern: &str, class: ModuleClass) -> Self {
        Self {
            pattern: pattern.to_string(),
            class,
            match_kind: MatchKind::Contains,
        }
    }

    pub fn exact(pattern: &str, class: ModuleClass) -> Self {
        Self {
            pattern: pattern.to_string(),
            class,
            match_kind: MatchKind::Exact,
        }
    }

    fn matches(&self, name: &str) -> bool {
        match self.match_kind {
            MatchKind::Contains => name.contains(&self.pattern),
            MatchKind::Exact => name == self.pattern,
        }
    }
}

/// Default table covering Hugging Face (`self_attn.q_proj`, `mlp.gate_proj`),
/// Meta-native (`attention.wq`, `feed_forward.w1`) and GGUF (`attn_q`,
/// `ffn_up`, `token_embd`) names. Norm rules come first so
/// `post_attention_layernorm` and `attention_norm` are LayerNorm.
pub fn default_module_rules() -> Vec<ModuleRule> {
    use ModuleClass::*;
    vec![
        ModuleRule::contains("norm", LayerNorm),
        ModuleRule::contains("ln", LayerNorm),
        ModuleRule::contains("embed", Embedding),
        ModuleRule::contains("embd", Embedding),
        ModuleRule::contains("wte", Embedding),
        ModuleRule::contains("lm_head", LMHead),
        ModuleRule::exact("output.weight", LMHead),
        ModuleRule::contains("attn", Attention),
        ModuleRule::contains("attention", Attention),
        ModuleRule::contains("q_proj", Attention),
        ModuleRule::contains("k_proj", Attention),
        ModuleRule::contains("v_proj", Attention),
        ModuleRule::contains("o_proj", Attention),
        ModuleRule::contains("mlp", MLP),
        ModuleRule::contains("feed_forward", MLP),
        ModuleRule::contains("ffn", MLP),
        ModuleRule::contains("gate_proj", MLP),
        ModuleRule::contains("up_proj", MLP),
        ModuleRule::contains("down_proj", MLP),
        ModuleRule::contains("fc", MLP),
    ]
}

pub fn classify_module(tensor_name: &str, rules: &[ModuleRule]) -> ModuleClass {
    rules
        .iter()
        .find(|r| r.matches(tensor_name))
        .map(|r| r.class)
        .unwrap_or(ModuleClass::Other)
}

/// Fraction of each class's parameters that survive top-`retention`
/// selection over the whole vector. Classes without parameters are omitted.
pub fn modulewise_activation(
    tv: &TaskVector,
    retention: f64,
    rules: &[ModuleRule],
) -> Result<BTreeMap<ModuleClass, f64>> {
    let sparse = task_vector::sparsify(tv, retention, QuantileMode::Exact)?;
    let mut totals: BTreeMap<ModuleClass, (usize, usize)> = BTreeMap::new();
    for (name, delta) in &sparse.tensors {
        let entry = totals.entry(classify_module(name, rules)).or_default();
        entry.0 += delta.values.iter().filter(|v| **v != 0.0).count();
        entry.1 += delta.values.len();
    }
    Ok(totals
        .into_iter()
        .filter(|(_, (_, total))| *total > 0)
        .map(|(class, (kept, total))| (class, kept as f64 / total as f64))
        .collect())
}

pub fn parse_rules_json(text: &str) -> std::result::Result<Vec<ModuleRule>, serde_json::Error> {
    serde_json::from_str(text)
}

fn csv_err(e: impl fmt::Display) -> DiagnosticsError {
    DiagnosticsError::Report(e.to_string())
}

/// `layer,l2_norm` rows; the non-layer group is written as `non_layer`.
pub fn write_layer_norms_csv(profile: &LayerNormProfile, out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["layer", "l2_norm"]).map_err(csv_err)?;
    for (layer, norm) in &profile.per_layer {
        w.write_record([layer.to_string(), norm.to_string()]).map_err(csv_err)?;
    }
    w.write_record(["non_layer".to_string(), profile.non_layer.to_string()])
        .map_err(csv_err)?;
    w.flush().map_err(csv_err)
}

pub fn write_interference_csv(reports: &[InterferenceReport], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "retention_fraction_a",
        "retention_fraction_b",
        "conflict_ratio",
        "conflicting_count",
        "denominator_count",
    ])
    .map_err(csv_err)?;
    for r in reports {
        w.write_record([
            r.retention_a.to_string(),
            r.retention_b.to_string(),
            r.conflict_ratio.to_string(),
            r.conflicting_count.to_string(),
            r.denominator_count.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(csv_err)
}

pub fn write_module_activation_csv(retention: f64, ratios: &BTreeMap<ModuleClass, f64>, out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["module_class", "retention_fraction", "activated_ratio"])
        .map_err(csv_err)?;
    for (class, ratio) in ratios {
        w.write_record([class.to_string(), retention.to_string(), ratio.to_string()])
            .map_err(csv_err)?;
    }
    w.flush().map_err(csv_err)
}

//! Deterministic stand-in backend driven by an analytic landscape over the
//! two merge coefficients.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{EvalError, EvaluationBackend, GenerationRequest};
use crate::tensor_archive::TensorArchive;

/// Archive metadata keys the mock reads to locate a merged checkpoint.
pub const LAMBDA_SFT_KEY: &str = "lambda_sft";
pub const LAMBDA_RLVR_KEY: &str = "lambda_rlvr";
/// Prefix for inline references, e.g. `coeffs:0.8,1.5`.
pub const COEFFS_PREFIX: &str = "coeffs:";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Peak {
    pub center: [f64; 2],
    pub width: f64,
    pub height: f64,
    #[serde(default)]
    pub perplexity_offset: f64,
}

impl Peak {
    fn weight(&self, at: [f64; 2]) -> f64 {
        (-dist2(self.center, at) / (2.0 * self.width * self.width)).exp()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Landscape {
    Constant {
        consistency: f64,
        perplexity: f64,
    },
    /// Consistency is the tallest Gaussian bump (or `floor`); perplexity
    /// grows with squared distance to the nearest bump plus each bump's
    /// weighted offset.
    Peaks {
        peaks: Vec<Peak>,
        #[serde(default)]
        floor: f64,
        base_perplexity: f64,
        perplexity_slope: f64,
    },
}

impl Landscape {
    pub fn single_peak(center: [f64; 2], width: f64) -> Self {
        Self::Peaks {
            peaks: vec![Peak {
                center,
                width,
                height: 1.0,
                perplexity_offset: 0.0,
            }],
            floor: 0.0,
            base_perplexity: 2.0,
            perplexity_slope: 1.0,
        }
    }

    pub fn consistency(&self, at: [f64; 2]) -> f64 {
        let c = match self {
            Self::Constant { consistency, .. } => *consistency,
            Self::Peaks { peaks, floor, .. } => peaks.iter().map(|p| p.height * p.weight(at)).fold(*floor, f64::max),
        };
        c.clamp(0.0, 1.0)
    }

    pub fn perplexity(&self, at: [f64; 2]) -> f64 {
        match self {
            Self::Constant { perplexity, .. } => *perplexity,
            Self::Peaks {
                peaks,
                base_perplexity,
                perplexity_slope,
                ..
            } => {
                let nearest = peaks.iter().map(|p| dist2(p.center, at)).fold(f64::INFINITY, f64::min);
                let nearest = if nearest.is_finite() { nearest } else { 0.0 };
                let offsets: f64 = peaks.iter().map(|p| p.perplexity_offset * p.weight(at)).sum();
                (base_perplexity + perplexity_slope * nearest + offsets).max(1.0)
            }
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        match self {
            Self::Constant {
                consistency,
                perplexity,
            } => {
                if !(0.0..=1.0).contains(consistency) {
                    return Err("constant consistency must lie in [0, 1]".into());
                }
                if !(*perplexity >= 1.0) {
                    return Err("constant perplexity must be at least 1".into());
                }
            }
            Self::Peaks {
                peaks,
                base_perplexity,
                perplexity_slope,
                ..
            } => {
                if peaks.iter().any(|p| !(p.width > 0.0)) {
                    return Err("peak widths must be positive".into());
                }
                if !(*base_perplexity >= 1.0) || !(*perplexity_slope >= 0.0) {
                    return Err("perplexity base must be >= 1 and slope >= 0".into());
                }
            }
        }
        Ok(())
    }
}

fn dist2(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockBackend {
    pub landscape: Landscape,
    pub seed: u64,
    /// Per-query consistency drops uniformly in `[0, query_spread]`, keyed by
    /// the prompt, so different queries see different difficulty.
    #[serde(default)]
    pub query_spread: f64,
    /// Names resolved to fixed coefficients, e.g. the two source models.
    #[serde(default)]
    pub aliases: BTreeMap<String, [f64; 2]>,
}

impl MockBackend {
    pub fn new(landscape: Landscape, seed: u64) -> Self {
        Self {
            landscape,
            seed,
            query_spread: 0.0,
            aliases: BTreeMap::new(),
        }
    }

    pub fn with_query_spread(mut self, spread: f64) -> Self {
        self.query_spread = spread;
        self
    }

    pub fn with_alias(mut self, name: &str, coeffs: [f64; 2]) -> Self {
        self.aliases.insert(name.to_string(), coeffs);
        self
    }

    /// Coefficients behind a model reference: an inline `coeffs:a,b`, an
    /// alias, or an archive carrying lambda metadata.
    pub fn resolve(&self, model_ref: &str) -> Result<[f64; 2], EvalError> {
        let unknown = || EvalError::UnknownModelRef(model_ref.to_string());
        if let Some(rest) = model_ref.strip_prefix(COEFFS_PREFIX) {
            let (a, b) = rest.split_once(',').ok_or_else(unknown)?;
            let a: f64 = a.trim().parse().map_err(|_| unknown())?;
            let b: f64 = b.trim().parse().map_err(|_| unknown())?;
            return Ok([a, b]);
        }
        if let Some(c) = self.aliases.get(model_ref) {
            return Ok(*c);
        }
        let path = Path::new(model_ref);
        if path.is_file() {
            let archive = TensorArchive::open(path).map_err(|_| unknown())?;
            let get = |key: &str| -> Option<f64> { archive.metadata()?.get(key)?.parse().ok() };
            if let (Some(a), Some(b)) = (get(LAMBDA_SFT_KEY), get(LAMBDA_RLVR_KEY)) {
                return Ok([a, b]);
            }
        }
        Err(unknown())
    }

    /// Consistency the mock targets for one query.
    pub fn query_consistency(&self, coeffs: [f64; 2], prompt: &str) -> f64 {
        let drop = self.query_spread * unit(fnv1a(&[prompt.as_bytes(), b"difficulty"]));
        (self.landscape.consistency(coeffs) - drop).clamp(0.0, 1.0)
    }
}

impl EvaluationBackend for MockBackend {
    fn generate(&self, request: &GenerationRequest) -> Result<Vec<String>, EvalError> {
        request.validate()?;
        let coeffs = self.resolve(&request.model_ref)?;
        let n = request.num_samples;
        let c = self.query_consistency(coeffs, &request.prompt);
        let matching = ((c * n as f64).round() as usize).min(n);

        let mut texts = Vec::with_capacity(n);
        if matching == 0 {
            texts.extend((0..n).map(|i| format!("attempt {} trails off without a conclusion", roman(i + 1))));
        } else {
            let answer = fnv1a(&[request.prompt.as_bytes()]) % 1000;
            texts.extend((0..matching).map(|_| format!("working it through, the result is \\boxed{{{answer}}}.")));
            texts.extend((matching..n).map(|i| format!("a different route gives \\boxed{{alt-{i}}}.")));
        }
        let key = fnv1a(&[
            &self.seed.to_le_bytes(),
            &request.seed.unwrap_or(0).to_le_bytes(),
            request.model_ref.as_bytes(),
            request.prompt.as_bytes(),
        ]);
        texts.shuffle(&mut ChaCha8Rng::seed_from_u64(key));
        Ok(texts)
    }

    fn score(&self, model_ref: &str, text: &str) -> Result<Vec<f64>, EvalError> {
        let coeffs = self.resolve(model_ref)?;
        let tokens = text.split_whitespace().count();
        let lp = -self.landscape.perplexity(coeffs).ln();
        // Alternate +-0.1 around the mean; an odd final token sits on it.
        Ok((0..tokens)
            .map(|i| {
                if tokens % 2 == 1 && i == tokens - 1 {
                    lp
                } else if i % 2 == 0 {
                    lp + 0.1
                } else {
                    lp - 0.1
                }
            })
            .collect())
    }
}

/// Digit-free label so answer-less texts have no numeric fallback.
fn roman(mut n: usize) -> String {
    const TABLE: [(usize, &str); 7] = [
        (100, "c"),
        (50, "l"),
        (10, "x"),
        (9, "ix"),
        (5, "v"),
        (4, "iv"),
        (1, "i"),
    ];
    let mut out = String::new();
    for (v, s) in TABLE {
        while n >= v {
            out.push_str(s);
            n -= v;
        }
    }
    out
}

fn fnv1a(parts: &[&[u8]]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for part in parts {
        for &b in *part {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        h ^= 0xff;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn unit(h: u64) -> f64 {
    (h >> 11) as f64 / (1u64 << 53) as f64
}

//! Model evaluation: the backend contract used by data selection and the
//! coefficient search, plus the label-free scores computed from it.

mod answer;
pub mod http;
pub mod mock;
pub mod prompts;
pub mod server;

use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

pub use answer::{extract_answer, normalize_answer, ExtractionPolicy};

pub const DEFAULT_SAMPLES: usize = 5;
pub const DEFAULT_TEMPERATURE: f64 = 0.6;
pub const DEFAULT_MAX_TOKENS: u32 = 8192;
/// Generation budget for weaker backbones.
pub const WEAK_BACKBONE_MAX_TOKENS: u32 = 2048;
pub const DEFAULT_MAX_IN_FLIGHT: usize = 8;

#[derive(Debug, Clone, thiserror::Error)]
pub enum EvalError {
    #[error("text produced no scored tokens")]
    EmptyText,
    #[error("expected {expected} answers, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("request timed out")]
    Timeout,
    #[error("backend returned HTTP {0}")]
    HttpStatus(u16),
    #[error("malformed backend response: {0}")]
    MalformedResponse(String),
    #[error("unknown model reference {0:?}")]
    UnknownModelRef(String),
    #[error("backend failed after {attempts} attempt(s): {last}")]
    BackendFailure { attempts: u32, last: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerationParams {
    pub temperature: f64,
    pub max_tokens: u32,
}

impl Default for GenerationParams {
    fn default() -> Self {
        Self {
            temperature: DEFAULT_TEMPERATURE,
            max_tokens: DEFAULT_MAX_TOKENS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRequest {
    pub model_ref: String,
    pub prompt: String,
    pub num_samples: usize,
    pub temperature: f64,
    pub max_tokens: u32,
    pub seed: Option<u64>,
}

impl GenerationRequest {
    pub fn new(model_ref: &str, prompt: &str, num_samples: usize, params: GenerationParams) -> Self {
        Self {
            model_ref: model_ref.to_string(),
            prompt: prompt.to_string(),
            num_samples,
            temperature: params.temperature,
            max_tokens: params.max_tokens,
            seed: None,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }

    pub fn validate(&self) -> Result<(), EvalError> {
        if self.num_samples == 0 {
            return Err(EvalError::InvalidRequest("num_samples must be at least 1".into()));
        }
        if !(self.temperature >= 0.0) {
            return Err(EvalError::InvalidRequest("temperature must be non-negative".into()));
        }
        if self.max_tokens == 0 {
            return Err(EvalError::InvalidRequest("max_tokens must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationSample {
    pub text: String,
    pub extracted_answer: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreResult {
    pub token_logprobs: Vec<f64>,
    pub perplexity: f64,
}

impl ScoreResult {
    pub fn from_logprobs(token_logprobs: Vec<f64>) -> Result<Self, EvalError> {
        if token_logprobs.is_empty() {
            return Err(EvalError::EmptyText);
        }
        if token_logprobs.iter().any(|l| !l.is_finite()) {
            return Err(EvalError::MalformedResponse("non-finite token logprob".into()));
        }
        let mean = token_logprobs.iter().sum::<f64>() / token_logprobs.len() as f64;
        Ok(Self {
            perplexity: (-mean).exp(),
            token_logprobs,
        })
    }
}

/// An inference service that can sample completions and score text.
/// Implementations must tolerate concurrent calls.
pub trait EvaluationBackend: Send + Sync {
    /// `request.num_samples` raw completions.
    fn generate(&self, request: &GenerationRequest) -> Result<Vec<String>, EvalError>;

    /// Natural-log probability of each token of `text` under `model_ref`.
    fn score(&self, model_ref: &str, text: &str) -> Result<Vec<f64>, EvalError>;
}

impl<T: EvaluationBackend + ?Sized> EvaluationBackend for &T {
    fn generate(&self, request: &GenerationRequest) -> Result<Vec<String>, EvalError> {
        (**self).generate(request)
    }

    fn score(&self, model_ref: &str, text: &str) -> Result<Vec<f64>, EvalError> {
        (**self).score(model_ref, text)
    }
}

impl<T: EvaluationBackend + ?Sized> EvaluationBackend for Box<T> {
    fn generate(&self, request: &GenerationRequest) -> Result<Vec<String>, EvalError> {
        (**self).generate(request)
    }

    fn score(&self, model_ref: &str, text: &str) -> Result<Vec<f64>, EvalError> {
        (**self).score(model_ref, text)
    }
}

/// Samples completions and extracts an answer from each.
pub fn sample_answers(
    backend: &dyn EvaluationBackend,
    request: &GenerationRequest,
    policy: ExtractionPolicy,
) -> Result<Vec<GenerationSample>, EvalError> {
    request.validate()?;
    let texts = backend.generate(request)?;
    if texts.len() != request.num_samples {
        return Err(EvalError::MalformedResponse(format!(
            "asked for {} samples, got {}",
            request.num_samples,
            texts.len()
        )));
    }
    Ok(texts
        .into_iter()
        .map(|text| GenerationSample {
            extracted_answer: extract_answer(&text, policy),
            text,
        })
        .collect())
}

/// Majority-vote agreement: the count of the most common present answer
/// divided by `m`. All-absent gives 0.
pub fn consistency(answers: &[Option<String>], m: usize) -> Result<f64, EvalError> {
    if answers.len() != m || m == 0 {
        return Err(EvalError::LengthMismatch {
            expected: m,
            actual: answers.len(),
        });
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for answer in answers.iter().flatten() {
        *counts.entry(answer.as_str()).or_default() += 1;
    }
    let top = counts.values().copied().max().unwrap_or(0);
    Ok(top as f64 / m as f64)
}

pub fn score_text(backend: &dyn EvaluationBackend, model_ref: &str, text: &str) -> Result<ScoreResult, EvalError> {
    ScoreResult::from_logprobs(backend.score(model_ref, text)?)
}

/// `exp(-mean token logprob)` of `text`.
pub fn perplexity_of(backend: &dyn EvaluationBackend, model_ref: &str, text: &str) -> Result<f64, EvalError> {
    if text.trim().is_empty() {
        return Err(EvalError::EmptyText);
    }
    Ok(score_text(backend, model_ref, text)?.perplexity)
}

/// Applies `f` to every item with at most `limit` calls in flight. Results
/// keep input order.
pub fn bounded_map<T, R, F>(items: &[T], limit: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &T) -> R + Sync,
{
    let workers = limit.max(1).min(items.len());
    if workers <= 1 {
        return items.iter().enumerate().map(|(i, t)| f(i, t)).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<R>>> = items.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let r = f(i, &items[i]);
                *slots[i].lock().unwrap() = Some(r);
            });
        }
    });
    slots
        .into_iter()
        .map(|s| s.into_inner().unwrap().expect("every slot filled"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn answers(xs: &[&str]) -> Vec<Option<String>> {
        xs.iter().map(|s| Some(s.to_string())).collect()
    }

    #[test]
    fn consistency_examples() {
        assert_eq!(consistency(&answers(&["4", "4", "4", "7", "2"]), 5).unwrap(), 0.6);
        assert_eq!(consistency(&answers(&["4"; 5]), 5).unwrap(), 1.0);
        assert_eq!(consistency(&answers(&["1", "2", "3", "4", "5"]), 5).unwrap(), 0.2);
        assert_eq!(consistency(&[None, None, None], 3).unwrap(), 0.0);
        assert!(matches!(
            consistency(&answers(&["1"]), 5),
            Err(EvalError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn perplexity_examples() {
        let p = ScoreResult::from_logprobs(vec![-1.0, -1.0, -1.0]).unwrap().perplexity;
        assert!((p - std::f64::consts::E).abs() < 1e-12);
        assert_eq!(ScoreResult::from_logprobs(vec![0.0, 0.0]).unwrap().perplexity, 1.0);
        let p = ScoreResult::from_logprobs(vec![-(2f64.ln()), -(8f64.ln())])
            .unwrap()
            .perplexity;
        assert!((p - 4.0).abs() < 1e-12);
        assert!(matches!(ScoreResult::from_logprobs(vec![]), Err(EvalError::EmptyText)));
    }

    #[test]
    fn request_validation() {
        let params = GenerationParams::default();
        assert!(GenerationRequest::new("m", "p", 0, params).validate().is_err());
        let mut r = GenerationRequest::new("m", "p", 1, params);
        r.temperature = -0.1;
        assert!(r.validate().is_err());
        assert!(GenerationRequest::new("m", "p", 5, params).validate().is_ok());
    }

    #[test]
    fn bounded_map_preserves_order() {
        let items: Vec<usize> = (0..100).collect();
        let out = bounded_map(&items, 8, |i, x| i * 1000 + x);
        assert_eq!(out, (0..100).map(|i| i * 1001).collect::<Vec<_>>());
    }

    proptest! {
        #[test]
        fn consistency_is_quantized_and_permutation_invariant(
            raw in prop::collection::vec(prop::option::of(0u8..4), 1..12),
            rotate in 0usize..12,
        ) {
            let m = raw.len();
            let xs: Vec<Option<String>> = raw.iter().map(|o| o.map(|v| v.to_string())).collect();
            let c = consistency(&xs, m).unwrap();
            let j = (c * m as f64).round();
            prop_assert_eq!(c, j / m as f64);
            prop_assert!((0.0..=1.0).contains(&c));
            let mut rotated = xs.clone();
            rotated.rotate_left(rotate % m);
            let mut reversed = xs.clone();
            reversed.reverse();
            prop_assert_eq!(consistency(&rotated, m).unwrap(), c);
            prop_assert_eq!(consistency(&reversed, m).unwrap(), c);
        }

        #[test]
        fn perplexity_at_least_one_for_nonpositive_logprobs(lps in prop::collection::vec(-20.0f64..=0.0, 1..30)) {
            let p = ScoreResult::from_logprobs(lps.clone()).unwrap().perplexity;
            prop_assert!(p >= 1.0);
            if lps.iter().all(|l| *l == 0.0) {
                prop_assert_eq!(p, 1.0);
            }
        }
    }
}

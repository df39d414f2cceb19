//! Difficulty scoring of unlabeled queries and stratified selection of the
//! adaptation set.

use std::collections::BTreeSet;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::evaluator::prompts::PromptPreset;
use crate::evaluator::{
    bounded_map, consistency, sample_answers, EvalError, EvaluationBackend, ExtractionPolicy, GenerationParams,
    GenerationRequest, DEFAULT_MAX_IN_FLIGHT, DEFAULT_SAMPLES,
};

pub const DEFAULT_SET_SIZE: usize = 64;
pub const DEFAULT_FAILURE_CAP: f64 = 0.10;
/// Slack when comparing a difficulty against the threshold, so that
/// `1 - (0.2 + 0.2) / 2` counts as equal to `1 - 1/5`.
const THRESHOLD_SLACK: f64 = 1e-12;

#[derive(Debug, thiserror::Error)]
pub enum AdaptationError {
    #[error("{path}: line {line}: {reason}")]
    InvalidQueryLine { path: PathBuf, line: usize, reason: String },
    #[error("duplicate query id {0:?}")]
    DuplicateQueryId(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("{available} queries survive the difficulty filter, {needed} needed")]
    InsufficientQueries { available: usize, needed: usize },
    #[error("{failed} of {total} queries failed (cap {cap}); first error: {first}")]
    BackendFailure {
        failed: usize,
        total: usize,
        cap: f64,
        first: String,
    },
    #[error("i/o on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

pub type Result<T> = std::result::Result<T, AdaptationError>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Query {
    pub id: String,
    pub text: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryPool {
    queries: Vec<Query>,
}

impl QueryPool {
    pub fn new(queries: Vec<Query>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for q in &queries {
            if !seen.insert(q.id.as_str()) {
                return Err(AdaptationError::DuplicateQueryId(q.id.clone()));
            }
        }
        Ok(Self { queries })
    }

    /// One `{"id": ..., "text": ...}` object per line; blank lines skipped.
    pub fn load_jsonl(path: &Path) -> Result<Self> {
        let io = |source| AdaptationError::Io {
            path: path.to_path_buf(),
            source,
        };
        let file = std::fs::File::open(path).map_err(io)?;
        let mut queries = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(io)?;
            if line.trim().is_empty() {
                continue;
            }
            let q: Query = serde_json::from_str(&line).map_err(|e| AdaptationError::InvalidQueryLine {
                path: path.to_path_buf(),
                line: i + 1,
                reason: e.to_string(),
            })?;
            queries.push(q);
        }
        Self::new(queries)
    }

    pub fn queries(&self) -> &[Query] {
        &self.queries
    }

    pub fn len(&self) -> usize {
        self.queries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queries.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Query> {
        self.queries.iter().find(|q| q.id == id)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DifficultyRecord {
    pub query_id: String,
    pub c_sft: f64,
    pub c_rlvr: f64,
    pub difficulty: f64,
}

impl DifficultyRecord {
    pub fn new(query_id: &str, c_sft: f64, c_rlvr: f64) -> Self {
        Self {
            query_id: query_id.to_string(),
            c_sft,
            c_rlvr,
            difficulty: 1.0 - (c_sft + c_rlvr) / 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScoringConfig {
    pub m: usize,
    pub generation: GenerationParams,
    pub prompt: PromptPreset,
    pub extraction: ExtractionPolicy,
    pub failure_cap: f64,
    pub max_in_flight: usize,
    pub seed: Option<u64>,
}

impl Default for ScoringConfig {
    fn default() -> Self {
        Self {
            m: DEFAULT_SAMPLES,
            generation: GenerationParams::default(),
            prompt: PromptPreset::default(),
            extraction: ExtractionPolicy::default(),
            failure_cap: DEFAULT_FAILURE_CAP,
            max_in_flight: DEFAULT_MAX_IN_FLIGHT,
            seed: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryFailure {
    pub query_id: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DifficultyScores {
    pub records: Vec<DifficultyRecord>,
    pub failures: Vec<QueryFailure>,
}

/// Scores every query with `m` samples from each source model. Queries whose
/// requests fail are listed in `failures` and left out of `records`.
pub fn score_difficulty(
    pool: &QueryPool,
    backend: &dyn EvaluationBackend,
    sft_ref: &str,
    rlvr_ref: &str,
    config: &ScoringConfig,
) -> Result<DifficultyScores> {
    if config.m < 2 {
        return Err(AdaptationError::InvalidConfig("m must be at least 2".into()));
    }
    if !(0.0..=1.0).contains(&config.failure_cap) {
        return Err(AdaptationError::InvalidConfig("failure_cap must lie in [0, 1]".into()));
    }
    let model_consistency = |model: &str, prompt: &str| -> std::result::Result<f64, EvalError> {
        let mut req = GenerationRequest::new(model, prompt, config.m, config.generation);
        req.seed = config.seed;
        let samples = sample_answers(backend, &req, config.extraction)?;
        let answers: Vec<_> = samples.into_iter().map(|s| s.extracted_answer).collect();
        consistency(&answers, config.m)
    };
    let outcomes = bounded_map(pool.queries(), config.max_in_flight, |_, q| {
        let prompt = config.prompt.render(&q.text);
        let c_sft = model_consistency(sft_ref, &prompt)?;
        let c_rlvr = model_consistency(rlvr_ref, &prompt)?;
        Ok::<_, EvalError>(DifficultyRecord::new(&q.id, c_sft, c_rlvr))
    });

    let mut records = Vec::new();
    let mut failures = Vec::new();
    for (q, outcome) in pool.queries().iter().zip(outcomes) {
        match outcome {
            Ok(r) => records.push(r),
            Err(e) => {
                log::warn!("query {} failed: {e}", q.id);
                failures.push(QueryFailure {
                    query_id: q.id.clone(),
                    error: e.to_string(),
                });
            }
        }
    }
    let total = pool.len();
    if total > 0 && failures.len() as f64 > config.failure_cap * total as f64 {
        return Err(AdaptationError::BackendFailure {
            failed: failures.len(),
            total,
            cap: config.failure_cap,
            first: failures[0].error.clone(),
        });
    }
    Ok(DifficultyScores { records, failures })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SelectionConfig {
    pub m: usize,
    pub n: usize,
    pub seed: u64,
    /// Discard queries harder than this; `None` means `1 - 1/m`.
    pub threshold: Option<f64>,
    /// Share of the set drawn from the low-difficulty pool.
    pub low_fraction: f64,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        Self {
            m: DEFAULT_SAMPLES,
            n: DEFAULT_SET_SIZE,
            seed: 0,
            threshold: None,
            low_fraction: 0.5,
        }
    }
}

impl SelectionConfig {
    pub fn effective_threshold(&self) -> f64 {
        self.threshold.unwrap_or(1.0 - 1.0 / self.m as f64)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(AdaptationError::InvalidConfig(msg.into()));
        if self.m < 2 {
            return bad("m must be at least 2");
        }
        if self.n == 0 || !self.n.is_multiple_of(2) {
            return bad("n must be a positive even number");
        }
        if !(0.0..=1.0).contains(&self.low_fraction) {
            return bad("low_fraction must lie in [0, 1]");
        }
        if let Some(t) = self.threshold {
            if !(0.0..=1.0).contains(&t) {
                return bad("threshold must lie in [0, 1]");
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptationSet {
    pub low_pool_ids: Vec<String>,
    pub medium_pool_ids: Vec<String>,
    /// Low-pool picks first, then medium-pool picks, each in pool order.
    pub selected: Vec<String>,
    pub selected_low: usize,
    pub selected_medium: usize,
    /// Extra picks taken from one pool because the other ran short.
    pub backfill: usize,
    pub discarded_ids: Vec<String>,
    pub seed: u64,
    pub m: usize,
    pub n: usize,
    pub threshold: f64,
}

impl AdaptationSet {
    pub fn queries<'a>(&self, pool: &'a QueryPool) -> Vec<&'a Query> {
        self.selected.iter().filter_map(|id| pool.get(id)).collect()
    }
}

/// Filters by difficulty, splits survivors at the median and draws a seeded
/// stratified sample.
pub fn build_adaptation_set(records: &[DifficultyRecord], config: &SelectionConfig) -> Result<AdaptationSet> {
    config.validate()?;
    let mut seen = BTreeSet::new();
    for r in records {
        if !seen.insert(r.query_id.as_str()) {
            return Err(AdaptationError::DuplicateQueryId(r.query_id.clone()));
        }
    }
    let threshold = config.effective_threshold();
    let (mut survivors, discarded): (Vec<&DifficultyRecord>, Vec<&DifficultyRecord>) = records
        .iter()
        .partition(|r| r.difficulty <= threshold + THRESHOLD_SLACK);
    if survivors.len() < config.n {
        return Err(AdaptationError::InsufficientQueries {
            available: survivors.len(),
            needed: config.n,
        });
    }
    survivors.sort_by(|a, b| {
        a.difficulty
            .total_cmp(&b.difficulty)
            .then_with(|| a.query_id.cmp(&b.query_id))
    });
    let half = survivors.len() / 2;
    let (low, medium) = survivors.split_at(half);

    let want_low = ((config.n as f64 * config.low_fraction).round() as usize).min(config.n);
    let want_medium = config.n - want_low;
    let mut take_low = want_low.min(low.len());
    let mut take_medium = want_medium.min(medium.len());
    let backfill = (want_low - take_low) + (want_medium - take_medium);
    if take_low < want_low {
        take_medium += want_low - take_low;
    } else if take_medium < want_medium {
        take_low += want_medium - take_medium;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut pick = |pool: &[&DifficultyRecord], amount: usize| -> Vec<String> {
        let mut idx = rand::seq::index::sample(&mut rng, pool.len(), amount).into_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| pool[i].query_id.clone()).collect()
    };
    let mut selected = pick(low, take_low);
    selected.extend(pick(medium, take_medium));

    let ids = |rs: &[&DifficultyRecord]| rs.iter().map(|r| r.query_id.clone()).collect::<Vec<_>>();
    let mut discarded_ids = ids(&discarded);
    discarded_ids.sort();
    Ok(AdaptationSet {
        low_pool_ids: ids(low),
        medium_pool_ids: ids(medium),
        selected,
        selected_low: take_low,
        selected_medium: take_medium,
        backfill,
        discarded_ids,
        seed: config.seed,
        m: config.m,
        n: config.n,
        threshold,
    })
}

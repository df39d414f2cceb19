//! Coefficient search over the two merge weights: a Tree-structured Parzen
//! Estimator proposes points, each point is scored by answer agreement on the
//! adaptation queries, and the final model is picked from the
//! consistency/perplexity Pareto frontier.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

use crate::adaptation::Query;
use crate::evaluator::prompts::PromptPreset;
use crate::evaluator::{
    bounded_map, consistency, perplexity_of, sample_answers, EvalError, EvaluationBackend, ExtractionPolicy,
    GenerationParams, GenerationRequest, DEFAULT_MAX_IN_FLIGHT, DEFAULT_SAMPLES,
};

pub const DEFAULT_MAX_FAILED_FRACTION: f64 = 0.20;
const KNEE_TIE_TOLERANCE: f64 = 1e-12;

#[derive(Debug, thiserror::Error)]
pub enum OptimizerError {
    #[error("search space dimension {0} has lower >= upper")]
    EmptySpace(usize),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("no successful trials")]
    NoSuccessfulTrials,
    #[error("empty frontier")]
    EmptyFrontier,
    #[error("{failed} failed trials exceed the limit of {limit} for {total} trials")]
    TooManyFailedTrials { failed: usize, limit: usize, total: usize },
    #[error("{path}: line {line}: {reason}")]
    CorruptLog { path: PathBuf, line: usize, reason: String },
    #[error("trial {index} in the log used {logged:?} but this configuration suggests {expected:?}")]
    ResumeMismatch {
        index: usize,
        logged: [f64; 2],
        expected: [f64; 2],
    },
    #[error("adaptation set is empty")]
    EmptyAdaptationSet,
    #[error("i/o on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

pub type Result<T> = std::result::Result<T, OptimizerError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub bounds: [(f64, f64); 2],
}

impl Default for SearchSpace {
    fn default() -> Self {
        Self {
            bounds: [(0.0, 2.0), (0.0, 2.0)],
        }
    }
}

impl SearchSpace {
    pub fn validate(&self) -> Result<()> {
        for (d, (lo, hi)) in self.bounds.iter().enumerate() {
            if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
                return Err(OptimizerError::EmptySpace(d));
            }
        }
        Ok(())
    }

    pub fn contains(&self, x: [f64; 2]) -> bool {
        self.bounds.iter().zip(x).all(|(&(lo, hi), v)| lo <= v && v <= hi)
    }

    pub fn clamp(&self, x: [f64; 2]) -> [f64; 2] {
        [
            x[0].clamp(self.bounds[0].0, self.bounds[0].1),
            x[1].clamp(self.bounds[1].0, self.bounds[1].1),
        ]
    }

    fn uniform(&self, rng: &mut impl Rng) -> [f64; 2] {
        let draw = |rng: &mut _, (lo, hi): (f64, f64)| lo + (hi - lo) * Rng::random::<f64>(rng);
        self.clamp([draw(rng, self.bounds[0]), draw(rng, self.bounds[1])])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrialStatus {
    Ok,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub index: usize,
    pub coeffs: [f64; 2],
    pub consistency: Option<f64>,
    pub perplexity: Option<f64>,
    pub status: TrialStatus,
    /// Queries dropped from this trial's means.
    #[serde(default)]
    pub failed_queries: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl TrialRecord {
    pub fn ok(index: usize, coeffs: [f64; 2], consistency: f64, perplexity: f64) -> Self {
        Self {
            index,
            coeffs,
            consistency: Some(consistency),
            perplexity: Some(perplexity),
            status: TrialStatus::Ok,
            failed_queries: 0,
            error: None,
        }
    }

    pub fn failed(index: usize, coeffs: [f64; 2], error: String) -> Self {
        Self {
            index,
            coeffs,
            consistency: None,
            perplexity: None,
            status: TrialStatus::Failed,
            failed_queries: 0,
            error: Some(error),
        }
    }

    /// `(consistency, perplexity)` for successful trials.
    pub fn metrics(&self) -> Option<(f64, f64)> {
        match (self.status, self.consistency, self.perplexity) {
            (TrialStatus::Ok, Some(c), Some(p)) => Some((c, p)),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Objective {
    #[default]
    Consistency,
    /// `consistency - weight * ln(perplexity)`.
    Scalarized { weight: f64 },
}

impl Objective {
    pub fn value(&self, trial: &TrialRecord) -> Option<f64> {
        let (c, p) = trial.metrics()?;
        Some(match self {
            Self::Consistency => c,
            Self::Scalarized { weight } => c - weight * p.ln(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TpeConfig {
    pub n_trials: usize,
    pub n_startup: usize,
    pub gamma_split: f64,
    pub n_candidates: usize,
    /// Minimum kernel bandwidth as a fraction of each dimension's range.
    pub bandwidth_floor: f64,
    pub seed: u64,
    pub objective: Objective,
}

impl Default for TpeConfig {
    fn default() -> Self {
        Self {
            n_trials: 100,
            n_startup: 10,
            gamma_split: 0.25,
            n_candidates: 24,
            bandwidth_floor: 0.1,
            seed: 0,
            objective: Objective::Consistency,
        }
    }
}

impl TpeConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(OptimizerError::InvalidConfig(m.into()));
        if self.n_startup >= self.n_trials {
            return bad("n_startup must be smaller than n_trials");
        }
        if !(self.gamma_split > 0.0 && self.gamma_split < 1.0) {
            return bad("gamma_split must lie in (0, 1)");
        }
        if self.n_candidates == 0 {
            return bad("n_candidates must be at least 1");
        }
        if !(self.bandwidth_floor > 0.0) {
            return bad("bandwidth_floor must be positive");
        }
        Ok(())
    }
}

/// One-dimensional mixture of truncated Gaussians plus a uniform component.
struct Parzen {
    centers: Vec<f64>,
    bandwidth: f64,
    lo: f64,
    hi: f64,
    /// Probability mass of each truncated kernel inside `[lo, hi]`.
    mass: Vec<f64>,
}

impl Parzen {
    fn fit(values: &[f64], lo: f64, hi: f64, floor: f64) -> Self {
        let n = values.len();
        let sigma = if n >= 2 {
            let mean = values.iter().sum::<f64>() / n as f64;
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        let range = hi - lo;
        let bandwidth = (floor * range).max(1.06 * sigma * (n.max(1) as f64).powf(-0.2));
        let normal = std_normal();
        let mass = values
            .iter()
            .map(|&c| normal.cdf((hi - c) / bandwidth) - normal.cdf((lo - c) / bandwidth))
            .map(|m| m.max(f64::MIN_POSITIVE))
            .collect();
        Self {
            centers: values.to_vec(),
            bandwidth,
            lo,
            hi,
            mass,
        }
    }

    fn weight(&self) -> f64 {
        1.0 / (self.centers.len() + 1) as f64
    }

    fn log_density(&self, x: f64) -> f64 {
        let normal = std_normal();
        let w = self.weight();
        let kernels: f64 = self
            .centers
            .iter()
            .zip(&self.mass)
            .map(|(&c, &m)| normal.pdf((x - c) / self.bandwidth) / (self.bandwidth * m))
            .sum();
        (w * (kernels + 1.0 / (self.hi - self.lo))).ln()
    }

    fn sample(&self, rng: &mut impl Rng) -> f64 {
        let component = rng.random_range(0..=self.centers.len());
        if component == self.centers.len() {
            return self.lo + (self.hi - self.lo) * rng.random::<f64>();
        }
        let c = self.centers[component];
        let normal = std_normal();
        let a = normal.cdf((self.lo - c) / self.bandwidth);
        let b = normal.cdf((self.hi - c) / self.bandwidth);
        let u = a + (b - a) * rng.random::<f64>();
        let x = c + self.bandwidth * normal.inverse_cdf(u.clamp(1e-300, 1.0 - 1e-16));
        x.clamp(self.lo, self.hi)
    }
}

fn std_normal() -> Normal {
    Normal::standard()
}

/// Next point to evaluate given the trials so far. Deterministic in
/// `(history, space, config)`.
pub fn tpe_suggest(history: &[TrialRecord], space: &SearchSpace, config: &TpeConfig) -> Result<[f64; 2]> {
    space.validate()?;
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(history.len() as u64);

    let mut scored: Vec<(f64, usize, [f64; 2])> = history
        .iter()
        .filter_map(|t| Some((config.objective.value(t)?, t.index, t.coeffs)))
        .filter(|(v, _, _)| v.is_finite())
        .collect();
    if scored.len() < config.n_startup.max(1) {
        return Ok(space.uniform(&mut rng));
    }
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let count = scored.len();
    let n_good = ((config.gamma_split * count as f64).ceil() as usize).clamp(1, count);
    let (good, bad) = scored.split_at(n_good);

    let fit = |group: &[(f64, usize, [f64; 2])], d: usize| {
        let values: Vec<f64> = group.iter().map(|g| g.2[d]).collect();
        let (lo, hi) = space.bounds[d];
        Parzen::fit(&values, lo, hi, config.bandwidth_floor)
    };
    let l = [fit(good, 0), fit(good, 1)];
    let g = [fit(bad, 0), fit(bad, 1)];

    let mut best: Option<(f64, [f64; 2])> = None;
    for _ in 0..config.n_candidates {
        let x = [l[0].sample(&mut rng), l[1].sample(&mut rng)];
        let score: f64 = (0..2).map(|d| l[d].log_density(x[d]) - g[d].log_density(x[d])).sum();
        if best.is_none_or(|(s, _)| score > s) {
            best = Some((score, x));
        }
    }
    Ok(space.clamp(best.expect("at least one candidate").1))
}

/// Uniform draw used by the random-search baseline; trial `index` of a run
/// seeded with `seed`.
pub fn random_suggest(space: &SearchSpace, seed: u64, index: usize) -> [f64; 2] {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    space.uniform(&mut rng)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParetoFrontier {
    pub points: Vec<TrialRecord>,
}

/// Non-dominated successful trials (higher consistency, lower perplexity),
/// sorted by descending consistency. Exact metric duplicates keep the lowest
/// index.
pub fn pareto_frontier(trials: &[TrialRecord]) -> Result<ParetoFrontier> {
    let mut ok: Vec<(f64, f64, &TrialRecord)> = trials
        .iter()
        .filter_map(|t| t.metrics().map(|(c, p)| (c, p, t)))
        .collect();
    if ok.is_empty() {
        return Err(OptimizerError::NoSuccessfulTrials);
    }
    ok.sort_by(|a, b| {
        b.0.total_cmp(&a.0)
            .then(a.1.total_cmp(&b.1))
            .then(a.2.index.cmp(&b.2.index))
    });
    let mut best_p = f64::INFINITY;
    let mut points = Vec::new();
    for (_, p, t) in ok {
        if p < best_p {
            points.push(t.clone());
            best_p = p;
        }
    }
    Ok(ParetoFrontier { points })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SelectionRule {
    #[default]
    MaxConsistency,
    Knee,
}

impl SelectionRule {
    pub fn select(self, frontier: &ParetoFrontier) -> Result<TrialRecord> {
        match self {
            Self::MaxConsistency => select_max_consistency(frontier),
            Self::Knee => select_knee(frontier),
        }
    }
}

pub fn select_max_consistency(frontier: &ParetoFrontier) -> Result<TrialRecord> {
    frontier
        .points
        .iter()
        .filter_map(|t| t.metrics().map(|m| (m, t)))
        .min_by(|((c1, p1), t1), ((c2, p2), t2)| c2.total_cmp(c1).then(p1.total_cmp(p2)).then(t1.index.cmp(&t2.index)))
        .map(|(_, t)| t.clone())
        .ok_or(OptimizerError::EmptyFrontier)
}

/// Frontier point closest to the ideal (best consistency, best perplexity)
/// after scaling both metrics to `[0, 1]` over the frontier.
pub fn select_knee(frontier: &ParetoFrontier) -> Result<TrialRecord> {
    let pts: Vec<((f64, f64), &TrialRecord)> = frontier
        .points
        .iter()
        .filter_map(|t| t.metrics().map(|m| (m, t)))
        .collect();
    if pts.is_empty() {
        return Err(OptimizerError::EmptyFrontier);
    }
    let span = |f: fn(&(f64, f64)) -> f64| {
        let lo = pts.iter().map(|(m, _)| f(m)).fold(f64::INFINITY, f64::min);
        let hi = pts.iter().map(|(m, _)| f(m)).fold(f64::NEG_INFINITY, f64::max);
        (lo, hi - lo)
    };
    let (c_lo, c_range) = span(|m| m.0);
    let (p_lo, p_range) = span(|m| m.1);
    let norm = |v: f64, lo: f64, range: f64| if range > 0.0 { (v - lo) / range } else { 0.0 };
    let dists: Vec<(f64, &TrialRecord)> = pts
        .iter()
        .map(|((c, p), t)| {
            let nc = norm(*c, c_lo, c_range);
            let np = norm(*p, p_lo, p_range);
            (((1.0 - nc).powi(2) + np.powi(2)).sqrt(), *t)
        })
        .collect();
    // Distances equal up to rounding count as ties.
    let best = dists.iter().map(|d| d.0).fold(f64::INFINITY, f64::min);
    dists
        .iter()
        .filter(|(d, _)| *d <= best + KNEE_TIE_TOLERANCE)
        .min_by_key(|(_, t)| t.index)
        .map(|(_, t)| (*t).clone())
        .ok_or(OptimizerError::EmptyFrontier)
}

/// Turns coefficients into something the backend can load.
pub trait CandidateBuilder {
    fn build(&mut self, coeffs: [f64; 2]) -> std::result::Result<String, String>;

    /// Called once the candidate has been scored.
    fn release(&mut self, _model_ref: &str) {}
}

/// Hands the backend an inline `coeffs:a,b` reference; no files involved.
pub struct InlineCoefficients;

impl CandidateBuilder for InlineCoefficients {
    fn build(&mut self, coeffs: [f64; 2]) -> std::result::Result<String, String> {
        Ok(format!(
            "{}{},{}",
            crate::evaluator::mock::COEFFS_PREFIX,
            coeffs[0],
            coeffs[1]
        ))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PerplexityMode {
    /// Perplexity of the rendered query prompt.
    #[default]
    Query,
    /// Mean perplexity of the sampled completions.
    Generation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchConfig {
    pub space: SearchSpace,
    pub tpe: TpeConfig,
    /// Samples per query per trial.
    pub k: usize,
    pub generation: GenerationParams,
    pub prompt: PromptPreset,
    pub extraction: ExtractionPolicy,
    pub perplexity_mode: PerplexityMode,
    pub selection: SelectionRule,
    pub max_failed_fraction: f64,
    pub max_in_flight: usize,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            space: SearchSpace::default(),
            tpe: TpeConfig::default(),
            k: DEFAULT_SAMPLES,
            generation: GenerationParams::default(),
            prompt: PromptPreset::default(),
            extraction: ExtractionPolicy::default(),
            perplexity_mode: PerplexityMode::default(),
            selection: SelectionRule::default(),
            max_failed_fraction: DEFAULT_MAX_FAILED_FRACTION,
            max_in_flight: DEFAULT_MAX_IN_FLIGHT,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        self.space.validate()?;
        self.tpe.validate()?;
        if self.k == 0 {
            return Err(OptimizerError::InvalidConfig("k must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.max_failed_fraction) {
            return Err(OptimizerError::InvalidConfig(
                "max_failed_fraction must lie in [0, 1]".into(),
            ));
        }
        Ok(())
    }

    fn failure_limit(&self) -> usize {
        (self.max_failed_fraction * self.tpe.n_trials as f64).floor() as usize
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub history: Vec<TrialRecord>,
    pub frontier: ParetoFrontier,
    pub selection: SelectionRule,
    pub selected: TrialRecord,
    pub coeffs: [f64; 2],
    pub failed_trials: usize,
}

/// Scores one candidate on every query: mean consistency and mean
/// perplexity over the queries that did not fail.
pub fn evaluate_candidate(
    backend: &dyn EvaluationBackend,
    model_ref: &str,
    queries: &[Query],
    config: &SearchConfig,
    seed: u64,
) -> std::result::Result<(f64, f64, usize), String> {
    let per_query = bounded_map(queries, config.max_in_flight, |_, q| {
        let prompt = config.prompt.render(&q.text);
        let req = GenerationRequest::new(model_ref, &prompt, config.k, config.generation).with_seed(seed);
        let samples = sample_answers(backend, &req, config.extraction)?;
        let answers: Vec<_> = samples.iter().map(|s| s.extracted_answer.clone()).collect();
        let c = consistency(&answers, config.k)?;
        let p = match config.perplexity_mode {
            PerplexityMode::Query => perplexity_of(backend, model_ref, &prompt)?,
            PerplexityMode::Generation => {
                let mut total = 0.0;
                for s in &samples {
                    total += perplexity_of(backend, model_ref, &s.text)?;
                }
                total / samples.len() as f64
            }
        };
        Ok::<_, EvalError>((c, p))
    });
    let mut sum_c = 0.0;
    let mut sum_p = 0.0;
    let mut ok = 0usize;
    let mut first_err = None;
    for r in per_query {
        match r {
            Ok((c, p)) => {
                sum_c += c;
                sum_p += p;
                ok += 1;
            }
            Err(e) => {
                first_err.get_or_insert(e.to_string());
            }
        }
    }
    if ok == 0 {
        return Err(first_err.unwrap_or_else(|| "no queries".into()));
    }
    Ok((sum_c / ok as f64, sum_p / ok as f64, queries.len() - ok))
}

/// Append-only JSON-lines trial log.
pub struct TrialLog {
    path: PathBuf,
    file: File,
}

impl TrialLog {
    /// Opens (or creates) the log and returns the trials already recorded.
    /// A partial final line from an interrupted write is discarded.
    pub fn open(path: &Path) -> Result<(Self, Vec<TrialRecord>)> {
        let io = |source| OptimizerError::Io {
            path: path.to_path_buf(),
            source,
        };
        let mut trials = Vec::new();
        let mut valid_len = 0u64;
        if path.exists() {
            let content = std::fs::read(path).map_err(io)?;
            let mut offset = 0usize;
            for (line_no, raw) in (1usize..).zip(content.split_inclusive(|&b| b == b'\n')) {
                let complete = raw.ends_with(b"\n");
                let parsed = std::str::from_utf8(raw)
                    .map_err(|e| e.to_string())
                    .and_then(|s| serde_json::from_str::<TrialRecord>(s.trim()).map_err(|e| e.to_string()));
                match parsed {
                    Ok(t) if complete => {
                        if t.index != trials.len() {
                            return Err(OptimizerError::CorruptLog {
                                path: path.to_path_buf(),
                                line: line_no,
                                reason: format!("expected trial {}, found {}", trials.len(), t.index),
                            });
                        }
                        trials.push(t);
                        offset += raw.len();
                        valid_len = offset as u64;
                    }
                    _ if !complete => break,
                    Ok(_) => unreachable!(),
                    Err(reason) => {
                        if raw.iter().all(u8::is_ascii_whitespace) {
                            offset += raw.len();
                            valid_len = offset as u64;
                            continue;
                        }
                        return Err(OptimizerError::CorruptLog {
                            path: path.to_path_buf(),
                            line: line_no,
                            reason,
                        });
                    }
                }
            }
        }
        let file = OpenOptions::new().create(true).append(true).open(path).map_err(io)?;
        if file.metadata().map_err(io)?.len() != valid_len {
            file.set_len(valid_len).map_err(io)?;
        }
        Ok((
            Self {
                path: path.to_path_buf(),
                file,
            },
            trials,
        ))
    }

    pub fn append(&mut self, trial: &TrialRecord) -> Result<()> {
        let io = |source| OptimizerError::Io {
            path: self.path.clone(),
            source,
        };
        let mut line = serde_json::to_string(trial).expect("trial serializes");
        line.push('\n');
        self.file.write_all(line.as_bytes()).map_err(io)?;
        self.file.sync_data().map_err(io)
    }
}

/// Reads a trial log without modifying it.
pub fn read_trial_log(path: &Path) -> Result<Vec<TrialRecord>> {
    let io = |source| OptimizerError::Io {
        path: path.to_path_buf(),
        source,
    };
    let reader = BufReader::new(File::open(path).map_err(io)?);
    let mut trials = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(io)?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(&line) {
            Ok(t) => trials.push(t),
            Err(e) => {
                return Err(OptimizerError::CorruptLog {
                    path: path.to_path_buf(),
                    line: i + 1,
                    reason: e.to_string(),
                })
            }
        }
    }
    Ok(trials)
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Resume from and append to this log.
    pub log_path: Option<PathBuf>,
    /// Stop once this many trials exist (for staged runs).
    pub stop_after: Option<usize>,
}

/// Runs trials until `n_trials` (or `stop_after`) exist, replaying any that
/// the log already holds. Returns the full history.
pub fn run_trials(
    builder: &mut dyn CandidateBuilder,
    backend: &dyn EvaluationBackend,
    queries: &[Query],
    config: &SearchConfig,
    options: &RunOptions,
) -> Result<Vec<TrialRecord>> {
    config.validate()?;
    if queries.is_empty() {
        return Err(OptimizerError::EmptyAdaptationSet);
    }
    let target = options.stop_after.unwrap_or(usize::MAX).min(config.tpe.n_trials);
    let (mut log, logged) = match &options.log_path {
        Some(p) => {
            let (log, trials) = TrialLog::open(p)?;
            (Some(log), trials)
        }
        None => (None, Vec::new()),
    };

    let mut history: Vec<TrialRecord> = Vec::new();
    for trial in logged.into_iter().take(config.tpe.n_trials) {
        let expected = tpe_suggest(&history, &config.space, &config.tpe)?;
        if expected != trial.coeffs {
            return Err(OptimizerError::ResumeMismatch {
                index: trial.index,
                logged: trial.coeffs,
                expected,
            });
        }
        history.push(trial);
    }
    if !history.is_empty() {
        log::info!("replayed {} logged trials", history.len());
    }
    check_failures(&history, config)?;

    while history.len() < target {
        let index = history.len();
        let coeffs = tpe_suggest(&history, &config.space, &config.tpe)?;
        let trial = match builder.build(coeffs) {
            Err(e) => TrialRecord::failed(index, coeffs, format!("build: {e}")),
            Ok(model_ref) => {
                let seed = config.tpe.seed ^ (index as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
                let outcome = evaluate_candidate(backend, &model_ref, queries, config, seed);
                builder.release(&model_ref);
                match outcome {
                    Ok((c, p, dropped)) => TrialRecord {
                        failed_queries: dropped,
                        ..TrialRecord::ok(index, coeffs, c, p)
                    },
                    Err(e) => TrialRecord::failed(index, coeffs, e),
                }
            }
        };
        log::info!(
            "trial {index}: coeffs ({:.4}, {:.4}) consistency {:?} perplexity {:?}",
            coeffs[0],
            coeffs[1],
            trial.consistency,
            trial.perplexity
        );
        if let Some(log) = log.as_mut() {
            log.append(&trial)?;
        }
        history.push(trial);
        check_failures(&history, config)?;
    }
    Ok(history)
}

fn check_failures(history: &[TrialRecord], config: &SearchConfig) -> Result<()> {
    let failed = history.iter().filter(|t| t.status == TrialStatus::Failed).count();
    let limit = config.failure_limit();
    if failed > limit {
        return Err(OptimizerError::TooManyFailedTrials {
            failed,
            limit,
            total: config.tpe.n_trials,
        });
    }
    Ok(())
}

/// Frontier and final pick for a finished history.
pub fn finalize(history: Vec<TrialRecord>, rule: SelectionRule) -> Result<SearchResult> {
    let frontier = pareto_frontier(&history)?;
    let selected = rule.select(&frontier)?;
    let failed_trials = history.iter().filter(|t| t.status == TrialStatus::Failed).count();
    Ok(SearchResult {
        coeffs: selected.coeffs,
        history,
        frontier,
        selection: rule,
        selected,
        failed_trials,
    })
}

pub fn run_search(
    builder: &mut dyn CandidateBuilder,
    backend: &dyn EvaluationBackend,
    queries: &[Query],
    config: &SearchConfig,
    log_path: Option<&Path>,
) -> Result<SearchResult> {
    let options = RunOptions {
        log_path: log_path.map(Path::to_path_buf),
        stop_after: None,
    };
    let history = run_trials(builder, backend, queries, config, &options)?;
    finalize(history, config.selection)
}

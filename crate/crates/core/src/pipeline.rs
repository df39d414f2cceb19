//! End-to-end run: score and select adaptation queries, build sparsified
//! task vectors, search merge coefficients, write the merged checkpoint.
//!
//! Every stage persists its artifacts in the workspace so an interrupted run
//! can pick up where it stopped.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::adaptation::{
    build_adaptation_set, score_difficulty, AdaptationSet, DifficultyScores, Query, QueryPool, ScoringConfig,
    SelectionConfig,
};
use crate::atomic::write_json;
use crate::diagnostics::{
    default_module_rules, layerwise_norms, modulewise_activation, sign_interference, write_layer_norms_csv,
    write_module_activation_csv, InterferenceReport, LayerPattern, DEFAULT_LAYER_PATTERN,
};
use crate::dtype::Dtype;
use crate::evaluator::http::{HttpBackend, HttpBackendConfig};
use crate::evaluator::mock::{MockBackend, LAMBDA_RLVR_KEY, LAMBDA_SFT_KEY};
use crate::evaluator::EvaluationBackend;
use crate::optimizer::{finalize, run_trials, CandidateBuilder, RunOptions, SearchConfig, SearchResult, TrialRecord};
use crate::task_vector::{
    extract_task_vector, global_l2_norm, load_task_vector, merge, save_task_vector, sparsify_and_rescale, DtypePolicy,
    QuantileMode, QuantileScope, TaskVector,
};
use crate::tensor_archive::{Metadata, TensorArchive};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

pub const CONFIG_SNAPSHOT: &str = "config.json";
pub const DIFFICULTY_FILE: &str = "difficulty.json";
pub const ADAPTATION_FILE: &str = "adaptation_set.json";
pub const TAU_SFT_FILE: &str = "tau_sft.safetensors";
pub const TAU_RLVR_FILE: &str = "tau_rlvr.safetensors";
pub const TRIAL_LOG: &str = "trials.jsonl";
pub const SEARCH_RESULT_FILE: &str = "search_result.json";
pub const REPORT_FILE: &str = "report.json";
pub const DEFAULT_OUTPUT: &str = "merged.safetensors";
pub const LOCK_FILE: &str = ".lock";

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("workspace is locked by {0}")]
    Locked(PathBuf),
    #[error("workspace {0} was created with a different configuration; use a fresh workspace or rerun without resume")]
    ResumeConfigMismatch(PathBuf),
    #[error("stage {stage} failed: {message}")]
    Stage { stage: &'static str, message: String },
    #[error("i/o on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

pub type Result<T> = std::result::Result<T, PipelineError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn stage_err(stage: &'static str) -> impl Fn(&dyn std::fmt::Display) -> PipelineError {
    move |e| PipelineError::Stage {
        stage,
        message: e.to_string(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum BackendConfig {
    Http(HttpBackendConfig),
    Mock(MockBackend),
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self::Http(HttpBackendConfig::default())
    }
}

impl BackendConfig {
    /// Live backend. A mock resolves the two source checkpoints to the unit
    /// coefficient pairs unless aliases say otherwise.
    pub fn instantiate(&self, sft_ref: &str, rlvr_ref: &str) -> Result<Box<dyn EvaluationBackend>> {
        match self {
            Self::Http(cfg) => Ok(Box::new(
                HttpBackend::new(cfg.clone()).map_err(|e| PipelineError::Config(e.to_string()))?,
            )),
            Self::Mock(mock) => {
                let mut mock = mock.clone();
                mock.aliases.entry(sft_ref.to_string()).or_insert([1.0, 0.0]);
                mock.aliases.entry(rlvr_ref.to_string()).or_insert([0.0, 1.0]);
                Ok(Box::new(mock))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub base: PathBuf,
    pub sft: PathBuf,
    pub rlvr: PathBuf,
    /// JSON-lines query pool; not needed with `fixed_coefficients`.
    pub pool: Option<PathBuf>,
    pub workspace: PathBuf,
    /// Merged checkpoint; defaults to `<workspace>/merged.safetensors`.
    pub output: Option<PathBuf>,
    /// Output dtype; defaults to each base tensor's dtype.
    pub output_dtype: Option<Dtype>,
    pub retention_p: f64,
    pub epsilon: f64,
    pub quantile_mode: QuantileMode,
    pub quantile_scope: QuantileScope,
    pub dtype_policy: DtypePolicy,
    pub m: usize,
    pub n: usize,
    /// Defaults to `1 - 1/m`.
    pub difficulty_threshold: Option<f64>,
    /// Share of the adaptation set drawn from the easier half.
    pub easy_medium_ratio: f64,
    pub failure_cap: f64,
    pub search: SearchConfig,
    pub backend: BackendConfig,
    /// Drives data selection and the search.
    pub seed: u64,
    /// Skip selection and search and merge at these coefficients.
    pub fixed_coefficients: Option<[f64; 2]>,
    pub layer_pattern: String,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            base: PathBuf::new(),
            sft: PathBuf::new(),
            rlvr: PathBuf::new(),
            pool: None,
            workspace: PathBuf::new(),
            output: None,
            output_dtype: None,
            retention_p: 0.30,
            epsilon: 1e-8,
            quantile_mode: QuantileMode::Exact,
            quantile_scope: QuantileScope::Global,
            dtype_policy: DtypePolicy::Require,
            m: 5,
            n: 64,
            difficulty_threshold: None,
            easy_medium_ratio: 0.5,
            failure_cap: crate::adaptation::DEFAULT_FAILURE_CAP,
            search: SearchConfig::default(),
            backend: BackendConfig::default(),
            seed: 0,
            fixed_coefficients: None,
            layer_pattern: DEFAULT_LAYER_PATTERN.to_string(),
        }
    }
}

impl PipelineConfig {
    /// Reads a JSON config, applies `dotted.path=value` overrides and makes
    /// relative paths relative to the config file.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        let mut value: Value =
            serde_json::from_str(&text).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        apply_overrides(&mut value, overrides)?;
        let mut config = Self::from_value(value)?;
        let dir = path.parent().unwrap_or(Path::new(""));
        config.rebase_paths(dir);
        Ok(config)
    }

    pub fn from_value(value: Value) -> Result<Self> {
        serde_json::from_value(value).map_err(|e| PipelineError::Config(e.to_string()))
    }

    fn rebase_paths(&mut self, dir: &Path) {
        let fix = |p: &mut PathBuf| {
            if !p.as_os_str().is_empty() && p.is_relative() {
                *p = dir.join(&*p);
            }
        };
        fix(&mut self.base);
        fix(&mut self.sft);
        fix(&mut self.rlvr);
        fix(&mut self.workspace);
        if let Some(p) = self.pool.as_mut() {
            fix(p);
        }
        if let Some(p) = self.output.as_mut() {
            fix(p);
        }
    }

    pub fn output_path(&self) -> PathBuf {
        self.output
            .clone()
            .unwrap_or_else(|| self.workspace.join(DEFAULT_OUTPUT))
    }

    pub fn selection_config(&self) -> SelectionConfig {
        SelectionConfig {
            m: self.m,
            n: self.n,
            seed: self.seed,
            threshold: self.difficulty_threshold,
            low_fraction: self.easy_medium_ratio,
        }
    }

    pub fn scoring_config(&self) -> ScoringConfig {
        ScoringConfig {
            m: self.m,
            generation: self.search.generation,
            prompt: self.search.prompt,
            extraction: self.search.extraction,
            failure_cap: self.failure_cap,
            max_in_flight: self.search.max_in_flight,
            seed: Some(self.seed),
        }
    }

    /// Search settings with the run seed applied.
    pub fn effective_search(&self) -> SearchConfig {
        let mut s = self.search.clone();
        s.tpe.seed = self.seed;
        s
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(PipelineError::Config(m));
        for (label, p) in [("base", &self.base), ("sft", &self.sft), ("rlvr", &self.rlvr)] {
            if p.as_os_str().is_empty() {
                return bad(format!("{label} checkpoint path is required"));
            }
            if !p.is_file() {
                return bad(format!("{label} checkpoint {} does not exist", p.display()));
            }
        }
        if self.workspace.as_os_str().is_empty() {
            return bad("workspace path is required".into());
        }
        match (&self.pool, self.fixed_coefficients) {
            (None, None) => return bad("pool is required unless fixed_coefficients is set".into()),
            (Some(p), None) if !p.is_file() => return bad(format!("query pool {} does not exist", p.display())),
            _ => {}
        }
        if let Some(c) = self.fixed_coefficients {
            if !c.iter().all(|v| v.is_finite()) {
                return bad("fixed_coefficients must be finite".into());
            }
        }
        if !(self.retention_p > 0.0 && self.retention_p <= 1.0) {
            return bad("retention_p must lie in (0, 1]".into());
        }
        if !(self.epsilon > 0.0) {
            return bad("epsilon must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.failure_cap) {
            return bad("failure_cap must lie in [0, 1]".into());
        }
        LayerPattern::new(&self.layer_pattern).map_err(|e| PipelineError::Config(e.to_string()))?;
        self.selection_config()
            .validate()
            .map_err(|e| PipelineError::Config(e.to_string()))?;
        self.search
            .validate()
            .map_err(|e| PipelineError::Config(e.to_string()))?;
        if let BackendConfig::Mock(mock) = &self.backend {
            mock.landscape.validate().map_err(PipelineError::Config)?;
        }
        if let Some(t) = self.difficulty_threshold {
            let derived = 1.0 - 1.0 / self.m as f64;
            if (t - derived).abs() > 1e-12 {
                log::warn!("difficulty_threshold {t} differs from 1 - 1/m = {derived}");
            }
        }
        Ok(())
    }
}

/// Sets `dotted.path=value` entries in a JSON document. Values parse as JSON
/// when they can and are taken as strings otherwise.
pub fn apply_overrides(doc: &mut Value, overrides: &[String]) -> Result<()> {
    for item in overrides {
        let (path, raw) = item
            .split_once('=')
            .ok_or_else(|| PipelineError::Config(format!("override {item:?} is not key=value")))?;
        let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        let mut cursor = &mut *doc;
        let keys: Vec<&str> = path.split('.').collect();
        if keys.iter().any(|k| k.is_empty()) {
            return Err(PipelineError::Config(format!("bad override path {path:?}")));
        }
        for key in &keys[..keys.len() - 1] {
            if cursor.is_null() {
                *cursor = Value::Object(Default::default());
            }
            let obj = cursor
                .as_object_mut()
                .ok_or_else(|| PipelineError::Config(format!("{path}: {key} is not an object")))?;
            cursor = obj.entry(key.to_string()).or_insert(Value::Null);
        }
        if cursor.is_null() {
            *cursor = Value::Object(Default::default());
        }
        let obj = cursor
            .as_object_mut()
            .ok_or_else(|| PipelineError::Config(format!("{path}: parent is not an object")))?;
        obj.insert(keys[keys.len() - 1].to_string(), value);
    }
    Ok(())
}

#[derive(Debug, Clone, Default)]
pub struct RunControl {
    /// Reuse artifacts already in the workspace.
    pub resume: bool,
    /// Stop once this many search trials exist.
    pub stop_after_trials: Option<usize>,
    /// Finish after model selection without writing the merged checkpoint.
    pub skip_merge: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "kebab-case")]
pub enum RunStatus {
    Completed,
    Stopped { trials: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: String,
    pub seconds: f64,
    pub reused: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VectorSummary {
    pub parameters: usize,
    pub original_norm: f64,
    pub retained: usize,
    pub threshold: Option<f64>,
    pub gamma: f64,
    pub final_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsSummary {
    pub sft: VectorSummary,
    pub rlvr: VectorSummary,
    /// Sign conflicts between the two final vectors over the RLVR support.
    pub interference: InterferenceReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptationSummary {
    pub selected: Vec<String>,
    pub selected_low: usize,
    pub selected_medium: usize,
    pub backfill: usize,
    pub discarded: usize,
    pub failed_queries: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub tool_version: String,
    pub status: RunStatus,
    pub config: PipelineConfig,
    pub input_digests: BTreeMap<String, String>,
    pub stages: Vec<StageTiming>,
    pub diagnostics: Option<DiagnosticsSummary>,
    pub adaptation: Option<AdaptationSummary>,
    pub trial_log: Option<PathBuf>,
    pub search_result: Option<PathBuf>,
    pub selected_trial: Option<TrialRecord>,
    pub coefficients: Option<[f64; 2]>,
    pub output: Option<PathBuf>,
    pub output_digest: Option<String>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let mut file = File::open(path).map_err(io_err(path))?;
    let mut hasher = Sha256::new();
    let mut buf = vec![0u8; 1 << 20];
    loop {
        let n = file.read(&mut buf).map_err(io_err(path))?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex::encode(hasher.finalize()))
}

/// Exclusive hold on a workspace, released on drop.
pub struct WorkspaceLock {
    path: PathBuf,
}

impl WorkspaceLock {
    pub fn acquire(workspace: &Path) -> Result<Self> {
        std::fs::create_dir_all(workspace).map_err(io_err(workspace))?;
        let path = workspace.join(LOCK_FILE);
        for _ in 0..2 {
            match OpenOptions::new().write(true).create_new(true).open(&path) {
                Ok(mut f) => {
                    writeln!(f, "{}", std::process::id()).map_err(io_err(&path))?;
                    return Ok(Self { path });
                }
                Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                    if !lock_is_stale(&path) {
                        return Err(PipelineError::Locked(path));
                    }
                    log::warn!("removing stale lock {}", path.display());
                    std::fs::remove_file(&path).map_err(io_err(&path))?;
                }
                Err(e) => return Err(io_err(&path)(e)),
            }
        }
        Err(PipelineError::Locked(path))
    }
}

impl Drop for WorkspaceLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

/// A lock whose owning process is gone. Only detectable where `/proc`
/// exists; elsewhere every lock is treated as live.
fn lock_is_stale(path: &Path) -> bool {
    let Ok(text) = std::fs::read_to_string(path) else {
        return false;
    };
    let Ok(pid) = text.trim().parse::<u32>() else {
        return false;
    };
    let proc_root = Path::new("/proc");
    proc_root.is_dir() && pid != std::process::id() && !proc_root.join(pid.to_string()).exists()
}

/// Writes each candidate merge to the workspace and deletes it after scoring.
struct ArchiveCandidates<'a> {
    base: &'a TensorArchive,
    sft: &'a TaskVector,
    rlvr: &'a TaskVector,
    dir: PathBuf,
    dtype: Option<Dtype>,
    counter: usize,
}

impl CandidateBuilder for ArchiveCandidates<'_> {
    fn build(&mut self, coeffs: [f64; 2]) -> std::result::Result<String, String> {
        let path = self.dir.join(format!("candidate-{:04}.safetensors", self.counter));
        self.counter += 1;
        merge_at(self.base, self.sft, self.rlvr, coeffs, &path, self.dtype).map_err(|e| e.to_string())?;
        Ok(path.to_string_lossy().into_owned())
    }

    fn release(&mut self, model_ref: &str) {
        let _ = std::fs::remove_file(model_ref);
    }
}

fn merge_at(
    base: &TensorArchive,
    sft: &TaskVector,
    rlvr: &TaskVector,
    coeffs: [f64; 2],
    out: &Path,
    dtype: Option<Dtype>,
) -> std::result::Result<TensorArchive, crate::task_vector::TaskVectorError> {
    let mut metadata = Metadata::new();
    metadata.insert(LAMBDA_SFT_KEY.to_string(), coeffs[0].to_string());
    metadata.insert(LAMBDA_RLVR_KEY.to_string(), coeffs[1].to_string());
    merge(
        base,
        &[(sft, coeffs[0]), (rlvr, coeffs[1])],
        out,
        dtype,
        Some(&metadata),
    )
}

struct Timer {
    stages: Vec<StageTiming>,
}

impl Timer {
    fn record<T>(&mut self, stage: &str, reused: bool, f: impl FnOnce() -> Result<T>) -> Result<T> {
        let start = Instant::now();
        let out = f()?;
        self.stages.push(StageTiming {
            stage: stage.to_string(),
            seconds: start.elapsed().as_secs_f64(),
            reused,
        });
        Ok(out)
    }
}

/// Runs every stage, reusing workspace artifacts when `control.resume` is
/// set. The report is also written to `<workspace>/report.json`.
pub fn run_pipeline(config: &PipelineConfig, control: &RunControl) -> Result<RunReport> {
    config.validate()?;
    let ws = &config.workspace;
    let _lock = WorkspaceLock::acquire(ws)?;
    check_snapshot(config, control)?;

    let mut input_digests = BTreeMap::new();
    input_digests.insert("base".to_string(), sha256_file(&config.base)?);
    input_digests.insert("sft".to_string(), sha256_file(&config.sft)?);
    input_digests.insert("rlvr".to_string(), sha256_file(&config.rlvr)?);
    if let (Some(pool), None) = (&config.pool, config.fixed_coefficients) {
        input_digests.insert("pool".to_string(), sha256_file(pool)?);
    }
    let mut report = RunReport {
        tool_version: TOOL_VERSION.to_string(),
        status: RunStatus::Completed,
        config: config.clone(),
        input_digests,
        stages: Vec::new(),
        diagnostics: None,
        adaptation: None,
        trial_log: None,
        search_result: None,
        selected_trial: None,
        coefficients: None,
        output: None,
        output_digest: None,
    };
    let mut timer = Timer { stages: Vec::new() };

    let sft_ref = config.sft.to_string_lossy().into_owned();
    let rlvr_ref = config.rlvr.to_string_lossy().into_owned();
    let backend = match config.fixed_coefficients {
        None => Some(config.backend.instantiate(&sft_ref, &rlvr_ref)?),
        Some(_) => None,
    };

    // Stage 1: adaptation set.
    let mut selected_queries: Vec<Query> = Vec::new();
    if let (Some(backend), Some(pool_path)) = (&backend, &config.pool) {
        let reuse = control.resume && ws.join(DIFFICULTY_FILE).is_file() && ws.join(ADAPTATION_FILE).is_file();
        let pool = QueryPool::load_jsonl(pool_path).map_err(|e| stage_err("select-data")(&e))?;
        let (scores, set) = timer.record("select-data", reuse, || {
            if reuse {
                Ok((
                    read_json(&ws.join(DIFFICULTY_FILE))?,
                    read_json(&ws.join(ADAPTATION_FILE))?,
                ))
            } else {
                stage_select(config, backend.as_ref(), &pool, &sft_ref, &rlvr_ref)
            }
        })?;
        let scores: DifficultyScores = scores;
        let set: AdaptationSet = set;
        selected_queries = set.queries(&pool).into_iter().cloned().collect();
        report.adaptation = Some(AdaptationSummary {
            selected: set.selected.clone(),
            selected_low: set.selected_low,
            selected_medium: set.selected_medium,
            backfill: set.backfill,
            discarded: set.discarded_ids.len(),
            failed_queries: scores.failures.len(),
        });
    }

    // Stage 2: task vectors.
    let base = TensorArchive::open(&config.base).map_err(|e| stage_err("task-vectors")(&e))?;
    let reuse = control.resume && ws.join(TAU_SFT_FILE).is_file() && ws.join(TAU_RLVR_FILE).is_file();
    let (tau_sft, tau_rlvr, diag) = timer.record("task-vectors", reuse, || stage_task_vectors(config, &base, reuse))?;
    report.diagnostics = Some(diag);

    // Stage 3: coefficient search.
    let coeffs = match (config.fixed_coefficients, &backend) {
        (Some(c), _) => c,
        (None, Some(backend)) => {
            let log_path = ws.join(TRIAL_LOG);
            report.trial_log = Some(log_path.clone());
            if !control.resume && log_path.exists() {
                std::fs::remove_file(&log_path).map_err(io_err(&log_path))?;
            }
            let search = config.effective_search();
            let candidates_dir = ws.join("candidates");
            std::fs::create_dir_all(&candidates_dir).map_err(io_err(&candidates_dir))?;
            let mut builder = ArchiveCandidates {
                base: &base,
                sft: &tau_sft,
                rlvr: &tau_rlvr,
                dir: candidates_dir,
                dtype: config.output_dtype,
                counter: 0,
            };
            let options = RunOptions {
                log_path: Some(log_path),
                stop_after: control.stop_after_trials,
            };
            let history = timer.record("search", false, || {
                run_trials(&mut builder, backend.as_ref(), &selected_queries, &search, &options)
                    .map_err(|e| stage_err("search")(&e))
            })?;
            if history.len() < search.tpe.n_trials {
                report.status = RunStatus::Stopped { trials: history.len() };
                report.stages = timer.stages;
                write_json(&ws.join(REPORT_FILE), &report).map_err(io_err(ws))?;
                return Ok(report);
            }

            // Stage 4: frontier and selection.
            let result: SearchResult = timer.record("select-model", false, || {
                finalize(history, search.selection).map_err(|e| stage_err("select-model")(&e))
            })?;
            let path = ws.join(SEARCH_RESULT_FILE);
            write_json(&path, &result).map_err(io_err(&path))?;
            report.search_result = Some(path);
            report.selected_trial = Some(result.selected.clone());
            result.coeffs
        }
        (None, None) => unreachable!("backend exists whenever coefficients are searched"),
    };

    report.coefficients = Some(coeffs);
    if control.skip_merge {
        report.stages = timer.stages;
        let path = ws.join(REPORT_FILE);
        write_json(&path, &report).map_err(io_err(&path))?;
        return Ok(report);
    }
    let output = config.output_path();
    timer.record("merge", false, || {
        merge_at(&base, &tau_sft, &tau_rlvr, coeffs, &output, config.output_dtype)
            .map(|_| ())
            .map_err(|e| stage_err("merge")(&e))
    })?;
    report.output_digest = Some(sha256_file(&output)?);
    report.output = Some(output);
    report.stages = timer.stages;
    let path = ws.join(REPORT_FILE);
    write_json(&path, &report).map_err(io_err(&path))?;
    Ok(report)
}

/// Runs only the data-selection stage and writes its artifacts.
pub fn select_data(config: &PipelineConfig) -> Result<AdaptationSet> {
    config.validate()?;
    let pool_path = config
        .pool
        .as_ref()
        .ok_or_else(|| PipelineError::Config("pool is required for data selection".into()))?;
    let _lock = WorkspaceLock::acquire(&config.workspace)?;
    let sft_ref = config.sft.to_string_lossy().into_owned();
    let rlvr_ref = config.rlvr.to_string_lossy().into_owned();
    let backend = config.backend.instantiate(&sft_ref, &rlvr_ref)?;
    let pool = QueryPool::load_jsonl(pool_path).map_err(|e| stage_err("select-data")(&e))?;
    Ok(stage_select(config, backend.as_ref(), &pool, &sft_ref, &rlvr_ref)?.1)
}

fn check_snapshot(config: &PipelineConfig, control: &RunControl) -> Result<()> {
    let path = config.workspace.join(CONFIG_SNAPSHOT);
    if control.resume && path.is_file() {
        let previous: Value = read_json(&path)?;
        let current = serde_json::to_value(config).expect("config serializes");
        if previous != current {
            return Err(PipelineError::ResumeConfigMismatch(config.workspace.clone()));
        }
        return Ok(());
    }
    write_json(&path, config).map_err(io_err(&path))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))
}

fn stage_select(
    config: &PipelineConfig,
    backend: &dyn EvaluationBackend,
    pool: &QueryPool,
    sft_ref: &str,
    rlvr_ref: &str,
) -> Result<(DifficultyScores, AdaptationSet)> {
    let err = stage_err("select-data");
    let scores = score_difficulty(pool, backend, sft_ref, rlvr_ref, &config.scoring_config()).map_err(|e| err(&e))?;
    let set = build_adaptation_set(&scores.records, &config.selection_config()).map_err(|e| err(&e))?;
    let ws = &config.workspace;
    write_json(&ws.join(DIFFICULTY_FILE), &scores).map_err(io_err(ws))?;
    write_json(&ws.join(ADAPTATION_FILE), &set).map_err(io_err(ws))?;
    Ok((scores, set))
}

fn stage_task_vectors(
    config: &PipelineConfig,
    base: &TensorArchive,
    reuse: bool,
) -> Result<(TaskVector, TaskVector, DiagnosticsSummary)> {
    let err = stage_err("task-vectors");
    let ws = &config.workspace;
    let build = |ft: &Path, file: &str| -> Result<(TaskVector, VectorSummary)> {
        let out = ws.join(file);
        let (raw_norm, tv) = if reuse {
            let tv = load_task_vector(&out).map_err(|e| err(&e))?;
            let norm = tv
                .sparsity
                .as_ref()
                .map(|s| s.original_norm)
                .unwrap_or_else(|| global_l2_norm(&tv));
            (norm, tv)
        } else {
            let finetuned = TensorArchive::open(ft).map_err(|e| err(&e))?;
            let raw = extract_task_vector(base, &finetuned, config.dtype_policy).map_err(|e| err(&e))?;
            let norm = global_l2_norm(&raw);
            let tv = if config.retention_p >= 1.0 {
                raw
            } else {
                sparsify_and_rescale(
                    &raw,
                    config.retention_p,
                    config.quantile_mode,
                    config.quantile_scope,
                    config.epsilon,
                )
                .map_err(|e| err(&e))?
                .vector
            };
            save_task_vector(&tv, &out, Dtype::F64).map_err(|e| err(&e))?;
            (norm, tv)
        };
        let summary = VectorSummary {
            parameters: tv.num_parameters(),
            original_norm: raw_norm,
            retained: tv.count_nonzero(),
            threshold: tv.sparsity.as_ref().map(|s| s.threshold),
            gamma: tv.sparsity.as_ref().map(|s| s.rescale_gamma).unwrap_or(1.0),
            final_norm: global_l2_norm(&tv),
        };
        Ok((tv, summary))
    };
    let (tau_sft, sft_summary) = build(&config.sft, TAU_SFT_FILE)?;
    let (tau_rlvr, rlvr_summary) = build(&config.rlvr, TAU_RLVR_FILE)?;

    let interference = sign_interference(&tau_sft, &tau_rlvr, 1.0, 1.0).map_err(|e| err(&e))?;
    let pattern = LayerPattern::new(&config.layer_pattern).map_err(|e| err(&e))?;
    let rules = default_module_rules();
    let diag_dir = ws.join("diagnostics");
    std::fs::create_dir_all(&diag_dir).map_err(io_err(&diag_dir))?;
    for (label, tv) in [("sft", &tau_sft), ("rlvr", &tau_rlvr)] {
        let mut buf = Vec::new();
        write_layer_norms_csv(&layerwise_norms(tv, &pattern), &mut buf).map_err(|e| err(&e))?;
        let path = diag_dir.join(format!("layer_norms_{label}.csv"));
        crate::atomic::write_atomic(&path, &buf).map_err(io_err(&path))?;
        let ratios = modulewise_activation(tv, 1.0, &rules).map_err(|e| err(&e))?;
        let mut buf = Vec::new();
        write_module_activation_csv(1.0, &ratios, &mut buf).map_err(|e| err(&e))?;
        let path = diag_dir.join(format!("module_activation_{label}.csv"));
        crate::atomic::write_atomic(&path, &buf).map_err(io_err(&path))?;
    }
    Ok((
        tau_sft,
        tau_rlvr,
        DiagnosticsSummary {
            sft: sft_summary,
            rlvr: rlvr_summary,
            interference,
        },
    ))
}

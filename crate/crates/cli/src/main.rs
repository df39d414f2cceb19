use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use tvsynth_core::atomic::write_atomic;
use tvsynth_core::diagnostics::{
    default_module_rules, interference_sweep, layerwise_norms, modulewise_activation, parse_rules_json,
    sign_interference, write_interference_csv, write_layer_norms_csv, write_module_activation_csv, LayerPattern,
    DEFAULT_LAYER_PATTERN,
};
use tvsynth_core::pipeline::{self, PipelineConfig, RunControl, RunReport, RunStatus, REPORT_FILE};
use tvsynth_core::task_vector::{
    self, extract_task_vector, load_task_vector, save_task_vector, sparsify_scoped, DtypePolicy, QuantileMode,
    QuantileScope,
};
use tvsynth_core::{Dtype, Metadata, TensorArchive};

#[derive(Parser)]
#[command(
    name = "tvsynth",
    version,
    about = "Build, inspect and merge task vectors; search merge coefficients without labels"
)]
struct Cli {
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Difference between a fine-tuned checkpoint and its base.
    Extract {
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        finetuned: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Storage dtype of the task vector.
        #[arg(long, default_value = "F64")]
        dtype: Dtype,
        /// Accept tensors whose dtype differs between the two checkpoints.
        #[arg(long)]
        allow_mixed_dtypes: bool,
    },
    /// Keep the largest-magnitude fraction of a task vector, then rescale.
    Sparsify {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Fraction of entries to keep.
        #[arg(long, default_value_t = 0.30)]
        retain: f64,
        #[arg(long, default_value_t = 1e-8)]
        epsilon: f64,
        #[arg(long, value_enum, default_value_t = ModeArg::Exact)]
        mode: ModeArg,
        #[arg(long, value_enum, default_value_t = ScopeArg::Global)]
        scope: ScopeArg,
        /// Skip the norm-restoring rescale.
        #[arg(long)]
        no_rescale: bool,
        #[arg(long, default_value = "F64")]
        dtype: Dtype,
    },
    /// Base checkpoint plus weighted task vectors.
    Merge {
        #[arg(long)]
        base: PathBuf,
        /// `PATH=LAMBDA`, repeatable.
        #[arg(long = "term", required = true, value_parser = parse_term)]
        terms: Vec<(PathBuf, f64)>,
        #[arg(long)]
        out: PathBuf,
        /// Output dtype; defaults to each base tensor's dtype.
        #[arg(long)]
        dtype: Option<Dtype>,
    },
    /// Diagnostics over task vectors, written as CSV.
    #[command(subcommand)]
    Analyze(Analyze),
    /// Score query difficulty and select the adaptation set.
    SelectData(ConfigArgs),
    /// Run the coefficient search and pick a model, without writing it.
    Search(RunArgs),
    /// Run every stage and write the merged checkpoint.
    Run(RunArgs),
    /// Summarize a finished or stopped run.
    Report {
        /// Workspace directory or report file.
        path: PathBuf,
        /// Print the raw JSON report.
        #[arg(long)]
        json: bool,
    },
}

#[derive(Subcommand)]
enum Analyze {
    /// L2 norm per transformer layer.
    Norms {
        #[arg(long)]
        tv: PathBuf,
        /// Regex whose first capture group is the layer index.
        #[arg(long, default_value = DEFAULT_LAYER_PATTERN)]
        pattern: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sign conflicts of A over the retained support of B.
    SignInterference {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[arg(long, default_value_t = 1.0)]
        retain_a: f64,
        #[arg(long, default_value_t = 1.0)]
        retain_b: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sign interference across several retentions of A.
    Sweep {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        /// Comma-separated retentions for A.
        #[arg(long, value_delimiter = ',', default_value = "1.0,0.5,0.3,0.1")]
        retain_a: Vec<f64>,
        #[arg(long, default_value_t = 1.0)]
        retain_b: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Share of each module class among retained entries.
    Modules {
        #[arg(long)]
        tv: PathBuf,
        #[arg(long, default_value_t = 0.30)]
        retain: f64,
        /// JSON rule table replacing the built-in one.
        #[arg(long)]
        rules: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct ConfigArgs {
    #[arg(long)]
    config: PathBuf,
    /// Override a config field, e.g. `--set search.tpe.n_trials=50`.
    #[arg(long = "set", value_name = "PATH=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Reuse artifacts and the trial log already in the workspace.
    #[arg(long)]
    resume: bool,
    /// Stop once this many trials have been recorded.
    #[arg(long)]
    stop_after: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Exact,
    Streaming,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScopeArg {
    Global,
    PerTensor,
}

fn parse_term(s: &str) -> std::result::Result<(PathBuf, f64), String> {
    let (path, lambda) = s.rsplit_once('=').ok_or("expected PATH=LAMBDA")?;
    let lambda: f64 = lambda.parse().map_err(|e| format!("bad coefficient {lambda:?}: {e}"))?;
    if path.is_empty() {
        return Err("empty path".into());
    }
    Ok((PathBuf::from(path), lambda))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Extract {
            base,
            finetuned,
            out,
            dtype,
            allow_mixed_dtypes,
        } => {
            let base = open(&base)?;
            let ft = open(&finetuned)?;
            let policy = if allow_mixed_dtypes {
                DtypePolicy::Allow
            } else {
                DtypePolicy::Require
            };
            let tv = extract_task_vector(&base, &ft, policy)?;
            save_task_vector(&tv, &out, dtype)?;
            println!(
                "{} parameters, L2 norm {}",
                tv.num_parameters(),
                task_vector::global_l2_norm(&tv)
            );
        }
        Command::Sparsify {
            input,
            out,
            retain,
            epsilon,
            mode,
            scope,
            no_rescale,
            dtype,
        } => {
            let tv = load_task_vector(&input)?;
            let mode = match mode {
                ModeArg::Exact => QuantileMode::Exact,
                ModeArg::Streaming => QuantileMode::Streaming,
            };
            let scope = match scope {
                ScopeArg::Global => QuantileScope::Global,
                ScopeArg::PerTensor => QuantileScope::PerTensor,
            };
            let sparse = sparsify_scoped(&tv, retain, mode, scope)?;
            let result = if no_rescale {
                sparse
            } else {
                let original = sparse.sparsity.as_ref().map(|s| s.original_norm).unwrap_or(0.0);
                let rescaled = task_vector::rescale(&sparse, original, epsilon)?;
                if let Some(w) = rescaled.warning {
                    log::warn!("{w:?}");
                }
                rescaled.vector
            };
            save_task_vector(&result, &out, dtype)?;
            let info = result
                .sparsity
                .as_ref()
                .expect("sparsified vector carries sparsity info");
            println!(
                "kept {} of {} entries, threshold {}, gamma {}",
                info.retained_count,
                result.num_parameters(),
                info.threshold,
                info.rescale_gamma
            );
        }
        Command::Merge {
            base,
            terms,
            out,
            dtype,
        } => {
            let base = open(&base)?;
            let vectors = terms
                .iter()
                .map(|(p, _)| load_task_vector(p).with_context(|| format!("loading {}", p.display())))
                .collect::<Result<Vec<_>>>()?;
            let pairs: Vec<_> = vectors.iter().zip(&terms).map(|(tv, (_, l))| (tv, *l)).collect();
            let mut metadata = Metadata::new();
            let recipe: Vec<_> = terms
                .iter()
                .map(|(p, l)| serde_json::json!({"task_vector": p, "lambda": l}))
                .collect();
            metadata.insert("merge_terms".into(), serde_json::to_string(&recipe)?);
            let merged = task_vector::merge(&base, &pairs, &out, dtype, Some(&metadata))?;
            println!("wrote {} tensors to {}", merged.len(), out.display());
        }
        Command::Analyze(a) => analyze(a)?,
        Command::SelectData(args) => {
            let config = load_config(&args)?;
            let set = pipeline::select_data(&config)?;
            println!(
                "selected {} queries ({} low, {} medium, {} backfilled, {} discarded)",
                set.selected.len(),
                set.selected_low,
                set.selected_medium,
                set.backfill,
                set.discarded_ids.len()
            );
        }
        Command::Search(args) => {
            let report = run_pipeline(&args, true)?;
            print_summary(&report, &mut std::io::stdout())?;
        }
        Command::Run(args) => {
            let report = run_pipeline(&args, false)?;
            print_summary(&report, &mut std::io::stdout())?;
        }
        Command::Report { path, json } => {
            let file = if path.is_dir() { path.join(REPORT_FILE) } else { path };
            let text = std::fs::read_to_string(&file).with_context(|| format!("reading {}", file.display()))?;
            let report: RunReport =
                serde_json::from_str(&text).with_context(|| format!("parsing {}", file.display()))?;
            if json {
                println!("{}", serde_json::to_string_pretty(&report)?);
            } else {
                print_summary(&report, &mut std::io::stdout())?;
            }
        }
    }
    Ok(())
}

fn analyze(cmd: Analyze) -> Result<()> {
    let mut buf = Vec::new();
    let out = match cmd {
        Analyze::Norms { tv, pattern, out } => {
            let tv = load_task_vector(&tv)?;
            let pattern = LayerPattern::new(&pattern)?;
            write_layer_norms_csv(&layerwise_norms(&tv, &pattern), &mut buf)?;
            out
        }
        Analyze::SignInterference {
            a,
            b,
            retain_a,
            retain_b,
            out,
        } => {
            let report = sign_interference(&load_task_vector(&a)?, &load_task_vector(&b)?, retain_a, retain_b)?;
            write_interference_csv(&[report], &mut buf)?;
            out
        }
        Analyze::Sweep {
            a,
            b,
            retain_a,
            retain_b,
            out,
        } => {
            let reports = interference_sweep(&load_task_vector(&a)?, &load_task_vector(&b)?, &retain_a, retain_b)?;
            write_interference_csv(&reports, &mut buf)?;
            out
        }
        Analyze::Modules { tv, retain, rules, out } => {
            let rules = match rules {
                Some(p) => {
                    parse_rules_json(&std::fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?)
                        .with_context(|| format!("parsing {}", p.display()))?
                }
                None => default_module_rules(),
            };
            let ratios = modulewise_activation(&load_task_vector(&tv)?, retain, &rules)?;
            write_module_activation_csv(retain, &ratios, &mut buf)?;
            out
        }
    };
    match out {
        Some(path) => write_atomic(&path, &buf).with_context(|| format!("writing {}", path.display()))?,
        None => std::io::stdout().write_all(&buf)?,
    }
    Ok(())
}

fn open(path: &Path) -> Result<TensorArchive> {
    TensorArchive::open(path).with_context(|| format!("opening {}", path.display()))
}

fn load_config(args: &ConfigArgs) -> Result<PipelineConfig> {
    Ok(PipelineConfig::load(&args.config, &args.overrides)?)
}

fn run_pipeline(args: &RunArgs, skip_merge: bool) -> Result<RunReport> {
    let config = load_config(&args.config)?;
    if args.stop_after == Some(0) {
        bail!("--stop-after must be at least 1");
    }
    let control = RunControl {
        resume: args.resume,
        stop_after_trials: args.stop_after,
        skip_merge,
    };
    let report = pipeline::run_pipeline(&config, &control)?;
    if let Some(path) = &report.search_result {
        log::info!("search result written to {}", path.display());
    }
    Ok(report)
}

fn print_summary(report: &RunReport, out: &mut impl Write) -> Result<()> {
    match &report.status {
        RunStatus::Completed => writeln!(out, "status: completed")?,
        RunStatus::Stopped { trials } => writeln!(out, "status: stopped after {trials} trials")?,
    }
    if let Some(a) = &report.adaptation {
        writeln!(
            out,
            "adaptation set: {} queries ({} low, {} medium), {} discarded, {} failed",
            a.selected.len(),
            a.selected_low,
            a.selected_medium,
            a.discarded,
            a.failed_queries
        )?;
    }
    if let Some(d) = &report.diagnostics {
        for (label, v) in [("sft", &d.sft), ("rlvr", &d.rlvr)] {
            writeln!(
                out,
                "{label} task vector: {} of {} kept, norm {:.6} -> {:.6}, gamma {:.6}",
                v.retained, v.parameters, v.original_norm, v.final_norm, v.gamma
            )?;
        }
        writeln!(out, "sign conflict ratio: {:.6}", d.interference.conflict_ratio)?;
    }
    if let Some(t) = &report.selected_trial {
        writeln!(
            out,
            "selected trial {}: consistency {:.4}, perplexity {:.4}",
            t.index,
            t.consistency.unwrap_or(f64::NAN),
            t.perplexity.unwrap_or(f64::NAN)
        )?;
    }
    if let Some([a, b]) = report.coefficients {
        writeln!(out, "coefficients: lambda_sft={a} lambda_rlvr={b}")?;
    }
    if let (Some(path), Some(digest)) = (&report.output, &report.output_digest) {
        writeln!(out, "output: {} (sha256 {digest})", path.display())?;
    }
    for s in &report.stages {
        writeln!(
            out,
            "stage {}: {:.3}s{}",
            s.stage,
            s.seconds,
            if s.reused { " (reused)" } else { "" }
        )?;
    }
    Ok(())
}

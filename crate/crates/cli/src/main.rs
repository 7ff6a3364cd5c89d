//! `zoedit`: train the toy subject model, calibrate and quantize it, edit it
//! with forward passes only, and measure the result.
//!
//! Exit codes:
//!
//! | code | meaning |
//! |------|---------|
//! | 0 | success |
//! | 1 | `edit` finished without success, or `eval` missed a configured threshold |
//! | 2 | invalid arguments or configuration |
//! | 3 | unreadable or malformed input (missing paths, bad checkpoint, bad dataset line) |
//! | 4 | the run itself failed (non-finite values, divergence, singular covariance, ...) |
//!
//! Failures print one JSON object on stderr:
//! `{"error": {"kind": "input", "field": "model", "message": "..."}, "exit_code": 3}`.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use zoedit_core::memtrack::TrackingAllocator;
use zoedit_core::Error;

#[global_allocator]
static ALLOC: TrackingAllocator = TrackingAllocator;

#[derive(Debug, Parser)]
#[command(name = "zoedit", version, about = "Forward-only knowledge editing on small transformers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    opts: Opts,
}

#[derive(Debug, Clone, Copy, Subcommand)]
enum Command {
    /// Generate the synthetic fact world and train the toy model on it.
    TrainToy,
    /// Record per-site activation ranges over the corpus.
    Calibrate,
    /// Write a W8A16 copy of the model with the edit layer kept in f32.
    Quantize,
    /// Apply one edit from the dataset.
    Edit,
    /// Score edits: an already edited checkpoint, or a fresh edit per case.
    Eval,
    /// Run the suite once per optimization variant.
    Ablate,
    /// Gradient-estimator variance sweep on noisy linear chains.
    Noiselab,
    /// Peak heap of an edit against one reference-trainer step.
    Memstat,
}

#[derive(Debug, Clone, Args)]
struct Opts {
    /// JSON run configuration.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    /// Override any config field, e.g. `--set zo.mu=1e-3`. Repeatable.
    #[arg(long = "set", short = 's', value_name = "KEY=VALUE", global = true)]
    sets: Vec<String>,
    /// Output directory.
    #[arg(long, env = "ZOEDIT_OUT_DIR", global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Upper bound on worker threads.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[arg(long, global = true)]
    model: Option<PathBuf>,
    #[arg(long, global = true)]
    dataset: Option<PathBuf>,
    #[arg(long, global = true)]
    vocab: Option<PathBuf>,
    #[arg(long, global = true)]
    corpus: Option<PathBuf>,
    #[arg(long, global = true)]
    prefixes: Option<PathBuf>,
    #[arg(long, global = true)]
    calibration: Option<PathBuf>,
    #[arg(long, global = true)]
    edited: Option<PathBuf>,
    #[arg(long, global = true)]
    edit_layer: Option<usize>,
    /// Dataset line to edit.
    #[arg(long, global = true)]
    case: Option<usize>,
    #[arg(long, global = true)]
    max_cases: Option<usize>,
    #[arg(long, global = true)]
    max_steps: Option<usize>,
    #[arg(long, global = true)]
    n_directions: Option<usize>,
    #[arg(long, global = true)]
    no_early_stop: bool,
    #[arg(long, global = true)]
    no_prefix_cache: bool,
    /// Training steps for `train-toy`.
    #[arg(long, global = true)]
    steps: Option<usize>,
    #[arg(long, global = true)]
    n_facts: Option<usize>,
    /// Trials per depth for `noiselab`.
    #[arg(long, global = true)]
    trials: Option<usize>,
    #[arg(long, value_delimiter = ',', global = true)]
    depths: Option<Vec<usize>>,
    /// JSON mixed-precision policy for `quantize`.
    #[arg(long, global = true)]
    policy: Option<PathBuf>,
    #[arg(long, global = true)]
    min_success: Option<f64>,
    #[arg(long, global = true)]
    min_locality: Option<f64>,
    #[arg(long, global = true)]
    min_portability: Option<f64>,
    /// Comma-separated ablation variants.
    #[arg(long, value_delimiter = ',', global = true)]
    variants: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CliError {
    #[serde(skip)]
    pub code: u8,
    pub kind: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub field: Option<String>,
    pub message: String,
}

impl CliError {
    fn new(code: u8, kind: &'static str, field: Option<&str>, message: impl Into<String>) -> Self {
        CliError { code, kind, field: field.map(String::from), message: message.into() }
    }

    pub fn config(field: &str, message: impl Into<String>) -> Self {
        Self::new(2, "config", Some(field), message)
    }

    pub fn input(field: &str, message: impl Into<String>) -> Self {
        Self::new(3, "input", Some(field), message)
    }

    /// Classifies a library error; `field` names the input being processed.
    pub fn from_core(field: Option<&str>, e: Error) -> Self {
        let message = e.to_string();
        match e {
            Error::Config(_) => Self::new(2, "config", field, message),
            Error::Input(_)
            | Error::Parse { .. }
            | Error::Io(_)
            | Error::Json(_)
            | Error::Format(_)
            | Error::UnsupportedVersion(_) => Self::new(3, "input", field, message),
            _ => Self::new(4, "runtime", field, message),
        }
    }
}

#[derive(Serialize)]
struct ErrorEnvelope<'a> {
    error: &'a CliError,
    exit_code: u8,
}

fn apply_flags(c: &mut config::RunConfig, o: &Opts) -> Result<(), CliError> {
    let paths = [
        (&mut c.model, &o.model),
        (&mut c.dataset, &o.dataset),
        (&mut c.vocab, &o.vocab),
        (&mut c.corpus, &o.corpus),
        (&mut c.prefixes, &o.prefixes),
        (&mut c.calibration, &o.calibration),
        (&mut c.edited, &o.edited),
    ];
    for (slot, flag) in paths {
        if flag.is_some() {
            slot.clone_from(flag);
        }
    }
    if let Some(p) = &o.out {
        c.output_dir = p.clone();
    }
    c.seed = o.seed.or(c.seed);
    c.threads = o.threads.unwrap_or(c.threads);
    c.edit_layer = o.edit_layer.unwrap_or(c.edit_layer);
    c.case = o.case.unwrap_or(c.case);
    c.max_cases = o.max_cases.or(c.max_cases);
    c.zo.max_steps = o.max_steps.unwrap_or(c.zo.max_steps);
    c.zo.n_directions = o.n_directions.unwrap_or(c.zo.n_directions);
    c.zo.early_stop &= !o.no_early_stop;
    c.zo.prefix_cache &= !o.no_prefix_cache;
    c.train.steps = o.steps.unwrap_or(c.train.steps);
    c.toy.n_facts = o.n_facts.unwrap_or(c.toy.n_facts);
    c.noise.trials = o.trials.unwrap_or(c.noise.trials);
    if let Some(d) = &o.depths {
        c.noise.depths.clone_from(d);
    }
    if let Some(v) = &o.variants {
        c.variants.clone_from(v);
    }
    let t = &mut c.thresholds;
    t.edit_success = o.min_success.or(t.edit_success);
    t.locality = o.min_locality.or(t.locality);
    t.portability = o.min_portability.or(t.portability);
    if let Some(p) = &o.policy {
        let text = std::fs::read_to_string(p)
            .map_err(|e| CliError::input("policy", format!("cannot read {}: {e}", p.display())))?;
        c.policy = Some(serde_json::from_str(&text).map_err(|e| CliError::config("policy", e.to_string()))?);
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<u8, CliError> {
    let mut cfg = config::load(cli.opts.config.as_deref(), &cli.opts.sets)?;
    apply_flags(&mut cfg, &cli.opts)?;
    cfg.validate()?;
    std::fs::create_dir_all(&cfg.output_dir)
        .map_err(|e| CliError::input("output_dir", format!("cannot create {}: {e}", cfg.output_dir.display())))?;
    match cli.command {
        Command::TrainToy => commands::train_toy(&cfg),
        Command::Calibrate => commands::calibrate(&cfg),
        Command::Quantize => commands::quantize(&cfg),
        Command::Edit => commands::edit(&cfg),
        Command::Eval => commands::eval(&cfg),
        Command::Ablate => commands::ablate(&cfg),
        Command::Noiselab => commands::noiselab(&cfg),
        Command::Memstat => commands::memstat(&cfg),
    }
}

fn main() -> ExitCode {
    let result = match Cli::try_parse() {
        Ok(cli) => run(&cli),
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => Err(CliError::new(2, "usage", None, e.to_string().trim_end())),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            let envelope = ErrorEnvelope { error: &e, exit_code: e.code };
            eprintln!("{}", serde_json::to_string(&envelope).expect("error serializes"));
            ExitCode::from(e.code)
        }
    }
}

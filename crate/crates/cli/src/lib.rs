//! Experiment runner behind the `mfgkit` binary.
//!
//! ```text
//! mfgkit <subcommand> --config <file> --out <dir> [--seed N] [--jobs N]
//! ```
//!
//! Exit codes: 0 success, 1 a check missed its tolerance or output failed,
//! 2 validation error, 3 non-convergence, 4 inconclusive study.

pub mod commands;
pub mod config;
pub mod output;

use clap::{Parser, Subcommand};
use commands::Status;
use config::Config;
use mfgkit_core::Error;
use output::{config_hash, Artifacts, RunManifest};
use serde::Serialize;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_NONCONVERGENCE: i32 = 3;
pub const EXIT_INCONCLUSIVE: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "mfgkit", version, about = "Mean-field-game solver and interacting-particle simulator")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Forward kinetic equation.
    SolveKinetic(RunArgs),
    /// Backward mild HJB equation on a grid.
    SolveHjb(RunArgs),
    /// Mean-field fixed point from several starts.
    SolveMfg(RunArgs),
    /// One replica of an N-agent system.
    Simulate(RunArgs),
    /// Bias of N-agent functionals against the kinetic limit.
    LlnStudy(RunArgs),
    /// Nash gap of the mean-field policy in N-player games.
    NashGap(RunArgs),
    /// First and second order sensitivities with finite-difference cross-checks.
    Sensitivity(RunArgs),
    /// Kinetic solver against matrix-exponential and closed-form solutions.
    OracleCheck(RunArgs),
}

#[derive(Debug, clap::Args)]
pub struct RunArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long)]
    pub jobs: Option<usize>,
}

impl Command {
    pub fn split(&self) -> (&'static str, &RunArgs) {
        match self {
            Command::SolveKinetic(a) => ("solve-kinetic", a),
            Command::SolveHjb(a) => ("solve-hjb", a),
            Command::SolveMfg(a) => ("solve-mfg", a),
            Command::Simulate(a) => ("simulate", a),
            Command::LlnStudy(a) => ("lln-study", a),
            Command::NashGap(a) => ("nash-gap", a),
            Command::Sensitivity(a) => ("sensitivity", a),
            Command::OracleCheck(a) => ("oracle-check", a),
        }
    }
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::NonConvergence { .. } | Error::Contraction { .. } => EXIT_NONCONVERGENCE,
        _ => EXIT_VALIDATION,
    }
}

#[derive(Serialize)]
struct Failure {
    error: String,
    residuals: Vec<f64>,
}

fn write_all(dir: &Path, arts: &Artifacts, manifest: &mut RunManifest) -> std::io::Result<()> {
    fs::create_dir_all(dir)?;
    for (name, body) in &arts.files {
        fs::write(dir.join(name), body)?;
        manifest.files.push(name.clone());
    }
    manifest.finished = now();
    fs::write(dir.join("manifest.json"), output::to_json(manifest))
}

/// Runs one subcommand and returns the process exit code. Diagnostics go to standard error.
pub fn run(cmd: &str, args: &RunArgs) -> i32 {
    let started = now();
    let raw = match fs::read(&args.config) {
        Ok(b) => b,
        Err(e) => {
            eprintln!("error: cannot read {}: {e}", args.config.display());
            return EXIT_VALIDATION;
        }
    };
    let text = match std::str::from_utf8(&raw) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("error: config is not UTF-8: {e}");
            return EXIT_VALIDATION;
        }
    };
    let mut cfg = match Config::parse(text) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_VALIDATION;
        }
    };
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Err(e) = cfg.validate_for(cmd) {
        eprintln!("error: {e}");
        return EXIT_VALIDATION;
    }
    if let Some(j) = args.jobs {
        if j == 0 {
            eprintln!("error: --jobs must be positive");
            return EXIT_VALIDATION;
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(j).build_global() {
            log::warn!("thread pool already initialised: {e}");
        }
    }
    log::info!("{cmd}: config {} seed {}", args.config.display(), cfg.seed);

    let mut manifest = RunManifest {
        subcommand: cmd.to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        config_hash: config_hash(&raw),
        seed: cfg.seed,
        seed_overridden: args.seed.is_some(),
        jobs: args.jobs,
        started,
        finished: started,
        exit_code: EXIT_OK,
        files: Vec::new(),
    };
    let (arts, code) = match commands::execute(cmd, &cfg) {
        Ok((arts, Status::Done)) => (arts, EXIT_OK),
        Ok((arts, Status::Inconclusive(msg))) => {
            eprintln!("inconclusive: {msg}");
            (arts, EXIT_INCONCLUSIVE)
        }
        Ok((arts, Status::CheckFailed(msg))) => {
            eprintln!("check failed: {msg}");
            (arts, EXIT_FAILURE)
        }
        Err(e) => {
            eprintln!("error: {e}");
            let code = exit_code(&e);
            if code != EXIT_NONCONVERGENCE {
                return code;
            }
            let residuals = match &e {
                Error::NonConvergence { residuals, .. } | Error::Contraction { residuals, .. } => residuals.clone(),
                _ => Vec::new(),
            };
            let mut arts = Artifacts::default();
            arts.json("failure.json", &Failure { error: e.to_string(), residuals });
            (arts, code)
        }
    };
    manifest.exit_code = code;
    if let Err(e) = write_all(&args.out, &arts, &mut manifest) {
        eprintln!("error: cannot write artifacts to {}: {e}", args.out.display());
        return EXIT_FAILURE;
    }
    code
}

/// Parses the command line, sets up logging from `MFGKIT_LOG` and runs.
pub fn main_entry() -> i32 {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("MFGKIT_LOG", "warn")).init();
    let cli = Cli::parse();
    let (cmd, args) = cli.command.split();
    run(cmd, args)
}

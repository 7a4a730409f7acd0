//! Command-line front end: config ingestion, run orchestration and result
//! files for the shelllab experiments.
//!
//! Exit codes: 0 success, 1 usage, 2 config error, 3 runtime error
//! (blow-up, numerical or I/O failure), 4 inconclusive statistics. Errors
//! are printed to stderr as one JSON object.

pub mod config;
mod commands;
mod output;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand};
use serde::Serialize;

use config::{Kind, Overrides, RunConfig, OUTPUT_DIR_ENV};

#[derive(Debug, Parser)]
#[command(name = "shelllab", version, about = "Shell models driven by pure-jump Lévy noise")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, clap::Args)]
pub struct CommonArgs {
    /// TOML run config; omitted means every default.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Master seed (overrides the config).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory (overrides the config and SHELLLAB_OUTPUT_DIR).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Worker threads (overrides the config).
    #[arg(long)]
    pub workers: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Integrate one path and dump the trajectory.
    Simulate(CommonArgs),
    /// Compare BEL gradients with finite differences.
    BelCheck(CommonArgs),
    /// Two-ensemble Kolmogorov–Smirnov convergence probe.
    Ergodicity(CommonArgs),
    /// Structural checks and small-deviation probe of the noise.
    NoiseCheck(CommonArgs),
    /// Galerkin refinement distances on shared noise.
    Refine(CommonArgs),
}

impl Command {
    fn parts(&self) -> (Kind, &CommonArgs) {
        match self {
            Command::Simulate(a) => (Kind::Simulate, a),
            Command::BelCheck(a) => (Kind::BelCheck, a),
            Command::Ergodicity(a) => (Kind::Ergodicity, a),
            Command::NoiseCheck(a) => (Kind::NoiseCheck, a),
            Command::Refine(a) => (Kind::Refine, a),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum CliError {
    Config(Vec<String>),
    Runtime(String),
    Inconclusive(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 3,
            CliError::Inconclusive(_) => 4,
        }
    }

    /// Machine-readable payload printed to stderr.
    pub fn payload(&self) -> String {
        #[derive(Serialize)]
        struct Payload<'a> {
            error: &'a str,
            exit_code: i32,
            message: String,
            #[serde(skip_serializing_if = "Option::is_none")]
            violations: Option<&'a [String]>,
        }
        let (error, message, violations) = match self {
            CliError::Config(v) => ("config", v.join("; "), Some(v.as_slice())),
            CliError::Runtime(m) => ("runtime", m.clone(), None),
            CliError::Inconclusive(m) => ("inconclusive", m.clone(), None),
        };
        serde_json::to_string(&Payload { error, exit_code: self.exit_code(), message, violations }).expect("payload serializes")
    }
}

impl From<shelllab::Error> for CliError {
    fn from(e: shelllab::Error) -> Self {
        use shelllab::Error as E;
        match e {
            E::Config(v) => CliError::Config(v),
            E::Inconclusive(m) => CliError::Inconclusive(m),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(format!("i/o: {e}"))
    }
}

/// Loads the config for a subcommand, honouring flag and environment overrides.
pub fn load_config(kind: Kind, args: &CommonArgs) -> Result<RunConfig, CliError> {
    let text = match &args.config {
        Some(p) => std::fs::read_to_string(p).map_err(|e| CliError::Config(vec![format!("cannot read {}: {e}", p.display())]))?,
        None => String::new(),
    };
    let overrides = Overrides { seed: args.seed, output_dir: args.out.clone(), workers: args.workers };
    let env = std::env::var_os(OUTPUT_DIR_ENV).filter(|v| !v.is_empty()).map(PathBuf::from);
    RunConfig::load(&text, kind, &overrides, env)
}

/// Runs a resolved config: writes the manifest and result files and
/// returns the human-readable summary.
pub fn execute(cfg: &RunConfig) -> Result<String, CliError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| CliError::Runtime(format!("worker pool: {e}")))?;
    std::fs::create_dir_all(&cfg.output_dir)?;
    output::write_text(&cfg.output_dir.join("manifest.toml"), &cfg.manifest())?;
    let summary = pool.install(|| commands::dispatch(cfg))?;
    output::write_text(&cfg.output_dir.join("summary.txt"), &summary)?;
    Ok(summary)
}

/// Entry point shared by the binary and the tests; returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let (kind, common) = cli.command.parts();
    match load_config(kind, common).and_then(|cfg| execute(&cfg)) {
        Ok(summary) => {
            print!("{summary}");
            0
        }
        Err(e) => {
            eprintln!("{}", e.payload());
            e.exit_code()
        }
    }
}

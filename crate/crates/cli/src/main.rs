//! Command-line driver: quantile-table fits, parameter estimation,
//! quantization, scenario-tree construction, tree distances, and the
//! budget-allocation solver with robust and sweep variants.
//!
//! Exit codes: 0 success, 2 input error, 3 validation failure,
//! 4 solver failure.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

mod commands;
mod config;

use commands::{Emitted, SolveArgs, SweepKind};
use floodscen::distributions::FitFamily;

#[derive(Debug)]
pub enum CliError {
    Input(String),
    Validation(String),
    Solver(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Input(_) => 2,
            CliError::Validation(_) => 3,
            CliError::Solver(_) => 4,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Input(m) | CliError::Validation(m) | CliError::Solver(m) => m,
        }
    }
}

#[derive(Parser)]
#[command(name = "floodscen", version, about = "Scenario-tree quantization and budget-allocation solver")]
struct Cli {
    /// Flat key=value run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed override; all randomness flows through this single value.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (0 = automatic).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    /// Output directory for artifacts.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum FamilyArg {
    Frechet,
    Weibull,
    Gumbel,
}

impl From<FamilyArg> for FitFamily {
    fn from(f: FamilyArg) -> Self {
        match f {
            FamilyArg::Frechet => FitFamily::Frechet,
            FamilyArg::Weibull => FitFamily::Weibull,
            FamilyArg::Gumbel => FitFamily::Gumbel,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SweepKindArg {
    Load,
    Theta,
}

impl From<SweepKindArg> for SweepKind {
    fn from(k: SweepKindArg) -> Self {
        match k {
            SweepKindArg::Load => SweepKind::Load,
            SweepKindArg::Theta => SweepKind::Theta,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Fit an extreme-value quantile curve to a probability/loss table.
    Fit {
        /// CSV with header `probability,loss`.
        #[arg(long)]
        table: PathBuf,
        #[arg(long, value_enum, default_value_t = FamilyArg::Frechet)]
        family: FamilyArg,
        /// Probability of no loss attached to the table.
        #[arg(long, default_value_t = 0.6779)]
        pnl: f64,
    },
    /// Estimate Frechet parameters from a sample (three-point method).
    Estimate {
        /// CSV with header `value`; defaults to the configured base sample.
        #[arg(long)]
        sample: Option<PathBuf>,
    },
    /// Quantize the configured base distribution into n points.
    Quantize {
        #[arg(long)]
        n: usize,
    },
    /// Build and validate a scenario tree from the configuration.
    Tree,
    /// Nested distance and stage-wise bound between two tree files.
    Distance {
        #[arg(long)]
        tree_a: PathBuf,
        #[arg(long)]
        tree_b: PathBuf,
    },
    /// Solve the budget-allocation program on a scenario tree.
    Solve {
        /// Load a tree file instead of building one.
        #[arg(long)]
        tree: Option<PathBuf>,
        /// Robust solve with the given risk budget.
        #[arg(long)]
        robust: Option<f64>,
        /// Also run a sweep of the given kind.
        #[arg(long, value_enum)]
        sweep: Option<SweepKindArg>,
        /// Comma list of sweep values.
        #[arg(long, value_delimiter = ',')]
        values: Vec<f64>,
    },
    /// Sweep the insurance load or the risk budget.
    Sweep {
        #[arg(long)]
        tree: Option<PathBuf>,
        #[arg(long, value_enum)]
        kind: SweepKindArg,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
    },
}

#[derive(Serialize)]
struct RunManifest {
    command: String,
    version: String,
    seed: u64,
    config: BTreeMap<String, String>,
    artifacts: Vec<String>,
    wall_clock_ms: u128,
}

fn write_manifest(
    out: &Path,
    command: &str,
    seed: u64,
    snapshot: &BTreeMap<String, String>,
    emitted: &Emitted,
    started: Instant,
) -> Result<(), CliError> {
    let manifest = RunManifest {
        command: command.to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        seed,
        config: snapshot.clone(),
        // listed relative to the output directory so manifests relocate
        artifacts: emitted
            .artifacts
            .iter()
            .map(|p| {
                p.strip_prefix(out)
                    .unwrap_or(p)
                    .display()
                    .to_string()
            })
            .collect(),
        wall_clock_ms: started.elapsed().as_millis(),
    };
    let text = serde_json::to_string_pretty(&manifest)
        .map_err(|e| CliError::Input(format!("manifest serialization: {e}")))?;
    std::fs::write(out.join("manifest.json"), text + "\n")
        .map_err(|e| CliError::Input(format!("cannot write manifest: {e}")))
}

fn run(cli: Cli) -> Result<(), CliError> {
    if cli.threads > 0 {
        // a pre-initialized global pool is fine; per-process setting only
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build_global();
    }
    let started = Instant::now();
    let mut settings = config::load(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        settings.flood.seed = seed;
        settings.snapshot.insert("seed".into(), seed.to_string());
    }
    let out = &cli.out;
    let (name, emitted) = match &cli.command {
        Command::Fit { table, family, pnl } => (
            "fit",
            commands::cmd_fit(table, (*family).into(), *pnl, out)?,
        ),
        Command::Estimate { sample } => (
            "estimate",
            commands::cmd_estimate(&settings, sample.as_deref(), out)?,
        ),
        Command::Quantize { n } => ("quantize", commands::cmd_quantize(&settings, *n, out)?),
        Command::Tree => ("tree", commands::cmd_tree(&settings, out)?),
        Command::Distance { tree_a, tree_b } => {
            ("distance", commands::cmd_distance(tree_a, tree_b, out)?)
        }
        Command::Solve {
            tree,
            robust,
            sweep,
            values,
        } => {
            let sweep = match sweep {
                Some(kind) => {
                    if values.is_empty() {
                        return Err(CliError::Input("--sweep requires --values".into()));
                    }
                    Some(((*kind).into(), values.clone()))
                }
                None => None,
            };
            (
                "solve",
                commands::cmd_solve(SolveArgs {
                    settings: &settings,
                    tree_path: tree.as_deref(),
                    robust_theta: *robust,
                    sweep,
                    out,
                })?,
            )
        }
        Command::Sweep { tree, kind, values } => (
            "sweep",
            commands::cmd_sweep(&settings, tree.as_deref(), (*kind).into(), values, out)?,
        ),
    };
    write_manifest(out, name, settings.flood.seed, &settings.snapshot, &emitted, started)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.exit_code())
        }
    }
}

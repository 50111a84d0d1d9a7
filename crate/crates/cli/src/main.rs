//! `saddle`: saddle searches, index checks, landscapes and table reproductions.

mod bench;
mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use saddle_core::benchmarks::Engine;

use crate::config::{BenchmarkKind, Overrides, RunConfig};
use crate::error::CliError;

#[derive(Parser)]
#[command(name = "saddle", version, about = "Saddle dynamics with direct or learned forces")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Saddle dynamics on the true force.
    Sd(SearchArgs),
    /// Saddle dynamics on a Gaussian-process surrogate inside a trust region.
    Gpsd(SearchArgs),
    /// Downward search from a parent saddle; writes JSON and DOT graphs.
    Landscape(LandscapeArgs),
    /// Morse index of a point from the Jacobian spectrum.
    VerifyIndex(VerifyArgs),
    /// Reproduce a published table and compare.
    Bench(BenchArgs),
}

#[derive(Args, Clone)]
struct ProblemArgs {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    benchmark: Option<BenchmarkKind>,
    /// Benchmark case: i, ii, iii, iv (or 1..4).
    #[arg(long)]
    case: Option<String>,
    #[arg(long, env = "SADDLE_SEED")]
    seed: Option<u64>,
    /// Target index.
    #[arg(long)]
    k: Option<usize>,
    /// Phase-field 1/eta^2.
    #[arg(long)]
    inv_eta_sq: Option<f64>,
    #[arg(long)]
    max_steps: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SearchArgs {
    #[command(flatten)]
    problem: ProblemArgs,
    /// Write trajectory.csv.
    #[arg(long)]
    trajectory: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum EngineArg {
    Sd,
    Gpsd,
}

impl From<EngineArg> for Engine {
    fn from(e: EngineArg) -> Self {
        match e {
            EngineArg::Sd => Engine::Sd,
            EngineArg::Gpsd => Engine::Gpsd,
        }
    }
}

#[derive(Args)]
struct LandscapeArgs {
    #[command(flatten)]
    problem: ProblemArgs,
    #[arg(long, value_enum)]
    engine: Option<EngineArg>,
    /// Parent point as JSON (array, or object with `x_final` or `x`).
    #[arg(long)]
    root: Option<PathBuf>,
    /// Probe every lower index instead of only the next one down.
    #[arg(long)]
    exhaustive: bool,
    /// Worker threads for the probes.
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Args)]
struct VerifyArgs {
    #[command(flatten)]
    problem: ProblemArgs,
    /// Point as JSON (array, or object with `x_final` or `x`).
    #[arg(long, conflicts_with = "x")]
    point: Option<PathBuf>,
    /// Point as a comma-separated list.
    #[arg(long, allow_hyphen_values = true)]
    x: Option<String>,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(value_enum)]
    table: bench::Table,
    /// Seeds per surrogate case.
    #[arg(long, default_value_t = 10)]
    seeds: u64,
    /// Also write bench_<table>.json here.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn overrides(p: &ProblemArgs, engine: Option<Engine>) -> Overrides {
    Overrides {
        benchmark: p.benchmark,
        engine,
        case: p.case.clone(),
        seed: p.seed,
        k: p.k,
        inv_eta_sq: p.inv_eta_sq,
        max_steps: p.max_steps,
        output_dir: p.out.clone(),
        ..Overrides::default()
    }
}

fn dispatch(command: Command) -> Result<(), CliError> {
    match command {
        Command::Sd(a) => search(a, Engine::Sd),
        Command::Gpsd(a) => search(a, Engine::Gpsd),
        Command::Landscape(a) => {
            let cfg = RunConfig::load(a.problem.config.as_deref())?;
            let mut ov = overrides(&a.problem, a.engine.map(Engine::from));
            ov.landscape = true;
            let root = a.root.as_deref().map(commands::read_point).transpose()?;
            commands::landscape(&cfg, &ov, root, a.exhaustive, a.jobs)
        }
        Command::VerifyIndex(a) => {
            let cfg = RunConfig::load(a.problem.config.as_deref())?;
            let point = match (&a.point, &a.x) {
                (Some(path), _) => commands::read_point(path)?,
                (None, Some(list)) => commands::parse_point(list)?,
                (None, None) => return Err(CliError::config("--point", "give --point FILE or --x LIST")),
            };
            commands::verify_index(&cfg, &overrides(&a.problem, None), point)
        }
        Command::Bench(a) => bench::run(a.table, a.seeds, a.out.as_deref()),
    }
}

fn search(a: SearchArgs, engine: Engine) -> Result<(), CliError> {
    let cfg = RunConfig::load(a.problem.config.as_deref())?;
    let mut ov = overrides(&a.problem, Some(engine));
    ov.trajectory = a.trajectory;
    commands::search(&cfg, &ov)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 3 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

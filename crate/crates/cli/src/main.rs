use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mfgms::coarse_solver::CoarseMethod;
use mfgms::config::{Preset, SimulationConfig};
use mfgms::experiment::{build_bases, recompute_errors, run_experiment, run_references, ExperimentOutput, TaskStatus};
use mfgms::msbasis::BasisType;

/// Meshfree multiscale solver with exponential time integration for 3D
/// advection-diffusion in high-contrast media.
#[derive(Debug, Parser)]
#[command(name = "mfgms", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the experiment matrix and write the CSV error table.
    Run(Options),
    /// Build and persist the multiscale projection matrices only.
    Basis(Options),
    /// Run the fine reference solutions only.
    Reference(Options),
    /// Recompute the error table from cached states.
    Errors(Options),
}

#[derive(Debug, Args)]
struct Options {
    /// TOML configuration file; may set `preset`.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Base preset: paper, desk or smoke.
    #[arg(long, value_name = "NAME")]
    preset: Option<Preset>,
    /// Example ids, e.g. 1,7.
    #[arg(long, value_name = "LIST", value_delimiter = ',')]
    examples: Option<Vec<usize>>,
    /// Coarse methods, e.g. fd,ei.
    #[arg(long, value_name = "LIST", value_delimiter = ',')]
    methods: Option<Vec<CoarseMethod>>,
    /// Basis types, e.g. 1,2.
    #[arg(long, value_name = "LIST", value_delimiter = ',')]
    basis_types: Option<Vec<BasisType>>,
    /// Basis functions per coarse point, e.g. 5,10,15,20.
    #[arg(long, value_name = "LIST", value_delimiter = ',')]
    nb: Option<Vec<usize>>,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Seed for the coarse point placement.
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
    /// Worker threads (0 = all cores).
    #[arg(long, value_name = "K")]
    jobs: Option<usize>,
    /// Write VTK dumps of every run.
    #[arg(long)]
    vtk: bool,
    /// Write per-step error traces.
    #[arg(long)]
    trace: bool,
    /// Record wall-clock seconds in the CSV.
    #[arg(long)]
    timings: bool,
    /// Ignore and do not write cached artifacts.
    #[arg(long)]
    no_cache: bool,
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count)]
    verbose: u8,
}

fn resolve(opts: &Options) -> mfgms::Result<SimulationConfig> {
    let mut table = match &opts.config {
        Some(path) => std::fs::read_to_string(path)?
            .parse::<toml::Table>()
            .map_err(|e| mfgms::Error::Parse(format!("{}: {e}", path.display())))?,
        None => toml::Table::new(),
    };
    if let Some(p) = opts.preset {
        table.insert("preset".into(), toml::Value::String(p.to_string()));
    }
    let mut cfg = SimulationConfig::from_toml_str(&table.to_string())?;
    if let Some(v) = &opts.examples {
        cfg.examples = v.clone();
    }
    if let Some(v) = &opts.methods {
        cfg.methods = v.clone();
    }
    if let Some(v) = &opts.basis_types {
        cfg.basis_types = v.clone();
    }
    if let Some(v) = &opts.nb {
        cfg.n_basis = v.clone();
    }
    if let Some(v) = &opts.out {
        cfg.out_dir = v.clone();
    }
    if let Some(v) = opts.seed {
        cfg.seed = v;
    }
    if let Some(v) = opts.jobs {
        cfg.jobs = v;
    }
    cfg.vtk |= opts.vtk;
    cfg.trace |= opts.trace;
    cfg.timings |= opts.timings;
    if opts.no_cache {
        cfg.cache = false;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn report_table(out: &ExperimentOutput) -> bool {
    for r in &out.records {
        match &r.report {
            Some(rep) => println!("{:<24} L2 {:>10.4}%  H1 {:>10.4}%", r.key.id(), rep.l2_pct, rep.h1_pct),
            None => println!("{:<24} {}", r.key.id(), r.status),
        }
    }
    println!("wrote {}", out.csv_path.display());
    !out.any_failed()
}

fn report_tasks(tasks: &[TaskStatus]) -> bool {
    for t in tasks {
        match (&t.path, &t.error) {
            (Some(p), _) => println!("{:<24} {}", t.name, p.display()),
            (None, Some(e)) => println!("{:<24} failed: {e}", t.name),
            (None, None) => println!("{:<24} failed", t.name),
        }
    }
    tasks.iter().all(|t| t.error.is_none())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let opts = match &cli.command {
        Command::Run(o) | Command::Basis(o) | Command::Reference(o) | Command::Errors(o) => o,
    };
    let level = match opts.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    let cfg = match resolve(opts) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    let ok = match &cli.command {
        Command::Run(_) => run_experiment(&cfg).map(|o| report_table(&o)),
        Command::Errors(_) => recompute_errors(&cfg).map(|o| report_table(&o)),
        Command::Basis(_) => build_bases(&cfg).map(|t| report_tasks(&t)),
        Command::Reference(_) => run_references(&cfg).map(|t| report_tasks(&t)),
    };
    match ok {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use indirect_moments::harness::{self, ExperimentConfig, ExperimentKind, Overrides};

/// Exit code when the run finished but at least one trial failed.
const EXIT_TRIAL_ERRORS: u8 = 1;
/// Exit code for bad configuration or a run that could not start.
const EXIT_FATAL: u8 = 2;

#[derive(Parser)]
#[command(name = "indirect-moments", version, about = "Experiments for learning from indirect supervision")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Asymptotic efficiency of the moment estimator under randomized response.
    EfficiencyCurve(RunArgs),
    /// Monte Carlo covariance against the asymptotic formulas.
    McValidate(RunArgs),
    /// One EM step against the moment estimator for deterministic channels.
    Geometry(RunArgs),
    /// Sequence labelling from region tag counts.
    RegionCount(RunArgs),
    /// Linear regression from locally private statistics.
    PrivateRegression(RunArgs),
    /// Exhaustive privacy audits.
    Audit(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    /// JSON config; runner defaults are used for anything missing.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Root seed; overrides the config.
    #[arg(long)]
    seed: Option<u64>,
    /// CSV output path; the manifest goes next to it. Without one the table
    /// goes to stdout and the manifest to stderr.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads; defaults to all cores.
    #[arg(long)]
    threads: Option<usize>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(0) => ExitCode::SUCCESS,
        Ok(n) => {
            eprintln!("{n} trial(s) failed; see the manifest");
            ExitCode::from(EXIT_TRIAL_ERRORS)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_FATAL)
        }
    }
}

/// Returns the number of failed trials.
fn run(command: Command) -> anyhow::Result<usize> {
    let (kind, args) = match command {
        Command::EfficiencyCurve(a) => (ExperimentKind::EfficiencyCurve, a),
        Command::McValidate(a) => (ExperimentKind::McValidate, a),
        Command::Geometry(a) => (ExperimentKind::Geometry, a),
        Command::RegionCount(a) => (ExperimentKind::RegionCount, a),
        Command::PrivateRegression(a) => (ExperimentKind::PrivateRegression, a),
        Command::Audit(a) => (ExperimentKind::Audit, a),
    };
    let overrides = Overrides {
        seed: args.seed,
        output: args.out,
        threads: args.threads,
    };
    let config = match &args.config {
        Some(p) => ExperimentConfig::from_file(kind, p, &overrides),
        None => ExperimentConfig::from_json(kind, None, &overrides),
    }
    .context("invalid configuration")?;
    let (out, manifest) = harness::execute(&config).with_context(|| format!("{kind} failed"))?;
    match &config.output {
        Some(path) => {
            let m = harness::write_outputs(&out, &manifest, path)?;
            eprintln!("wrote {} and {}", path.display(), m.display());
        }
        None => {
            out.table.write_csv(std::io::stdout().lock())?;
            writeln!(std::io::stderr(), "{}", harness::manifest_json(&manifest)?)?;
        }
    }
    Ok(out.errors.len())
}

//! `fedgp`: run, partition, diagnose and summarize experiment plans.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fedgp_core::plan::{
    diagnose_dir, parse_plan, run_plan, summarize_dirs, write_partitions, ExperimentPlan, TargetSpec, OUTPUT_ROOT_ENV,
};
use fedgp_core::selection::Strategy;

#[derive(Parser)]
#[command(name = "fedgp", version, about = "Federated learning client-selection experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every (strategy, seed) cell of a plan.
    Run {
        config: PathBuf,
        /// `key=value` overrides; bare `--key=value` arguments are accepted too.
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Output directory (default: the plan's, under $FEDGP_OUTPUT_ROOT).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write each seed's partition without training.
    Partition {
        config: PathBuf,
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Recompute diagnostic reports from stored samples.
    Diagnose { run_dir: PathBuf },
    /// Rounds-to-target summary over finished runs.
    Summarize {
        #[arg(required = true)]
        run_dirs: Vec<PathBuf>,
        #[arg(long, conflicts_with = "calibrate_round")]
        target: Option<f64>,
        #[arg(long)]
        calibrate_round: Option<usize>,
        #[arg(long, default_value = "rand")]
        calibrate_strategy: String,
        /// Also write the summary JSON here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

const KNOWN_FLAGS: [&str; 7] = ["override", "out", "target", "calibrate-round", "calibrate-strategy", "help", "version"];

/// Turns stray `--key=value` arguments into `--override key=value`.
fn rewrite_args(args: impl IntoIterator<Item = String>) -> Vec<String> {
    let mut out = Vec::new();
    for arg in args {
        match arg.strip_prefix("--").and_then(|rest| rest.split_once('=')) {
            Some((key, _)) if !KNOWN_FLAGS.contains(&key) => {
                out.push("--override".to_string());
                out.push(arg[2..].to_string());
            }
            _ => out.push(arg),
        }
    }
    out
}

fn output_dir(plan: &ExperimentPlan, explicit: Option<PathBuf>) -> PathBuf {
    explicit.unwrap_or_else(|| {
        let root = std::env::var_os(OUTPUT_ROOT_ENV).map(PathBuf::from);
        plan.output_dir(root.as_deref())
    })
}

fn plan_target(dir: &Path) -> Option<TargetSpec> {
    let plan_file = dir.join("plan.resolved.toml");
    parse_plan(plan_file, &[]).ok().map(|p| p.target())
}

fn run(cli: Cli) -> Result<ExitCode, Box<dyn std::error::Error>> {
    match cli.command {
        Command::Run { config, overrides, out } => {
            let plan = parse_plan(&config, &overrides)?;
            let dir = output_dir(&plan, out);
            let outcome = run_plan(&plan, &dir)?;
            if let Some(summary) = &outcome.summary {
                println!("{}", serde_json::to_string_pretty(summary)?);
            }
            let failed = outcome.failed();
            for cell in &failed {
                eprintln!("FAILED {} seed {}: {}", cell.strategy, cell.seed, cell.error.as_deref().unwrap_or(""));
            }
            eprintln!("outputs in {}", dir.display());
            Ok(if failed.is_empty() { ExitCode::SUCCESS } else { ExitCode::FAILURE })
        }
        Command::Partition { config, overrides, out } => {
            let plan = parse_plan(&config, &overrides)?;
            for path in write_partitions(&plan, &output_dir(&plan, out))? {
                println!("{}", path.display());
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Diagnose { run_dir } => {
            let reports = diagnose_dir(&run_dir)?;
            println!("{}", serde_json::to_string_pretty(&reports)?);
            Ok(ExitCode::SUCCESS)
        }
        Command::Summarize { run_dirs, target, calibrate_round, calibrate_strategy, out } => {
            let spec = match (target, calibrate_round) {
                (Some(accuracy), _) => TargetSpec::Fixed { accuracy },
                (None, Some(round)) => {
                    TargetSpec::Calibrated { strategy: calibrate_strategy.parse::<Strategy>()?, round }
                }
                (None, None) => plan_target(&run_dirs[0]).unwrap_or(TargetSpec::None),
            };
            let summary = summarize_dirs(&run_dirs, spec)?;
            let json = serde_json::to_string_pretty(&summary)?;
            if let Some(path) = out {
                std::fs::write(path, format!("{json}\n"))?;
            }
            println!("{json}");
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse_from(rewrite_args(std::env::args()));
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

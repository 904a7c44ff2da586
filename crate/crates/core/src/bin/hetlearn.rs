use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use hetlearn::harness::config::TopologyConfig;
use hetlearn::harness::{self, metrics, ExperimentConfig, RunOptions};

#[derive(Parser)]
#[command(name = "hetlearn", version, about = "Heterogeneous cooperative training simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every seed of an experiment and write metrics.csv, aggregated.csv and summary.json.
    Run {
        config: PathBuf,
        /// Added to every seed in the config.
        #[arg(long, default_value_t = 0)]
        seed_offset: u64,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Save a per-seed checkpoint every N rounds (into OUT/checkpoints).
        #[arg(long)]
        checkpoint_every: Option<u64>,
        /// Continue from checkpoints found in OUT/checkpoints.
        #[arg(long)]
        resume: bool,
    },
    /// Print per-branch parameter counts and the shared/local split. Accepts an experiment
    /// config or a bare topology object.
    Describe { config: PathBuf },
    /// Aggregate a raw metrics CSV across seeds (median/min/max per round).
    Aggregate {
        raw: PathBuf,
        /// Output path; defaults to `<raw stem>_aggregated.csv` next to the input.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn describe(config: &PathBuf) -> hetlearn::Result<()> {
    let text = std::fs::read_to_string(config).map_err(|e| hetlearn::Error::io(config, e))?;
    let value: serde_json::Value = serde_json::from_str(&text)?;
    let topo = if value.get("topology").is_some() {
        ExperimentConfig::load(config)?.topology.build()?
    } else {
        serde_json::from_value::<TopologyConfig>(value)?.build()?
    };
    println!("{:<16} {:>12} {:>14} {:>12} {:>12}", "branch", "parameters", "operations", "shared", "local");
    for s in topo.describe()? {
        println!(
            "{:<16} {:>12} {:>14} {:>12} {:>12}",
            s.branch, s.parameters, s.operations, s.shared_len, s.local_len
        );
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run {
            config,
            seed_offset,
            out,
            checkpoint_every,
            resume,
        } => ExperimentConfig::load(&config).and_then(|cfg| {
            let cfg = cfg.with_seed_offset(seed_offset);
            let opts = RunOptions {
                checkpoint_dir: (checkpoint_every.is_some() || resume).then(|| out.join("checkpoints")),
                checkpoint_every,
                resume,
            };
            let summary = harness::run_experiment_to_dir(&cfg, &out, &opts)?;
            println!("{}", serde_json::to_string_pretty(&summary)?);
            if summary.failures.is_empty() {
                Ok(())
            } else {
                Err(hetlearn::Error::Config(format!("{} seed(s) failed", summary.failures.len())))
            }
        }),
        Command::Describe { config } => describe(&config),
        Command::Aggregate { raw, out } => metrics::read_csv(&raw).and_then(|rows| {
            let out = out.unwrap_or_else(|| {
                let stem = raw.file_stem().and_then(|s| s.to_str()).unwrap_or("metrics");
                raw.with_file_name(format!("{stem}_aggregated.csv"))
            });
            metrics::write_aggregate(&out, &metrics::aggregate(&rows))?;
            println!("{}", out.display());
            Ok(())
        }),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

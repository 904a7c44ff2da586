//! Experiment orchestration: configs, run modes, metrics, checkpoints and summaries.

pub mod checkpoint;
pub mod config;
pub mod metrics;
pub mod run;
pub mod threaded;

use std::path::{Path, PathBuf};

use serde::Serialize;

pub use checkpoint::{checkpoint_load, checkpoint_save, Checkpoint};
pub use config::{ExperimentConfig, RunMode, Scheduler, Task};
pub use metrics::{aggregate, read_csv, write_aggregate, write_csv, MetricsRow, Phase};
pub use run::{Run, RunState, Setup};

use crate::parallel;
use crate::{Error, Result};

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Directory for per-seed checkpoint files.
    pub checkpoint_dir: Option<PathBuf>,
    /// Save a checkpoint after every this many rounds.
    pub checkpoint_every: Option<u64>,
    /// Continue from existing checkpoints in `checkpoint_dir`.
    pub resume: bool,
}

pub fn checkpoint_path(dir: &Path, seed: u64) -> PathBuf {
    dir.join(format!("seed-{seed}.ckpt"))
}

#[derive(Debug, Clone)]
pub struct SeedOutcome {
    pub seed: u64,
    pub rows: Vec<MetricsRow>,
    pub error: Option<String>,
}

fn run_seed_deterministic(cfg: &ExperimentConfig, seed: u64, opts: &RunOptions) -> Result<Vec<MetricsRow>> {
    let hash = cfg.topology_hash();
    let ckpt_file = opts.checkpoint_dir.as_ref().map(|d| checkpoint_path(d, seed));
    let mut run = match &ckpt_file {
        Some(p) if opts.resume && p.exists() => {
            let ckpt = checkpoint_load(p, Some(hash))?;
            if ckpt.state.seed != seed {
                return Err(Error::Checkpoint(format!("{} holds seed {}", p.display(), ckpt.state.seed)));
            }
            log::info!("seed {seed}: resuming at round {}", ckpt.state.round);
            Run::from_state(cfg, ckpt.state)?
        }
        _ => Run::new(cfg, seed)?,
    };
    while run.round() < cfg.rounds {
        run.step()?;
        if let (Some(p), Some(every)) = (&ckpt_file, opts.checkpoint_every) {
            if every > 0 && run.round() % every == 0 {
                checkpoint_save(
                    p,
                    &Checkpoint {
                        topology_hash: hash,
                        state: run.state(),
                    },
                )?;
            }
        }
    }
    run.finish()?;
    Ok(run.into_rows())
}

/// Runs one seed. Failures are logged and recorded as a `failure` row.
pub fn run_seed(cfg: &ExperimentConfig, seed: u64, opts: &RunOptions) -> SeedOutcome {
    let result = match cfg.scheduler {
        Scheduler::Deterministic => run_seed_deterministic(cfg, seed, opts),
        Scheduler::Threaded => threaded::run_seed_threaded(cfg, seed),
    };
    match result {
        Ok(rows) => SeedOutcome {
            seed,
            rows,
            error: None,
        },
        Err(e) => {
            log::error!("seed {seed} failed: {e}");
            SeedOutcome {
                seed,
                rows: vec![MetricsRow::new(seed, 0, 0, Phase::Train, "failure", 1.0)],
                error: Some(e.to_string()),
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DeviceSummary {
    pub device: u32,
    pub branch: String,
    pub parameters: usize,
    pub shared_len: usize,
    pub metric: String,
    pub median: f64,
    pub min: f64,
    pub max: f64,
    /// Median over seeds of the bytes sent per sync event.
    pub bytes_per_sync: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub name: String,
    pub mode: RunMode,
    pub seeds: Vec<u64>,
    pub devices: Vec<DeviceSummary>,
    pub failures: Vec<(u64, String)>,
}

/// Final per-seed score: best-snapshot test accuracy (supervised) or the smoothed last test
/// reward (RL).
pub fn final_scores(cfg: &ExperimentConfig, rows: &[MetricsRow], device: u32) -> Vec<f64> {
    cfg.seeds
        .iter()
        .filter_map(|&s| {
            let mine = rows.iter().filter(|r| r.seed == s && r.device == device);
            match cfg.task {
                Task::Supervised(_) => mine
                    .filter(|r| r.metric == "final_accuracy")
                    .map(|r| r.value)
                    .last(),
                Task::Rl(_) => {
                    let series: Vec<f64> = mine
                        .filter(|r| r.phase == Phase::Test && r.metric == "reward")
                        .map(|r| r.value)
                        .collect();
                    metrics::smooth(&series, metrics::SMOOTHING_WINDOW).last().copied()
                }
            }
        })
        .collect()
}

pub fn summarize(cfg: &ExperimentConfig, outcomes: &[SeedOutcome]) -> Result<Summary> {
    let setup_topology = cfg.topology.build()?;
    let lightest = setup_topology.lightest_branch()?;
    let rows: Vec<MetricsRow> = outcomes.iter().flat_map(|o| o.rows.iter().cloned()).collect();
    let mut devices = Vec::new();
    for (k, d) in cfg.devices.iter().enumerate() {
        let branch = if cfg.mode == RunMode::Homogeneous { lightest.clone() } else { d.branch.clone() };
        let parameters = setup_topology.count_parameters(&branch)?;
        let shared_len = match cfg.mode {
            RunMode::Isolated => 0,
            RunMode::Homogeneous => parameters,
            RunMode::Heterogeneous => setup_topology.partition_parameters(&branch)?.shared_len,
        };
        let scores = final_scores(cfg, &rows, k as u32);
        let (median, min, max) = metrics::order_stats(&scores).unwrap_or((f64::NAN, f64::NAN, f64::NAN));
        let per_sync: Vec<f64> = rows
            .iter()
            .filter(|r| r.device == k as u32 && r.metric == "bytes_sent")
            .map(|r| r.value)
            .collect();
        devices.push(DeviceSummary {
            device: k as u32,
            branch,
            parameters,
            shared_len,
            metric: match cfg.task {
                Task::Supervised(_) => "final_accuracy".into(),
                Task::Rl(_) => "final_test_reward_smoothed".into(),
            },
            median,
            min,
            max,
            bytes_per_sync: metrics::order_stats(&per_sync).map_or(0.0, |s| s.0),
        });
    }
    Ok(Summary {
        name: cfg.name.clone(),
        mode: cfg.mode,
        seeds: cfg.seeds.clone(),
        devices,
        failures: outcomes
            .iter()
            .filter_map(|o| o.error.clone().map(|e| (o.seed, e)))
            .collect(),
    })
}

#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub rows: Vec<MetricsRow>,
    pub summary: Summary,
}

/// Runs every seed (in parallel when enabled) and returns rows in seed order.
pub fn run_experiment(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<ExperimentOutput> {
    cfg.validate()?;
    if let Some(d) = &opts.checkpoint_dir {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let outcomes = parallel::map(cfg.exec, &cfg.seeds, |&s| run_seed(cfg, s, opts));
    let summary = summarize(cfg, &outcomes)?;
    Ok(ExperimentOutput {
        rows: outcomes.into_iter().flat_map(|o| o.rows).collect(),
        summary,
    })
}

/// Runs and writes `metrics.csv`, `aggregated.csv` and `summary.json` into `out`.
pub fn run_experiment_to_dir(cfg: &ExperimentConfig, out: &Path, opts: &RunOptions) -> Result<Summary> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let result = run_experiment(cfg, opts)?;
    write_csv(&out.join("metrics.csv"), &result.rows)?;
    write_aggregate(&out.join("aggregated.csv"), &aggregate(&result.rows))?;
    let summary_path = out.join("summary.json");
    let text = serde_json::to_string_pretty(&result.summary)?;
    std::fs::write(&summary_path, text + "\n").map_err(|e| Error::io(&summary_path, e))?;
    Ok(result.summary)
}

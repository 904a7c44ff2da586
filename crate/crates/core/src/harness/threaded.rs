//! Multi-worker supervised runs: one thread per device, connected to a coordinator thread by
//! frame channels. Asynchronous runs are not reproducible in this mode.
//!
//! Device threads compute sequentially: they may be started from inside the rayon pool, and
//! blocking a pool thread on work queued to the same pool can deadlock.

use std::time::Duration;

use super::config::{ExperimentConfig, RunMode, Task};
use super::metrics::{MetricsRow, Phase};
use super::run::Setup;
use crate::learners::{evaluate_accuracy, supervised_train_round, validate_and_snapshot, SupervisedTrainer};
use crate::protocol::{spawn_coordinator, Coordinator, CoordinatorLink, DeviceMode, DeviceState};
use crate::parallel::Exec;
use crate::rng;
use crate::{Error, Result};

pub const BARRIER_TIMEOUT: Duration = Duration::from_secs(600);

pub fn run_seed_threaded(cfg: &ExperimentConfig, seed: u64) -> Result<Vec<MetricsRow>> {
    let Task::Supervised(task) = &cfg.task else {
        return Err(Error::Config("the threaded scheduler runs supervised tasks only".into()));
    };
    let setup = Setup::new(cfg, seed)?;
    let data = setup.data.clone().expect("supervised data");
    let n = cfg.devices.len();
    let exec = Exec::Sequential;
    let shared_len = setup.shared_len()?;
    let mut endpoints: Vec<Option<_>> = if cfg.mode == RunMode::Isolated {
        (0..n).map(|_| None).collect()
    } else {
        let lightest = setup.topology.network(&setup.topology.lightest_branch()?)?;
        let start = lightest.init_params(&mut rng::stream(seed, "init-shared", 0));
        let scale = match cfg.device_mode {
            DeviceMode::LocalStep => 1.0,
            DeviceMode::Accumulate => -cfg.devices[0].optimizer.learning_rate(),
        };
        let c = Coordinator::new(
            start.as_slice()[..shared_len].to_vec(),
            cfg.coordinator.mode,
            cfg.coordinator.weighting,
            n,
        )
        .with_step_scale(scale)
        .with_width(cfg.real_width);
        let (eps, handle) = spawn_coordinator(c, n, cfg.real_width, BARRIER_TIMEOUT);
        // Detach: the coordinator thread ends when the endpoints are dropped.
        drop(handle);
        eps.into_iter().map(Some).collect()
    };

    let results: Vec<Result<Vec<MetricsRow>>> = std::thread::scope(|scope| {
        let workers: Vec<_> = (0..n)
            .map(|k| {
                let setup = &setup;
                let data = &data;
                let mut link = endpoints[k].take();
                scope.spawn(move || -> Result<Vec<MetricsRow>> {
                    let net = &setup.networks[k];
                    let params = net.init_params(&mut rng::stream(seed, "init", k as u64));
                    let mut dev = DeviceState::new(
                        k as u32,
                        setup.partitions[k],
                        params,
                        cfg.devices[k].optimizer,
                        cfg.device_mode,
                        1,
                        data.partition.shards[k].train.len() as u64,
                        cfg.real_width,
                    )?;
                    if let Some(l) = link.as_mut() {
                        l.send(dev.registration())?;
                        let init = l.recv()?;
                        dev.receive_initial(init)?;
                    }
                    let mut trainer = SupervisedTrainer::new(task.trainer, dev.params())?;
                    let mut r = rng::stream(seed, "train", k as u64);
                    let mut rows = Vec::new();
                    let row = |round, phase, metric: &str, value| {
                        MetricsRow::new(seed, round, k as u32, phase, metric, value)
                    };
                    let shard = &data.partition.shards[k];
                    for round in 1..=cfg.rounds {
                        let m = supervised_train_round(&task.trainer, net, &mut dev, &data.pool, &shard.train, &mut r, exec)?;
                        rows.push(row(round, Phase::Train, "loss", m.loss));
                        rows.push(row(round, Phase::Train, "accuracy", m.accuracy));
                        let before = dev.bytes_sent();
                        match link.as_mut() {
                            Some(l) => dev.device_sync(l)?,
                            None => dev.local_flush()?,
                        }
                        rows.push(row(round, Phase::Train, "bytes_sent", (dev.bytes_sent() - before) as f64));
                        let acc = validate_and_snapshot(&mut trainer, net, dev.params(), &data.pool, &shard.validation, round, exec)?;
                        rows.push(row(round, Phase::Validation, "accuracy", acc));
                        if task.test_every > 0 && round % task.test_every == 0 {
                            let acc = evaluate_accuracy(net, dev.params(), &data.test, &data.test_indices(), exec)?;
                            rows.push(row(round, Phase::Test, "accuracy", acc));
                        }
                    }
                    let best = trainer.snapshot_params(dev.params())?;
                    let acc = evaluate_accuracy(net, &best, &data.test, &data.test_indices(), exec)?;
                    rows.push(row(cfg.rounds, Phase::Test, "final_accuracy", acc));
                    rows.push(row(cfg.rounds, Phase::Validation, "best_round", trainer.best_round().unwrap_or(0) as f64));
                    Ok(rows)
                })
            })
            .collect();
        workers
            .into_iter()
            .map(|w| w.join().unwrap_or_else(|_| Err(Error::ChannelClosed("device worker panicked".into()))))
            .collect()
    });
    let mut rows = Vec::new();
    for r in results {
        rows.extend(r?);
    }
    // Worker output interleaves arbitrarily; order by round, then device.
    rows.sort_by_key(|r| (r.round, r.device));
    Ok(rows)
}

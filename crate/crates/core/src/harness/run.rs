//! Per-seed experiment driver.

use std::sync::Arc;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::config::{DataSource, ExperimentConfig, RunMode, Task};
use super::metrics::{MetricsRow, Phase};
use crate::learners::{
    evaluate_accuracy, run_test_episode, supervised_train_round, validate_and_snapshot, DdqlAgent,
    SupervisedTrainer,
};
use crate::nn::{Network, ParamStore};
use crate::protocol::{
    Coordinator, CoordinatorMode, DeviceMode, DeviceState, InlineLink, SyncMessage,
};
use crate::protocol::device::DeviceSnapshot;
use crate::rng::{self, StreamRng};
use crate::topology::{BranchedTopology, ParameterPartition};
use crate::worlds::{
    generate_synthetic_dataset, load_cifar10_binary, partition_dataset, DataPartition, Dataset,
    SyntheticSpec,
};
use crate::{Error, Result};

/// Datasets of one supervised seed.
#[derive(Debug, Clone)]
pub struct SupervisedData {
    pub pool: Dataset,
    pub test: Dataset,
    pub partition: DataPartition,
}

impl SupervisedData {
    pub fn load(source: &DataSource, fractions: &[f64], seed: u64) -> Result<Self> {
        let (pool, test) = match source {
            DataSource::Synthetic { spec, test_per_class } => {
                let test_spec = SyntheticSpec {
                    per_class: *test_per_class,
                    ..spec.clone()
                };
                (
                    generate_synthetic_dataset(spec, seed, 0)?,
                    generate_synthetic_dataset(&test_spec, seed, 1)?,
                )
            }
            DataSource::Cifar10 {
                train_files,
                test_file,
            } => {
                let mut parts = Vec::new();
                for f in train_files {
                    parts.push(load_cifar10_binary(f)?);
                }
                (concat(parts)?, load_cifar10_binary(test_file)?)
            }
        };
        let partition = partition_dataset(&pool, fractions, seed)?;
        Ok(SupervisedData {
            pool,
            test,
            partition,
        })
    }

    pub fn test_indices(&self) -> Vec<usize> {
        (0..self.test.len()).collect()
    }
}

fn concat(parts: Vec<Dataset>) -> Result<Dataset> {
    let mut it = parts.into_iter();
    let first = it.next().ok_or_else(|| Error::Config("no CIFAR-10 training files".into()))?;
    let mut bytes = Vec::new();
    let mut labels = Vec::new();
    let mut push = |d: &Dataset| {
        for i in 0..d.len() {
            bytes.extend_from_slice(d.raw_bytes(i).expect("byte-backed"));
            labels.push(d.label(i));
        }
    };
    push(&first);
    for d in it {
        push(&d);
    }
    Dataset::from_bytes(
        first.feature_shape().to_vec(),
        bytes,
        labels,
        first.num_classes(),
        first.provenance(),
    )
}

/// Immutable per-seed wiring derived from the config.
#[derive(Debug, Clone)]
pub struct Setup {
    pub topology: BranchedTopology,
    pub branches: Vec<String>,
    pub networks: Vec<Arc<Network>>,
    pub partitions: Vec<ParameterPartition>,
    pub data: Option<Arc<SupervisedData>>,
}

impl Setup {
    pub fn new(cfg: &ExperimentConfig, seed: u64) -> Result<Self> {
        let topology = cfg.topology.build()?;
        let lightest = topology.lightest_branch()?;
        let mut branches = Vec::new();
        let mut networks = Vec::new();
        let mut partitions = Vec::new();
        for d in &cfg.devices {
            let branch = match cfg.mode {
                RunMode::Homogeneous => lightest.clone(),
                _ => d.branch.clone(),
            };
            let net = topology.network(&branch)?;
            let total = net.param_count();
            partitions.push(match cfg.mode {
                RunMode::Isolated => ParameterPartition::isolated(total),
                RunMode::Homogeneous => ParameterPartition::full(total),
                RunMode::Heterogeneous => topology.partition_parameters(&branch)?,
            });
            networks.push(Arc::new(net));
            branches.push(branch);
        }
        let data = match &cfg.task {
            Task::Supervised(s) => {
                let fractions: Vec<f64> = cfg
                    .devices
                    .iter()
                    .map(|d| d.data_fraction.expect("validated"))
                    .collect();
                Some(Arc::new(SupervisedData::load(&s.data, &fractions, seed)?))
            }
            Task::Rl(_) => None,
        };
        Ok(Setup {
            topology,
            branches,
            networks,
            partitions,
            data,
        })
    }

    /// Length every device shares with the coordinator (0 when isolated).
    pub fn shared_len(&self) -> Result<usize> {
        let n = self.partitions[0].shared_len;
        if self.partitions.iter().any(|p| p.shared_len != n) {
            return Err(Error::Topology("devices disagree on the shared prefix length".into()));
        }
        Ok(n)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Learners {
    Supervised(Vec<SupervisedTrainer>),
    Rl(Vec<DdqlAgent>),
}

/// Everything that changes while a seed runs; this is what a checkpoint stores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunState {
    pub seed: u64,
    pub round: u64,
    pub finished: bool,
    pub devices: Vec<DeviceSnapshot>,
    pub coordinator: Option<Coordinator>,
    pub learners: Learners,
    pub rngs: Vec<StreamRng>,
    pub scheduler_rng: StreamRng,
    pub rows: Vec<MetricsRow>,
}

pub struct Run<'c> {
    cfg: &'c ExperimentConfig,
    setup: Setup,
    devices: Vec<DeviceState>,
    coordinator: Option<Coordinator>,
    learners: Learners,
    rngs: Vec<StreamRng>,
    scheduler_rng: StreamRng,
    seed: u64,
    round: u64,
    finished: bool,
    rows: Vec<MetricsRow>,
}

fn data_size(cfg: &ExperimentConfig, setup: &Setup, k: usize) -> u64 {
    match (&cfg.task, &setup.data) {
        (Task::Supervised(_), Some(d)) => d.partition.shards[k].train.len() as u64,
        (Task::Rl(r), _) => cfg.devices[k]
            .replay_capacity
            .unwrap_or(r.ddql.replay_capacity) as u64,
        _ => 1,
    }
}

/// Whether a device with interaction rate `rate` acts on global step `t` (1-based).
pub fn acts_on(rate: f64, t: u64) -> bool {
    (t as f64 * rate).floor() > ((t - 1) as f64 * rate).floor()
}

impl<'c> Run<'c> {
    pub fn new(cfg: &'c ExperimentConfig, seed: u64) -> Result<Self> {
        let setup = Setup::new(cfg, seed)?;
        let n = cfg.devices.len();
        let mut initial = Vec::with_capacity(n);
        let mut devices = Vec::with_capacity(n);
        for k in 0..n {
            let params = setup.networks[k].init_params(&mut rng::stream(seed, "init", k as u64));
            initial.push(params.clone());
            devices.push(DeviceState::new(
                k as u32,
                setup.partitions[k],
                params,
                cfg.devices[k].optimizer,
                cfg.device_mode,
                1,
                data_size(cfg, &setup, k),
                cfg.real_width,
            )?);
        }
        let shared_len = setup.shared_len()?;
        let coordinator = if cfg.mode == RunMode::Isolated {
            None
        } else {
            // The shared start point comes from the lightest network so every branch sees it.
            let lightest = setup.topology.network(&setup.topology.lightest_branch()?)?;
            let start = lightest.init_params(&mut rng::stream(seed, "init-shared", 0));
            let step_scale = match cfg.device_mode {
                DeviceMode::LocalStep => 1.0,
                DeviceMode::Accumulate => -cfg.devices[0].optimizer.learning_rate(),
            };
            let mut c = Coordinator::new(
                start.as_slice()[..shared_len].to_vec(),
                cfg.coordinator.mode,
                cfg.coordinator.weighting,
                n,
            )
            .with_step_scale(step_scale)
            .with_width(cfg.real_width);
            let mut replies = Vec::new();
            for d in &devices {
                replies.extend(c.handle(d.registration())?);
            }
            for r in replies {
                let k = r.device() as usize;
                devices[k].receive_initial(r)?;
            }
            Some(c)
        };
        let learners = match &cfg.task {
            Task::Supervised(s) => Learners::Supervised(
                devices
                    .iter()
                    .map(|d| SupervisedTrainer::new(s.trainer, d.params()))
                    .collect::<Result<_>>()?,
            ),
            Task::Rl(r) => Learners::Rl(
                (0..n)
                    .map(|k| {
                        let mut ddql = r.ddql.clone();
                        if let Some(c) = cfg.devices[k].replay_capacity {
                            ddql.replay_capacity = c;
                        }
                        DdqlAgent::new(
                            ddql,
                            devices[k].params(),
                            r.env.clone(),
                            rng::stream(seed, "agent", k as u64),
                        )
                    })
                    .collect::<Result<_>>()?,
            ),
        };
        Ok(Run {
            cfg,
            setup,
            devices,
            coordinator,
            learners,
            rngs: (0..n).map(|k| rng::stream(seed, "train", k as u64)).collect(),
            scheduler_rng: rng::stream(seed, "scheduler", 0),
            seed,
            round: 0,
            finished: false,
            rows: Vec::new(),
        })
    }

    pub fn from_state(cfg: &'c ExperimentConfig, state: RunState) -> Result<Self> {
        let mut run = Run::new(cfg, state.seed)?;
        if state.devices.len() != run.devices.len() {
            return Err(Error::Checkpoint("device count differs from the config".into()));
        }
        for (d, s) in run.devices.iter_mut().zip(state.devices) {
            d.restore(s)?;
        }
        run.coordinator = state.coordinator;
        run.learners = state.learners;
        run.rngs = state.rngs;
        run.scheduler_rng = state.scheduler_rng;
        run.round = state.round;
        run.finished = state.finished;
        run.rows = state.rows;
        Ok(run)
    }

    pub fn state(&self) -> RunState {
        RunState {
            seed: self.seed,
            round: self.round,
            finished: self.finished,
            devices: self.devices.iter().map(|d| d.snapshot()).collect(),
            coordinator: self.coordinator.clone(),
            learners: self.learners.clone(),
            rngs: self.rngs.clone(),
            scheduler_rng: self.scheduler_rng.clone(),
            rows: self.rows.clone(),
        }
    }

    pub fn setup(&self) -> &Setup {
        &self.setup
    }

    pub fn devices(&self) -> &[DeviceState] {
        &self.devices
    }

    pub fn coordinator(&self) -> Option<&Coordinator> {
        self.coordinator.as_ref()
    }

    pub fn learners(&self) -> &Learners {
        &self.learners
    }

    pub fn round(&self) -> u64 {
        self.round
    }

    pub fn is_complete(&self) -> bool {
        self.finished
    }

    pub fn rows(&self) -> &[MetricsRow] {
        &self.rows
    }

    pub fn into_rows(self) -> Vec<MetricsRow> {
        self.rows
    }

    fn row(&mut self, round: u64, device: usize, phase: Phase, metric: &str, value: f64) {
        self.rows
            .push(MetricsRow::new(self.seed, round, device as u32, phase, metric, value));
    }

    /// Runs every remaining round and the final evaluation.
    pub fn run_to_end(&mut self) -> Result<()> {
        while self.round < self.cfg.rounds {
            self.step()?;
        }
        self.finish()
    }

    /// Advances one round (supervised) or one sync period (RL).
    pub fn step(&mut self) -> Result<()> {
        if self.round >= self.cfg.rounds {
            return Err(Error::Config("all rounds already ran".into()));
        }
        self.round += 1;
        match &self.cfg.task {
            Task::Supervised(_) => self.supervised_round(),
            Task::Rl(_) => self.rl_period(),
        }
    }

    fn supervised_round(&mut self) -> Result<()> {
        let Task::Supervised(task) = &self.cfg.task else { unreachable!() };
        let data = self.setup.data.clone().expect("supervised data");
        let r = self.round;
        let exec = self.cfg.exec;
        for k in 0..self.devices.len() {
            let m = supervised_train_round(
                &task.trainer,
                &self.setup.networks[k],
                &mut self.devices[k],
                &data.pool,
                &data.partition.shards[k].train,
                &mut self.rngs[k],
                exec,
            )?;
            self.row(r, k, Phase::Train, "loss", m.loss);
            self.row(r, k, Phase::Train, "accuracy", m.accuracy);
        }
        self.sync_all(r)?;
        for k in 0..self.devices.len() {
            let Learners::Supervised(trainers) = &mut self.learners else { unreachable!() };
            let acc = validate_and_snapshot(
                &mut trainers[k],
                &self.setup.networks[k],
                self.devices[k].params(),
                &data.pool,
                &data.partition.shards[k].validation,
                r,
                exec,
            )?;
            self.row(r, k, Phase::Validation, "accuracy", acc);
            if task.test_every > 0 && r % task.test_every == 0 {
                let acc = evaluate_accuracy(
                    &self.setup.networks[k],
                    self.devices[k].params(),
                    &data.test,
                    &data.test_indices(),
                    exec,
                )?;
                self.row(r, k, Phase::Test, "accuracy", acc);
            }
        }
        Ok(())
    }

    fn rl_period(&mut self) -> Result<()> {
        let Task::Rl(task) = &self.cfg.task else { unreachable!() };
        let period = task.sync_period;
        let first = (self.round - 1) * period + 1;
        let last = self.round * period;
        let exec = self.cfg.exec;
        for t in first..=last {
            for k in 0..self.devices.len() {
                if !acts_on(self.cfg.devices[k].rate, t) {
                    continue;
                }
                let Learners::Rl(agents) = &mut self.learners else { unreachable!() };
                if let Some(ret) = agents[k].env_step(&self.setup.networks[k], &mut self.devices[k], exec)? {
                    self.row(t, k, Phase::Train, "reward", ret);
                }
            }
        }
        self.sync_all(last)?;
        for k in 0..self.devices.len() {
            let Learners::Rl(agents) = &mut self.learners else { unreachable!() };
            agents[k].copy_target(&self.devices[k]);
            let mut r = rng::stream(rng::derive_seed(self.seed, "test-episode", k as u64), "period", self.round);
            let ret = run_test_episode(
                &self.setup.networks[k],
                self.devices[k].params(),
                &task.env,
                task.ddql.epsilon.test,
                &mut r,
            )?;
            self.row(last, k, Phase::Test, "reward", ret);
        }
        Ok(())
    }

    /// One sync event for every device; records the bytes each one sent.
    fn sync_all(&mut self, at: u64) -> Result<()> {
        let before: Vec<u64> = self.devices.iter().map(|d| d.bytes_sent()).collect();
        match &mut self.coordinator {
            None => {
                for d in &mut self.devices {
                    d.local_flush()?;
                }
            }
            Some(c) if c.mode() == CoordinatorMode::Synchronous => {
                let mut replies: Vec<SyncMessage> = Vec::new();
                for d in &mut self.devices {
                    let msg = d.sync_begin()?;
                    replies.extend(c.handle(msg)?);
                }
                if replies.len() != self.devices.len() {
                    return Err(Error::BarrierTimeout {
                        round: c.round(),
                        missing: c.missing(),
                    });
                }
                for r in replies {
                    let k = r.device() as usize;
                    self.devices[k].sync_finish(r)?;
                }
            }
            Some(c) => {
                let mut order: Vec<usize> = (0..self.devices.len()).collect();
                order.shuffle(&mut self.scheduler_rng);
                for k in order {
                    let mut link = InlineLink::new(c, k as u32);
                    self.devices[k].device_sync(&mut link)?;
                }
            }
        }
        for k in 0..self.devices.len() {
            let sent = self.devices[k].bytes_sent() - before[k];
            self.row(at, k, Phase::Train, "bytes_sent", sent as f64);
        }
        Ok(())
    }

    /// Final evaluation: supervised devices are scored on the test set with their best snapshot.
    pub fn finish(&mut self) -> Result<()> {
        if self.finished {
            return Ok(());
        }
        if let (Learners::Supervised(trainers), Some(data)) = (&self.learners, &self.setup.data) {
            let mut scores = Vec::new();
            for (k, t) in trainers.iter().enumerate() {
                let params: ParamStore = t.snapshot_params(self.devices[k].params())?;
                let acc = evaluate_accuracy(
                    &self.setup.networks[k],
                    &params,
                    &data.test,
                    &data.test_indices(),
                    self.cfg.exec,
                )?;
                scores.push((k, acc, t.best_round().unwrap_or(0)));
            }
            let r = self.round;
            for (k, acc, best) in scores {
                self.row(r, k, Phase::Test, "final_accuracy", acc);
                self.row(r, k, Phase::Validation, "best_round", best as f64);
            }
        }
        self.finished = true;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn interaction_gate() {
        let hits = |v: f64| (1..=8).filter(|&t| acts_on(v, t)).collect::<Vec<_>>();
        assert_eq!(hits(1.0), (1..=8).collect::<Vec<_>>());
        assert_eq!(hits(0.5), vec![2, 4, 6, 8]);
        assert_eq!(hits(0.25), vec![4, 8]);
    }
}

//! JSON experiment configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::learners::{DdqlConfig, SupervisedConfig};
use crate::nn::{LayerSpec, OptimizerConfig};
use crate::parallel::Exec;
use crate::protocol::{CoordinatorMode, DeviceMode, RealWidth, WeightingSource};
use crate::topology::{presets, BranchedTopology};
use crate::worlds::{GridConfig, SyntheticSpec};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunMode {
    /// No synchronization at all.
    Isolated,
    /// Every device trains the lightest branch and shares all of it.
    Homogeneous,
    /// Every device trains its own branch and shares the common prefix.
    Heterogeneous,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheduler {
    /// One worker, devices visited round-robin, coordinator inline.
    #[default]
    Deterministic,
    /// One thread per device plus a coordinator thread (supervised task only).
    Threaded,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamedBranch {
    pub name: String,
    pub layers: Vec<LayerSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "scheme", rename_all = "kebab-case", deny_unknown_fields)]
pub enum TopologyConfig {
    ShareFirst {
        input_shape: Vec<usize>,
        stem: Vec<LayerSpec>,
        branches: Vec<NamedBranch>,
    },
    Cascaded {
        input_shape: Vec<usize>,
        stem: Vec<LayerSpec>,
        complex: NamedBranch,
        lightweight: NamedBranch,
        branch_dropout: f64,
    },
    /// Built-in topologies: `atari`, `cifar-share-first`, `cifar-cascaded`.
    Preset {
        name: String,
        #[serde(default)]
        actions: Option<usize>,
        #[serde(default)]
        branch_dropout: Option<f64>,
    },
}

impl TopologyConfig {
    pub fn build(&self) -> Result<BranchedTopology> {
        match self {
            TopologyConfig::ShareFirst {
                input_shape,
                stem,
                branches,
            } => BranchedTopology::build_share_first(
                input_shape,
                stem.clone(),
                branches.iter().map(|b| (b.name.clone(), b.layers.clone())).collect(),
            ),
            TopologyConfig::Cascaded {
                input_shape,
                stem,
                complex,
                lightweight,
                branch_dropout,
            } => BranchedTopology::build_cascaded(
                input_shape,
                stem.clone(),
                (complex.name.clone(), complex.layers.clone()),
                (lightweight.name.clone(), lightweight.layers.clone()),
                *branch_dropout,
            ),
            TopologyConfig::Preset {
                name,
                actions,
                branch_dropout,
            } => match name.as_str() {
                "atari" => Ok(presets::atari(actions.unwrap_or(6))),
                "cifar-share-first" => Ok(presets::cifar_share_first()),
                "cifar-cascaded" => Ok(presets::cifar_cascaded(branch_dropout.unwrap_or(0.5))),
                other => Err(Error::Config(format!("unknown topology preset {other:?}"))),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviceConfig {
    pub branch: String,
    /// Share of the training pool (supervised).
    #[serde(default)]
    pub data_fraction: Option<f64>,
    /// Interaction rate `v`: the device acts on this fraction of global steps (RL).
    #[serde(default = "unit_rate")]
    pub rate: f64,
    /// Replay capacity (RL); overrides the task default.
    #[serde(default)]
    pub replay_capacity: Option<usize>,
    pub optimizer: OptimizerConfig,
}

fn unit_rate() -> f64 {
    1.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoordinatorConfig {
    pub mode: CoordinatorMode,
    pub weighting: WeightingSource,
}

impl Default for CoordinatorConfig {
    fn default() -> Self {
        CoordinatorConfig {
            mode: CoordinatorMode::Synchronous,
            weighting: WeightingSource::DataProportional,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub enum DataSource {
    Synthetic {
        spec: SyntheticSpec,
        test_per_class: usize,
    },
    Cifar10 {
        train_files: Vec<PathBuf>,
        test_file: PathBuf,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SupervisedTask {
    pub data: DataSource,
    #[serde(default)]
    pub trainer: SupervisedConfig,
    /// Log test accuracy of the live parameters every this many rounds (0 disables).
    #[serde(default)]
    pub test_every: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RlTask {
    #[serde(default)]
    pub env: GridConfig,
    /// Global steps between sync events; the target network is refreshed at the same time.
    pub sync_period: u64,
    #[serde(default)]
    pub ddql: DdqlConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Supervised(SupervisedTask),
    Rl(RlTask),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub name: String,
    pub task: Task,
    pub mode: RunMode,
    pub topology: TopologyConfig,
    pub devices: Vec<DeviceConfig>,
    #[serde(default)]
    pub coordinator: CoordinatorConfig,
    #[serde(default)]
    pub device_mode: DeviceMode,
    /// Supervised: training rounds. RL: sync periods.
    pub rounds: u64,
    pub seeds: Vec<u64>,
    #[serde(default = "default_width")]
    pub real_width: RealWidth,
    #[serde(default)]
    pub exec: Exec,
    #[serde(default)]
    pub scheduler: Scheduler,
}

fn default_width() -> RealWidth {
    RealWidth::F32
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_json(&text)?;
        // Relative dataset paths are taken from the config's directory.
        if let (Task::Supervised(s), Some(dir)) = (&mut cfg.task, path.parent()) {
            if let DataSource::Cifar10 {
                train_files,
                test_file,
            } = &mut s.data
            {
                for f in train_files.iter_mut().chain(std::iter::once(test_file)) {
                    if f.is_relative() {
                        *f = dir.join(&*f);
                    }
                }
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let topo = self.topology.build()?;
        if self.devices.is_empty() {
            return Err(Error::Config("no devices".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("no seeds".into()));
        }
        if self.rounds == 0 {
            return Err(Error::Config("rounds must be positive".into()));
        }
        for d in &self.devices {
            topo.network(&d.branch)?;
            d.optimizer.validate()?;
            if !(d.rate > 0.0 && d.rate <= 1.0) {
                return Err(Error::Config(format!("device rate {} outside (0, 1]", d.rate)));
            }
        }
        match &self.task {
            Task::Supervised(s) => {
                if self.devices.iter().any(|d| d.data_fraction.is_none()) {
                    return Err(Error::Config("every supervised device needs data_fraction".into()));
                }
                if let DataSource::Synthetic { spec, test_per_class } = &s.data {
                    spec.validate()?;
                    if *test_per_class == 0 {
                        return Err(Error::Config("test_per_class must be positive".into()));
                    }
                }
                if s.trainer.round_samples == 0 || s.trainer.minibatch == 0 {
                    return Err(Error::Config("round and minibatch sizes must be positive".into()));
                }
            }
            Task::Rl(r) => {
                if r.sync_period == 0 {
                    return Err(Error::Config("sync_period must be positive".into()));
                }
                if self.scheduler == Scheduler::Threaded {
                    return Err(Error::Config("the threaded scheduler runs supervised tasks only".into()));
                }
                r.env.validate()?;
                r.ddql.validate()?;
                for d in &self.devices {
                    let net = topo.network(&d.branch)?;
                    if net.input_shape() != [r.env.cells()] || net.output_shape() != [4] {
                        return Err(Error::Config(format!(
                            "branch {} must map {} grid cells to 4 action values",
                            d.branch,
                            r.env.cells()
                        )));
                    }
                    if net.outputs_probabilities() {
                        return Err(Error::Config("Q-networks must not end in a softmax".into()));
                    }
                }
            }
        }
        Ok(())
    }

    /// Stable fingerprint of everything that fixes parameter shapes and their partition.
    pub fn topology_hash(&self) -> u32 {
        let key = serde_json::json!({
            "topology": self.topology,
            "mode": self.mode,
            "branches": self.devices.iter().map(|d| &d.branch).collect::<Vec<_>>(),
        });
        crc32fast::hash(key.to_string().as_bytes())
    }

    pub fn with_seed_offset(mut self, offset: u64) -> Self {
        for s in &mut self.seeds {
            *s = s.wrapping_add(offset);
        }
        self
    }
}

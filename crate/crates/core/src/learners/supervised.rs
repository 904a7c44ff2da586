//! Round-based supervised training with validation snapshots.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::nn::network::Upstream;
use crate::nn::tensor::argmax;
use crate::nn::{loss_cross_entropy, Mode, Network, ParamStore, Tensor};
use crate::parallel::{self, sum_vectors, Exec};
use crate::protocol::DeviceState;
use crate::rng::{self, StreamRng};
use crate::worlds::Dataset;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SupervisedConfig {
    pub round_samples: usize,
    pub minibatch: usize,
}

impl Default for SupervisedConfig {
    fn default() -> Self {
        SupervisedConfig {
            round_samples: 2000,
            minibatch: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub loss: f64,
    pub accuracy: f64,
    /// Parameter change over the round.
    pub delta: Vec<f64>,
}

/// Best-validation bookkeeping for one device.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SupervisedTrainer {
    pub config: SupervisedConfig,
    best_accuracy: Option<f64>,
    best_round: Option<u64>,
    snapshot: Vec<f64>,
}

impl SupervisedTrainer {
    pub fn new(config: SupervisedConfig, initial: &ParamStore) -> Result<Self> {
        if config.round_samples == 0 || config.minibatch == 0 {
            return Err(Error::Config("round and minibatch sizes must be positive".into()));
        }
        Ok(SupervisedTrainer {
            config,
            best_accuracy: None,
            best_round: None,
            snapshot: initial.flatten(),
        })
    }

    pub fn best_accuracy(&self) -> Option<f64> {
        self.best_accuracy
    }

    pub fn best_round(&self) -> Option<u64> {
        self.best_round
    }

    pub fn snapshot(&self) -> &[f64] {
        &self.snapshot
    }

    pub fn snapshot_params(&self, like: &ParamStore) -> Result<ParamStore> {
        ParamStore::unflatten(like.layout().clone(), self.snapshot.clone())
    }
}

/// Draws the round's sample indices: with replacement when the shard is smaller than the round.
fn round_indices(shard: &[usize], count: usize, rng: &mut StreamRng) -> Vec<usize> {
    if shard.len() < count {
        (0..count).map(|_| shard[rng.random_range(0..shard.len())]).collect()
    } else {
        rand::seq::index::sample(rng, shard.len(), count)
            .into_iter()
            .map(|i| shard[i])
            .collect()
    }
}

/// One local round on `shard` (indices into `data`). Every minibatch's mean gradient is fed to
/// the device.
pub fn supervised_train_round(
    config: &SupervisedConfig,
    network: &Network,
    device: &mut DeviceState,
    data: &Dataset,
    shard: &[usize],
    rng: &mut StreamRng,
    exec: Exec,
) -> Result<RoundMetrics> {
    if shard.is_empty() {
        return Err(Error::Data("empty training shard".into()));
    }
    if !network.outputs_probabilities() {
        return Err(Error::Topology("classifier must end in a softmax".into()));
    }
    let start = device.params().flatten();
    let picks = round_indices(shard, config.round_samples, rng);
    let len = start.len();
    let (mut loss_sum, mut correct) = (0.0, 0.0);
    for batch in picks.chunks(config.minibatch) {
        let seed: u64 = rng.random();
        let params = device.params();
        let mut g = sum_vectors(exec, batch.len(), len + 2, |i, buf| -> Result<()> {
            let (x, label) = data.example(batch[i]);
            let mut r = rng::stream(seed, "supervised-sample", i as u64);
            let (pred, cache) = network.forward(params, &x, Mode::Train, &mut r)?;
            let ce = loss_cross_entropy(pred.data(), label)?;
            let up = Tensor::new(pred.shape().to_vec(), ce.grad_logits)?;
            network.backward_into(params, &cache, Upstream::Logits(&up), &mut buf[..len])?;
            buf[len] += ce.loss;
            if argmax(pred.data()) == label {
                buf[len + 1] += 1.0;
            }
            Ok(())
        })?;
        correct += g.pop().expect("accuracy slot");
        loss_sum += g.pop().expect("loss slot");
        let m = batch.len() as f64;
        for v in &mut g {
            *v /= m;
        }
        device.apply_gradient(&g)?;
    }
    let n = picks.len() as f64;
    let delta = device
        .params()
        .as_slice()
        .iter()
        .zip(&start)
        .map(|(a, b)| a - b)
        .collect();
    Ok(RoundMetrics {
        loss: loss_sum / n,
        accuracy: correct / n,
        delta,
    })
}

/// Eval-mode accuracy over `indices`.
pub fn evaluate_accuracy(
    network: &Network,
    params: &ParamStore,
    data: &Dataset,
    indices: &[usize],
    exec: Exec,
) -> Result<f64> {
    if indices.is_empty() {
        return Err(Error::Data("empty evaluation set".into()));
    }
    let hits = parallel::map(exec, indices, |&i| -> Result<bool> {
        let (x, label) = data.example(i);
        Ok(argmax(network.predict(params, &x)?.data()) == label)
    });
    let mut correct = 0usize;
    for h in hits {
        correct += usize::from(h?);
    }
    Ok(correct as f64 / indices.len() as f64)
}

/// Validates `params`; keeps them as the snapshot only on strict improvement.
pub fn validate_and_snapshot(
    trainer: &mut SupervisedTrainer,
    network: &Network,
    params: &ParamStore,
    data: &Dataset,
    validation: &[usize],
    round: u64,
    exec: Exec,
) -> Result<f64> {
    let acc = evaluate_accuracy(network, params, data, validation, exec)?;
    if trainer.best_accuracy.is_none_or(|b| acc > b) {
        trainer.best_accuracy = Some(acc);
        trainer.best_round = Some(round);
        trainer.snapshot = params.flatten();
    }
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn replacement_rule() {
        let mut r = StreamRng::seed_from_u64(0);
        assert_eq!(round_indices(&[7], 2000, &mut r), vec![7; 2000]);
        let mut got = round_indices(&[1, 2, 3], 3, &mut r);
        got.sort_unstable();
        assert_eq!(got, vec![1, 2, 3]);
    }
}

//! Double deep Q-learning with experience replay.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::replay::{ReplayBuffer, Transition};
use super::schedule::EpsilonSchedule;
use crate::nn::network::Upstream;
use crate::nn::tensor::argmax;
use crate::nn::{loss_huber, Mode, Network, ParamStore, Tensor};
use crate::parallel::{sum_vectors, Exec};
use crate::protocol::{CoordinatorLink, DeviceState};
use crate::rng::{self, StreamRng};
use crate::worlds::{Action, GridConfig, GridWorld};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DdqlConfig {
    pub gamma: f64,
    pub batch_size: usize,
    pub replay_capacity: usize,
    /// Environment steps before training starts; `None` means `replay_capacity / 20`.
    pub warmup_steps: Option<u64>,
    pub huber_delta: f64,
    pub epsilon: EpsilonSchedule,
}

impl Default for DdqlConfig {
    fn default() -> Self {
        DdqlConfig {
            gamma: 0.99,
            batch_size: 32,
            replay_capacity: 1_000_000,
            warmup_steps: None,
            huber_delta: 1.0,
            epsilon: EpsilonSchedule::default(),
        }
    }
}

impl DdqlConfig {
    pub fn warmup(&self) -> u64 {
        self.warmup_steps.unwrap_or(self.replay_capacity as u64 / 20)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::Config("gamma must lie in (0, 1)".into()));
        }
        if self.batch_size == 0 || self.batch_size > self.replay_capacity {
            return Err(Error::Config("batch size must be in 1..=replay capacity".into()));
        }
        if !(self.huber_delta > 0.0) {
            return Err(Error::Config("huber delta must be positive".into()));
        }
        self.epsilon.validate()
    }
}

/// ε-greedy action; greedy ties go to the lowest index.
pub fn ddql_act(
    network: &Network,
    params: &ParamStore,
    state: &Tensor,
    epsilon: f64,
    rng: &mut impl Rng,
) -> Result<usize> {
    if !(0.0..=1.0).contains(&epsilon) {
        return Err(Error::Config(format!("epsilon {epsilon} outside [0, 1]")));
    }
    let actions = network.output_shape().iter().product::<usize>();
    if epsilon > 0.0 && rng.random::<f64>() < epsilon {
        return Ok(rng.random_range(0..actions));
    }
    Ok(argmax(network.predict(params, state)?.data()))
}

/// `r` for terminal transitions, else `r + γ·Q_target(s', argmax_a Q_online(s', a))`.
pub fn double_q_target(
    reward: f64,
    terminal: bool,
    gamma: f64,
    q_online_next: &[f64],
    q_target_next: &[f64],
) -> Result<f64> {
    let y = if terminal {
        reward
    } else {
        reward + gamma * q_target_next[argmax(q_online_next)]
    };
    if !y.is_finite() {
        return Err(Error::NonFinite("double-Q target".into()));
    }
    Ok(y)
}

/// Mean Huber-loss gradient over a batch (first return) and the mean loss.
#[allow(clippy::too_many_arguments)]
pub fn ddql_train_batch(
    network: &Network,
    online: &ParamStore,
    target: &ParamStore,
    batch: &[&Transition],
    gamma: f64,
    huber_delta: f64,
    seed: u64,
    exec: Exec,
) -> Result<(Vec<f64>, f64)> {
    if batch.is_empty() {
        return Err(Error::Config("empty training batch".into()));
    }
    let len = online.len();
    let mut sum = sum_vectors(exec, batch.len(), len + 1, |i, buf| -> Result<()> {
        let t = batch[i];
        let y = if t.terminal {
            double_q_target(t.reward, true, gamma, &[], &[])?
        } else {
            let qo = network.predict(online, &t.next_state)?;
            let qt = network.predict(target, &t.next_state)?;
            double_q_target(t.reward, false, gamma, qo.data(), qt.data())?
        };
        let mut r = rng::stream(seed, "ddql-sample", i as u64);
        let (q, cache) = network.forward(online, &t.state, Mode::Train, &mut r)?;
        let (loss, dq) = loss_huber(y, q.data()[t.action], huber_delta);
        let mut up = Tensor::zeros(q.shape());
        up.data_mut()[t.action] = dq;
        network.backward_into(online, &cache, Upstream::Output(&up), &mut buf[..len])?;
        buf[len] += loss;
        Ok(())
    })?;
    let n = batch.len() as f64;
    for v in &mut sum {
        *v /= n;
    }
    let loss = sum.pop().expect("loss slot");
    Ok((sum, loss))
}

/// Sync over `link` (or flush locally when isolated), then refresh the target network.
pub fn ddql_target_and_device_sync(
    agent: &mut DdqlAgent,
    device: &mut DeviceState,
    link: Option<&mut dyn CoordinatorLink>,
) -> Result<()> {
    match link {
        Some(link) => device.device_sync(link)?,
        None => device.local_flush()?,
    }
    agent.copy_target(device);
    Ok(())
}

/// One evaluation episode on a fresh environment; returns the undiscounted return.
pub fn run_test_episode(
    network: &Network,
    params: &ParamStore,
    env: &GridConfig,
    epsilon: f64,
    rng: &mut StreamRng,
) -> Result<f64> {
    let mut world = GridWorld::new(env.clone())?;
    let mut state = world.reset();
    let mut total = 0.0;
    loop {
        let a = ddql_act(network, params, &state, epsilon, rng)?;
        let step = world.step(Action::from_index(a)?, rng)?;
        total += step.reward;
        if step.done() {
            return Ok(total);
        }
        state = step.state;
    }
}

/// Learner state owned by one RL device: target network, replay, environment and RNG.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DdqlAgent {
    pub config: DdqlConfig,
    target: Vec<f64>,
    replay: ReplayBuffer,
    world: GridWorld,
    state: Tensor,
    steps: u64,
    episode_return: f64,
    rng: StreamRng,
}

impl DdqlAgent {
    pub fn new(config: DdqlConfig, online: &ParamStore, env: GridConfig, rng: StreamRng) -> Result<Self> {
        config.validate()?;
        let mut world = GridWorld::new(env)?;
        let state = world.reset();
        Ok(DdqlAgent {
            replay: ReplayBuffer::new(config.replay_capacity)?,
            config,
            target: online.flatten(),
            world,
            state,
            steps: 0,
            episode_return: 0.0,
            rng,
        })
    }

    /// Environment steps taken so far.
    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn replay(&self) -> &ReplayBuffer {
        &self.replay
    }

    pub fn target_flat(&self) -> &[f64] {
        &self.target
    }

    pub fn target_params(&self, online: &ParamStore) -> Result<ParamStore> {
        ParamStore::unflatten(online.layout().clone(), self.target.clone())
    }

    pub fn copy_target(&mut self, device: &DeviceState) {
        self.target = device.params().flatten();
    }

    /// Acts once, stores the transition and, after warmup, trains on a replay batch.
    /// Returns the episode return when an episode finished on this step.
    pub fn env_step(&mut self, network: &Network, device: &mut DeviceState, exec: Exec) -> Result<Option<f64>> {
        let eps = self.config.epsilon.value(self.steps);
        let a = ddql_act(network, device.params(), &self.state, eps, &mut self.rng)?;
        let step = self.world.step(Action::from_index(a)?, &mut self.rng)?;
        self.episode_return += step.reward;
        let done = step.done();
        self.replay.push(Transition {
            state: std::mem::replace(&mut self.state, step.state),
            action: a,
            reward: step.reward,
            next_state: self.state.clone(),
            terminal: step.terminal,
        });
        let finished = if done {
            self.state = self.world.reset();
            Some(std::mem::take(&mut self.episode_return))
        } else {
            None
        };
        self.steps += 1;
        if self.steps >= self.config.warmup() && self.replay.len() >= self.config.batch_size {
            let seed: u64 = self.rng.random();
            let batch = self.replay.sample(self.config.batch_size, &mut self.rng)?;
            let target = self.target_params(device.params())?;
            let (grad, _) = ddql_train_batch(
                network,
                device.params(),
                &target,
                &batch,
                self.config.gamma,
                self.config.huber_delta,
                seed,
                exec,
            )?;
            device.apply_gradient(&grad)?;
        }
        Ok(finished)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::LayerSpec;
    use rand::SeedableRng;

    fn identity_q(values: &[f64]) -> (Network, ParamStore) {
        // Dense with zero weights and the Q values as bias.
        let n = values.len();
        let net = Network::sequential(&[1], &[LayerSpec::Dense { units: n }]).unwrap();
        let mut flat = vec![0.0; n];
        flat.extend_from_slice(values);
        let p = ParamStore::unflatten(net.layout().clone(), flat).unwrap();
        (net, p)
    }

    #[test]
    fn greedy_and_ties() {
        let mut r = StreamRng::seed_from_u64(0);
        let (n, p) = identity_q(&[1.0, 3.0, 2.0]);
        assert_eq!(ddql_act(&n, &p, &Tensor::vector(vec![0.0]), 0.0, &mut r).unwrap(), 1);
        let (n, p) = identity_q(&[2.0, 2.0]);
        assert_eq!(ddql_act(&n, &p, &Tensor::vector(vec![0.0]), 0.0, &mut r).unwrap(), 0);
        assert!(ddql_act(&n, &p, &Tensor::vector(vec![0.0]), 1.5, &mut r).is_err());
    }

    #[test]
    fn uniform_under_full_exploration() {
        let mut r = StreamRng::seed_from_u64(1);
        let (n, p) = identity_q(&[0.0, 9.0, 0.0]);
        let mut counts = [0usize; 3];
        for _ in 0..10_000 {
            counts[ddql_act(&n, &p, &Tensor::vector(vec![0.0]), 1.0, &mut r).unwrap()] += 1;
        }
        let sigma = (10_000.0 * (1.0 / 3.0) * (2.0 / 3.0_f64)).sqrt();
        for c in counts {
            assert!((c as f64 - 10_000.0 / 3.0).abs() < 3.0 * sigma);
        }
    }

    #[test]
    fn double_q_uses_target_value_at_online_argmax() {
        let y = double_q_target(0.0, false, 0.99, &[1.0, 5.0, 2.0], &[0.5, 2.0, 9.0]).unwrap();
        assert!((y - 1.98).abs() < 1e-12);
        assert_eq!(double_q_target(1.0, true, 0.99, &[7.0], &[7.0]).unwrap(), 1.0);
        assert!(double_q_target(f64::NAN, true, 0.99, &[], &[]).is_err());
    }

    #[test]
    fn batch_gradient_matches_hand_computation() {
        let (net, online) = identity_q(&[0.5, 0.0]);
        let target = online.clone();
        let t = Transition {
            state: Tensor::vector(vec![0.0]),
            action: 0,
            reward: 1.0,
            next_state: Tensor::vector(vec![0.0]),
            terminal: true,
        };
        let (g, loss) = ddql_train_batch(&net, &online, &target, &[&t], 0.9, 1.0, 0, Exec::Sequential).unwrap();
        // e = 1 - 0.5: loss 0.125, d/dQ = -0.5 lands on the first bias.
        assert_eq!(loss, 0.125);
        assert_eq!(g, vec![0.0, 0.0, -0.5, 0.0]);
    }
}

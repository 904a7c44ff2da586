use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use super::coordinator::Coordinator;
use super::message::{DeviceId, RealWidth, SyncMessage};
use crate::nn::{OptimizerConfig, OptimizerState, ParamStore};
use crate::topology::ParameterPartition;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DeviceMode {
    /// Raw gradients are summed over the sync period. At sync the shared part is sent and the
    /// optimizer applies the local part.
    Accumulate,
    /// The optimizer runs every step; the shared update is `theta_shared(now) - theta_shared(last sync)`.
    #[default]
    LocalStep,
}

/// A device's end of the protocol.
pub trait CoordinatorLink {
    fn send(&mut self, msg: SyncMessage) -> Result<()>;
    fn recv(&mut self) -> Result<SyncMessage>;
}

/// Link that hands messages straight to a coordinator on the same thread. Only usable when the
/// coordinator can reply immediately (asynchronous mode, or a synchronous barrier of one).
pub struct InlineLink<'a> {
    coordinator: &'a mut Coordinator,
    device: DeviceId,
    inbox: VecDeque<SyncMessage>,
}

impl<'a> InlineLink<'a> {
    pub fn new(coordinator: &'a mut Coordinator, device: DeviceId) -> Self {
        InlineLink {
            coordinator,
            device,
            inbox: VecDeque::new(),
        }
    }
}

impl CoordinatorLink for InlineLink<'_> {
    fn send(&mut self, msg: SyncMessage) -> Result<()> {
        for reply in self.coordinator.handle(msg)? {
            if reply.device() == self.device {
                self.inbox.push_back(reply);
            }
        }
        Ok(())
    }

    fn recv(&mut self) -> Result<SyncMessage> {
        self.inbox.pop_front().ok_or_else(|| {
            Error::Protocol(format!(
                "no reply for device {} (would block on the barrier)",
                self.device
            ))
        })
    }
}

/// Parameters, pending update, and optimizer of one simulated device.
#[derive(Debug, Clone)]
pub struct DeviceState {
    pub id: DeviceId,
    partition: ParameterPartition,
    params: ParamStore,
    accumulated: Vec<f64>,
    anchor_shared: Vec<f64>,
    optimizer: OptimizerState,
    mode: DeviceMode,
    pub sync_period: u64,
    pub data_size: u64,
    width: RealWidth,
    steps_since_sync: u64,
    bytes_sent: u64,
}

/// Serializable snapshot of a [`DeviceState`] (the layout is rebuilt from the topology).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceSnapshot {
    pub params: Vec<f64>,
    pub accumulated: Vec<f64>,
    pub anchor_shared: Vec<f64>,
    pub optimizer: OptimizerState,
    pub steps_since_sync: u64,
    pub bytes_sent: u64,
}

impl DeviceState {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        id: DeviceId,
        partition: ParameterPartition,
        params: ParamStore,
        optimizer: OptimizerConfig,
        mode: DeviceMode,
        sync_period: u64,
        data_size: u64,
        width: RealWidth,
    ) -> Result<Self> {
        if params.len() != partition.total() {
            return Err(Error::Length {
                expected: partition.total(),
                actual: params.len(),
            });
        }
        if sync_period == 0 {
            return Err(Error::Config("sync period must be positive".into()));
        }
        let opt_len = match mode {
            DeviceMode::LocalStep => partition.total(),
            DeviceMode::Accumulate => partition.local_len,
        };
        let anchor_shared = params.as_slice()[..partition.shared_len].to_vec();
        Ok(DeviceState {
            id,
            partition,
            accumulated: vec![0.0; params.len()],
            anchor_shared,
            optimizer: OptimizerState::new(optimizer, opt_len)?,
            params,
            mode,
            sync_period,
            data_size,
            width,
            steps_since_sync: 0,
            bytes_sent: 0,
        })
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn partition(&self) -> ParameterPartition {
        self.partition
    }

    pub fn mode(&self) -> DeviceMode {
        self.mode
    }

    pub fn optimizer(&self) -> &OptimizerState {
        &self.optimizer
    }

    pub fn accumulated(&self) -> &[f64] {
        &self.accumulated
    }

    pub fn bytes_sent(&self) -> u64 {
        self.bytes_sent
    }

    pub fn shared_params(&self) -> &[f64] {
        &self.params.as_slice()[..self.partition.shared_len]
    }

    pub fn local_params(&self) -> &[f64] {
        &self.params.as_slice()[self.partition.shared_len..]
    }

    /// Replaces all parameters (e.g. restoring a snapshot); the sync anchor follows.
    pub fn set_params(&mut self, values: &[f64]) -> Result<()> {
        self.params.set_from_slice(values)?;
        self.anchor_shared = self.shared_params().to_vec();
        Ok(())
    }

    /// True when a sync is due after global step `t`.
    pub fn sync_due(&self, t: u64) -> bool {
        t > 0 && t % self.sync_period == 0
    }

    /// Feeds one step's gradient into the device.
    pub fn apply_gradient(&mut self, grad: &[f64]) -> Result<()> {
        if grad.len() != self.params.len() {
            return Err(Error::Length {
                expected: self.params.len(),
                actual: grad.len(),
            });
        }
        match self.mode {
            DeviceMode::LocalStep => self.optimizer.step(self.params.as_mut_slice(), grad)?,
            DeviceMode::Accumulate => {
                if !grad.iter().all(|g| g.is_finite()) {
                    return Err(Error::NonFinite("accumulated gradient".into()));
                }
                for (a, g) in self.accumulated.iter_mut().zip(grad) {
                    *a += g;
                }
            }
        }
        self.steps_since_sync += 1;
        Ok(())
    }

    pub fn registration(&self) -> SyncMessage {
        SyncMessage::Register {
            device: self.id,
            shared_len: self.partition.shared_len as u64,
            data_size: self.data_size,
        }
    }

    /// Adopts the coordinator's initial shared parameters.
    pub fn receive_initial(&mut self, msg: SyncMessage) -> Result<()> {
        let shared = self.expect_broadcast(msg)?;
        let n = self.partition.shared_len;
        self.params.as_mut_slice()[..n].copy_from_slice(&shared);
        self.anchor_shared = shared;
        Ok(())
    }

    /// First half of a sync: the shared part of the pending update, ready to send.
    pub fn sync_begin(&mut self) -> Result<SyncMessage> {
        let n = self.partition.shared_len;
        let mut delta = match self.mode {
            DeviceMode::Accumulate => self.accumulated[..n].to_vec(),
            DeviceMode::LocalStep => self.params.as_slice()[..n]
                .iter()
                .zip(&self.anchor_shared)
                .map(|(now, then)| now - then)
                .collect(),
        };
        self.width.quantize(&mut delta);
        let msg = SyncMessage::GradientUpdate {
            device: self.id,
            delta,
            local_steps: self.steps_since_sync,
        };
        self.bytes_sent += msg.payload_bytes(self.width) as u64;
        Ok(msg)
    }

    fn expect_broadcast(&self, msg: SyncMessage) -> Result<Vec<f64>> {
        match msg {
            SyncMessage::ParamBroadcast { device, params, .. } => {
                if device != self.id {
                    return Err(Error::Protocol(format!(
                        "device {} received a broadcast addressed to {device}",
                        self.id
                    )));
                }
                if params.len() != self.partition.shared_len {
                    return Err(Error::Length {
                        expected: self.partition.shared_len,
                        actual: params.len(),
                    });
                }
                Ok(params)
            }
            other => Err(Error::Protocol(format!(
                "device {} expected a broadcast, got {other:?}",
                self.id
            ))),
        }
    }

    /// Second half of a sync: adopt the new shared parameters, apply the local update (in
    /// accumulate mode) and clear the accumulator.
    pub fn sync_finish(&mut self, msg: SyncMessage) -> Result<()> {
        let shared = self.expect_broadcast(msg)?;
        self.adopt_shared_and_flush(&shared)
    }

    fn adopt_shared_and_flush(&mut self, shared: &[f64]) -> Result<()> {
        let n = self.partition.shared_len;
        let mode = self.mode;
        let accumulated = std::mem::replace(&mut self.accumulated, vec![0.0; self.params.len()]);
        let flat = self.params.as_mut_slice();
        flat[..n].copy_from_slice(shared);
        if mode == DeviceMode::Accumulate && self.partition.local_len > 0 {
            self.optimizer.step(&mut flat[n..], &accumulated[n..])?;
        }
        self.anchor_shared = shared.to_vec();
        self.steps_since_sync = 0;
        Ok(())
    }

    /// Sync point without a coordinator (isolated runs): the local update is applied and the
    /// accumulator cleared, but nothing is sent.
    pub fn local_flush(&mut self) -> Result<()> {
        let shared = self.shared_params().to_vec();
        self.adopt_shared_and_flush(&shared)
    }

    /// Full device-side sync over a link: send the shared update, block for the new shared
    /// parameters, then finish.
    pub fn device_sync(&mut self, link: &mut dyn CoordinatorLink) -> Result<()> {
        let msg = self.sync_begin()?;
        link.send(msg)
            .map_err(|e| annotate_closed(self.id, e))?;
        let reply = link.recv().map_err(|e| annotate_closed(self.id, e))?;
        self.sync_finish(reply)
    }

    pub fn snapshot(&self) -> DeviceSnapshot {
        DeviceSnapshot {
            params: self.params.flatten(),
            accumulated: self.accumulated.clone(),
            anchor_shared: self.anchor_shared.clone(),
            optimizer: self.optimizer.clone(),
            steps_since_sync: self.steps_since_sync,
            bytes_sent: self.bytes_sent,
        }
    }

    pub fn restore(&mut self, snap: DeviceSnapshot) -> Result<()> {
        if snap.accumulated.len() != self.params.len()
            || snap.anchor_shared.len() != self.partition.shared_len
        {
            return Err(Error::Checkpoint("device snapshot does not match its partition".into()));
        }
        self.params.set_from_slice(&snap.params)?;
        self.accumulated = snap.accumulated;
        self.anchor_shared = snap.anchor_shared;
        self.optimizer = snap.optimizer;
        self.steps_since_sync = snap.steps_since_sync;
        self.bytes_sent = snap.bytes_sent;
        Ok(())
    }
}

fn annotate_closed(device: DeviceId, e: Error) -> Error {
    match e {
        Error::ChannelClosed(msg) => {
            log::error!("device {device} halting: {msg}");
            Error::ChannelClosed(format!("device {device}: {msg}"))
        }
        other => other,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamLayout;
    use crate::protocol::{CoordinatorMode, WeightingSource};
    use std::sync::Arc;

    fn store(values: Vec<f64>) -> ParamStore {
        let mut l = ParamLayout::default();
        l.push_layer(0, &[vec![values.len()]]);
        ParamStore::unflatten(Arc::new(l), values).unwrap()
    }

    fn device(mode: DeviceMode, values: Vec<f64>, shared: usize) -> DeviceState {
        let n = values.len();
        DeviceState::new(
            0,
            ParameterPartition::new(shared, n - shared),
            store(values),
            OptimizerConfig::sgd(0.5),
            mode,
            2,
            10,
            RealWidth::F64,
        )
        .unwrap()
    }

    #[test]
    fn accumulate_sync_bookkeeping() {
        let mut d = device(DeviceMode::Accumulate, vec![0.0; 4], 2);
        d.apply_gradient(&[0.5, 1.0, 1.0, 2.0]).unwrap();
        d.apply_gradient(&[0.5, 1.0, 2.0, 2.0]).unwrap();
        assert!(d.sync_due(2));
        assert!(!d.sync_due(3));
        assert_eq!(d.accumulated(), &[1.0, 2.0, 3.0, 4.0]);
        let msg = d.sync_begin().unwrap();
        assert_eq!(msg.vector(), &[1.0, 2.0]);
        d.sync_finish(SyncMessage::ParamBroadcast { device: 0, params: vec![9.0, 8.0], round: 1 })
            .unwrap();
        // Local part moves by -lr * [3, 4].
        assert_eq!(d.params().as_slice(), &[9.0, 8.0, -1.5, -2.0]);
        assert_eq!(d.accumulated(), &[0.0; 4]);
    }

    #[test]
    fn zero_gradient_sends_zeros() {
        let mut d = device(DeviceMode::Accumulate, vec![1.0, 2.0, 3.0], 1);
        d.apply_gradient(&[0.0; 3]).unwrap();
        assert_eq!(d.sync_begin().unwrap().vector(), &[0.0]);
        d.sync_finish(SyncMessage::ParamBroadcast { device: 0, params: vec![1.0], round: 1 }).unwrap();
        assert_eq!(d.local_params(), &[2.0, 3.0]);
    }

    #[test]
    fn wrong_broadcast_length_rejected() {
        let mut d = device(DeviceMode::LocalStep, vec![0.0; 3], 2);
        d.sync_begin().unwrap();
        let r = d.sync_finish(SyncMessage::ParamBroadcast { device: 0, params: vec![0.0; 3], round: 1 });
        assert!(matches!(r, Err(Error::Length { .. })));
    }

    #[test]
    fn local_step_sends_parameter_delta() {
        let mut d = device(DeviceMode::LocalStep, vec![1.0, 1.0, 1.0], 2);
        d.apply_gradient(&[2.0, 0.0, 2.0]).unwrap();
        let msg = d.sync_begin().unwrap();
        assert_eq!(msg.vector(), &[-1.0, 0.0]);
        assert_eq!(d.bytes_sent(), 16);
    }

    #[test]
    fn sync_over_inline_async_link() {
        let mut c = Coordinator::new(vec![0.0, 0.0], CoordinatorMode::Asynchronous, WeightingSource::UniformSum, 1);
        let mut d = device(DeviceMode::LocalStep, vec![5.0, 5.0, 5.0], 2);
        {
            let mut link = InlineLink::new(&mut c, 0);
            link.send(d.registration()).unwrap();
            d.receive_initial(link.recv().unwrap()).unwrap();
        }
        assert_eq!(d.params().as_slice(), &[0.0, 0.0, 5.0]);
        d.apply_gradient(&[1.0, 1.0, 1.0]).unwrap();
        let mut link = InlineLink::new(&mut c, 0);
        d.device_sync(&mut link).unwrap();
        assert_eq!(d.shared_params(), &[-0.5, -0.5]);
        assert_eq!(c.shared(), &[-0.5, -0.5]);
    }
}

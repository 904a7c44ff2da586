use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::merge::{compute_merge_weights, merge_deltas, MergeWeights, WeightingSource};
use super::message::{DeviceId, RealWidth, SyncMessage};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CoordinatorMode {
    /// Waits for one update from every device, merges, then broadcasts to all.
    Synchronous,
    /// Applies each update on arrival and replies to its sender only.
    Asynchronous,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Registration {
    pub device: DeviceId,
    pub shared_len: u64,
    pub data_size: u64,
}

/// Authoritative copy of the shared parameters.
///
/// The merged update is scaled by `step_scale` before it is added; it is 1 when devices send
/// parameter deltas and `-learning_rate` when they send raw gradients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Coordinator {
    shared: Vec<f64>,
    mode: CoordinatorMode,
    weighting: WeightingSource,
    expected_devices: usize,
    registrations: BTreeMap<DeviceId, Registration>,
    weights: Option<MergeWeights>,
    pending: BTreeMap<DeviceId, Vec<f64>>,
    round: u64,
    step_scale: f64,
    width: RealWidth,
    bytes_received: u64,
}

impl Coordinator {
    pub fn new(
        initial_shared: Vec<f64>,
        mode: CoordinatorMode,
        weighting: WeightingSource,
        expected_devices: usize,
    ) -> Self {
        Coordinator {
            shared: initial_shared,
            mode,
            weighting,
            expected_devices,
            registrations: BTreeMap::new(),
            weights: None,
            pending: BTreeMap::new(),
            round: 0,
            step_scale: 1.0,
            width: RealWidth::F64,
            bytes_received: 0,
        }
    }

    pub fn with_step_scale(mut self, scale: f64) -> Self {
        self.step_scale = scale;
        self
    }

    pub fn with_width(mut self, width: RealWidth) -> Self {
        self.width = width;
        self.width.quantize(&mut self.shared);
        self
    }

    pub fn shared(&self) -> &[f64] {
        &self.shared
    }

    pub fn round(&self) -> u64 {
        self.round
    }

    pub fn mode(&self) -> CoordinatorMode {
        self.mode
    }

    pub fn bytes_received(&self) -> u64 {
        self.bytes_received
    }

    pub fn weights(&self) -> Option<&MergeWeights> {
        self.weights.as_ref()
    }

    pub fn is_ready(&self) -> bool {
        self.weights.is_some()
    }

    /// Weight of `device` in the merge.
    pub fn alpha(&self, device: DeviceId) -> Result<f64> {
        let idx = self
            .registrations
            .keys()
            .position(|d| *d == device)
            .ok_or(Error::UnknownDevice(device))?;
        let w = self
            .weights
            .as_ref()
            .ok_or_else(|| Error::Protocol("registration is not complete".into()))?;
        Ok(w.alphas[idx])
    }

    /// Registration handshake. Returns true once every expected device has registered, at
    /// which point merge weights are fixed.
    pub fn register(&mut self, reg: Registration) -> Result<bool> {
        if reg.shared_len as usize != self.shared.len() {
            return Err(Error::Protocol(format!(
                "device {} announces shared_len {} but coordinator holds {}",
                reg.device,
                reg.shared_len,
                self.shared.len()
            )));
        }
        if self.registrations.contains_key(&reg.device) {
            return Err(Error::Protocol(format!("device {} registered twice", reg.device)));
        }
        if self.registrations.len() >= self.expected_devices {
            return Err(Error::Protocol("more devices than expected".into()));
        }
        self.registrations.insert(reg.device, reg);
        if self.registrations.len() == self.expected_devices {
            let sizes: Vec<u64> = self.registrations.values().map(|r| r.data_size).collect();
            self.weights = Some(compute_merge_weights(&sizes, self.weighting)?);
            return Ok(true);
        }
        Ok(false)
    }

    fn check_update(&self, device: DeviceId, delta: &[f64]) -> Result<()> {
        if !self.registrations.contains_key(&device) {
            return Err(Error::UnknownDevice(device));
        }
        if !self.is_ready() {
            return Err(Error::Protocol("update before registration completed".into()));
        }
        if delta.len() != self.shared.len() {
            return Err(Error::Length {
                expected: self.shared.len(),
                actual: delta.len(),
            });
        }
        if !delta.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite(format!("update from device {device}")));
        }
        Ok(())
    }

    fn broadcast_value(&self) -> Vec<f64> {
        let mut v = self.shared.clone();
        self.width.quantize(&mut v);
        v
    }

    /// One synchronous round: `theta += scale * sum_k alpha_k * delta_k` over exactly one update
    /// per registered device. Returns the parameters to broadcast.
    pub fn sync_round(&mut self, updates: &[(DeviceId, Vec<f64>)]) -> Result<Vec<f64>> {
        if self.mode != CoordinatorMode::Synchronous {
            return Err(Error::Protocol("sync_round on an asynchronous coordinator".into()));
        }
        if !self.pending.is_empty() {
            return Err(Error::Protocol("a barrier round is already in progress".into()));
        }
        if updates.len() > self.registrations.len() {
            return Err(Error::Protocol(format!(
                "{} updates for {} devices",
                updates.len(),
                self.registrations.len()
            )));
        }
        let mut merged = None;
        for (device, delta) in updates {
            match self.submit(*device, delta.clone()) {
                Ok(r) => merged = r.or(merged),
                Err(e) => {
                    self.pending.clear();
                    return Err(e);
                }
            }
        }
        merged.ok_or_else(|| {
            let missing = self.missing();
            self.pending.clear();
            Error::BarrierTimeout {
                round: self.round,
                missing,
            }
        })
    }

    /// True while a synchronous round has some but not all updates.
    pub fn has_pending(&self) -> bool {
        !self.pending.is_empty()
    }

    /// Devices whose update for the current round has not arrived.
    pub fn missing(&self) -> Vec<DeviceId> {
        self.registrations
            .keys()
            .filter(|d| !self.pending.contains_key(d))
            .copied()
            .collect()
    }

    /// Barrier step: stores the update and, when the last one arrives, merges and returns the
    /// new shared parameters.
    pub fn submit(&mut self, device: DeviceId, delta: Vec<f64>) -> Result<Option<Vec<f64>>> {
        if self.mode != CoordinatorMode::Synchronous {
            return Err(Error::Protocol("submit on an asynchronous coordinator".into()));
        }
        self.check_update(device, &delta)?;
        if self.pending.contains_key(&device) {
            return Err(Error::Protocol(format!(
                "device {device} sent two updates in round {}",
                self.round
            )));
        }
        self.bytes_received += (delta.len() * self.width.bytes()) as u64;
        self.pending.insert(device, delta);
        if self.pending.len() < self.registrations.len() {
            return Ok(None);
        }
        let pending = std::mem::take(&mut self.pending);
        let deltas: Vec<&[f64]> = pending.values().map(|v| v.as_slice()).collect();
        let merged = merge_deltas(self.weights.as_ref().expect("checked"), &deltas)?;
        for (t, d) in self.shared.iter_mut().zip(&merged) {
            *t += self.step_scale * d;
        }
        self.width.quantize(&mut self.shared);
        self.round += 1;
        Ok(Some(self.broadcast_value()))
    }

    /// Asynchronous step: `theta += scale * alpha_k * delta` and the current parameters go back
    /// to device `k` only.
    pub fn async_handle(&mut self, device: DeviceId, delta: &[f64]) -> Result<Vec<f64>> {
        if self.mode != CoordinatorMode::Asynchronous {
            return Err(Error::Protocol("async_handle on a synchronous coordinator".into()));
        }
        self.check_update(device, delta)?;
        self.bytes_received += (delta.len() * self.width.bytes()) as u64;
        let alpha = self.alpha(device)?;
        for (t, d) in self.shared.iter_mut().zip(delta) {
            *t += self.step_scale * alpha * d;
        }
        self.width.quantize(&mut self.shared);
        self.round += 1;
        Ok(self.broadcast_value())
    }

    /// Message-level entry point used by channel transports. Returns the replies to deliver.
    pub fn handle(&mut self, msg: SyncMessage) -> Result<Vec<SyncMessage>> {
        match msg {
            SyncMessage::Register {
                device,
                shared_len,
                data_size,
            } => {
                let complete = self.register(Registration {
                    device,
                    shared_len,
                    data_size,
                })?;
                Ok(if complete { self.broadcast_all() } else { Vec::new() })
            }
            SyncMessage::GradientUpdate { device, delta, .. } => match self.mode {
                CoordinatorMode::Synchronous => Ok(match self.submit(device, delta)? {
                    Some(_) => self.broadcast_all(),
                    None => Vec::new(),
                }),
                CoordinatorMode::Asynchronous => {
                    let params = self.async_handle(device, &delta)?;
                    Ok(vec![SyncMessage::ParamBroadcast {
                        device,
                        params,
                        round: self.round,
                    }])
                }
            },
            SyncMessage::ParamBroadcast { device, .. } => Err(Error::Protocol(format!(
                "coordinator received a broadcast from device {device}"
            ))),
        }
    }

    fn broadcast_all(&self) -> Vec<SyncMessage> {
        let params = self.broadcast_value();
        self.registrations
            .keys()
            .map(|d| SyncMessage::ParamBroadcast {
                device: *d,
                params: params.clone(),
                round: self.round,
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn coord(mode: CoordinatorMode, w: WeightingSource, init: Vec<f64>, sizes: &[u64]) -> Coordinator {
        let mut c = Coordinator::new(init.clone(), mode, w, sizes.len());
        for (i, s) in sizes.iter().enumerate() {
            c.register(Registration { device: i as u32, shared_len: init.len() as u64, data_size: *s }).unwrap();
        }
        c
    }

    #[test]
    fn literal_sum_round() {
        let mut c = coord(CoordinatorMode::Synchronous, WeightingSource::UniformSum, vec![0.0, 0.0], &[1, 1]);
        let b = c.sync_round(&[(0, vec![1.0, 1.0]), (1, vec![2.0, 0.0])]).unwrap();
        assert_eq!(b, vec![3.0, 1.0]);
        assert_eq!(c.round(), 1);
    }

    #[test]
    fn proportional_round() {
        let mut c = coord(CoordinatorMode::Synchronous, WeightingSource::DataProportional, vec![0.0], &[40_000, 10_000]);
        let b = c.sync_round(&[(0, vec![1.0]), (1, vec![-3.0])]).unwrap();
        assert_eq!(b, vec![0.8 * 1.0 + 0.2 * -3.0]);
    }

    #[test]
    fn single_device_is_plain_update() {
        for w in [WeightingSource::UniformSum, WeightingSource::UniformAverage, WeightingSource::DataProportional] {
            let mut c = coord(CoordinatorMode::Synchronous, w, vec![1.0, 2.0], &[17]);
            assert_eq!(c.sync_round(&[(0, vec![0.5, -1.0])]).unwrap(), vec![1.5, 1.0]);
        }
    }

    #[test]
    fn barrier_waits_for_everyone() {
        let mut c = coord(CoordinatorMode::Synchronous, WeightingSource::UniformSum, vec![0.0], &[1, 1, 1]);
        assert_eq!(c.submit(2, vec![1.0]).unwrap(), None);
        assert_eq!(c.submit(0, vec![1.0]).unwrap(), None);
        assert_eq!(c.shared(), &[0.0]);
        assert_eq!(c.missing(), vec![1]);
        assert_eq!(c.submit(1, vec![1.0]).unwrap(), Some(vec![3.0]));
    }

    #[test]
    fn missing_update_times_out() {
        let mut c = coord(CoordinatorMode::Synchronous, WeightingSource::UniformSum, vec![0.0], &[1, 1]);
        match c.sync_round(&[(0, vec![1.0])]) {
            Err(Error::BarrierTimeout { missing, .. }) => assert_eq!(missing, vec![1]),
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(c.shared(), &[0.0]);
    }

    #[test]
    fn async_serialisation() {
        let mut c = coord(CoordinatorMode::Asynchronous, WeightingSource::UniformSum, vec![0.0], &[1, 1]);
        assert_eq!(c.async_handle(0, &[1.0]).unwrap(), vec![1.0]);
        assert_eq!(c.async_handle(1, &[2.0]).unwrap(), vec![3.0]);

        let mut c = coord(CoordinatorMode::Asynchronous, WeightingSource::UniformSum, vec![0.0], &[1, 1]);
        assert_eq!(c.async_handle(1, &[2.0]).unwrap(), vec![2.0]);
        assert_eq!(c.async_handle(0, &[1.0]).unwrap(), vec![3.0]);

        assert_eq!(c.async_handle(0, &[0.0]).unwrap(), vec![3.0]);
        assert!(matches!(c.async_handle(5, &[0.0]), Err(Error::UnknownDevice(5))));
    }

    #[test]
    fn registration_checks() {
        let mut c = Coordinator::new(vec![0.0; 3], CoordinatorMode::Synchronous, WeightingSource::UniformSum, 1);
        assert!(c.register(Registration { device: 0, shared_len: 2, data_size: 1 }).is_err());
        assert!(c.register(Registration { device: 0, shared_len: 3, data_size: 1 }).unwrap());
        assert!(c.register(Registration { device: 1, shared_len: 3, data_size: 1 }).is_err());
        assert!(c.submit(0, vec![0.0; 2]).is_err());
    }
}

//! Threaded transport: each device talks to a coordinator thread over FIFO channels that carry
//! encoded frames.

use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::thread::JoinHandle;
use std::time::Duration;

use super::coordinator::Coordinator;
use super::device::CoordinatorLink;
use super::message::{decode_frame, encode_frame, DeviceId, RealWidth, SyncMessage};
use crate::{Error, Result};

/// Device side of a threaded link.
pub struct DeviceEndpoint {
    device: DeviceId,
    width: RealWidth,
    timeout: Duration,
    to_coordinator: Sender<Vec<u8>>,
    from_coordinator: Receiver<Vec<u8>>,
}

impl DeviceEndpoint {
    pub fn device(&self) -> DeviceId {
        self.device
    }
}

impl CoordinatorLink for DeviceEndpoint {
    fn send(&mut self, msg: SyncMessage) -> Result<()> {
        self.to_coordinator
            .send(encode_frame(&msg, self.width))
            .map_err(|_| Error::ChannelClosed("coordinator is gone".into()))
    }

    fn recv(&mut self) -> Result<SyncMessage> {
        let bytes = self
            .from_coordinator
            .recv_timeout(self.timeout)
            .map_err(|e| match e {
                RecvTimeoutError::Timeout => Error::BarrierTimeout {
                    round: 0,
                    missing: Vec::new(),
                },
                RecvTimeoutError::Disconnected => {
                    Error::ChannelClosed("coordinator hung up".into())
                }
            })?;
        let (msg, used) = decode_frame(&bytes, self.width)?;
        if used != bytes.len() {
            return Err(Error::Frame(format!("{} trailing bytes", bytes.len() - used)));
        }
        Ok(msg)
    }
}

/// Starts a coordinator thread serving devices `0..n` where `n` is the number of expected
/// devices. The thread exits once every endpoint is dropped and returns the final coordinator.
/// A round that waits longer than `timeout` for updates fails with the missing device ids.
pub fn spawn_coordinator(
    mut coordinator: Coordinator,
    expected_devices: usize,
    width: RealWidth,
    timeout: Duration,
) -> (Vec<DeviceEndpoint>, JoinHandle<Result<Coordinator>>) {
    let (up_tx, up_rx) = mpsc::channel::<Vec<u8>>();
    let mut replies = Vec::with_capacity(expected_devices);
    let mut endpoints = Vec::with_capacity(expected_devices);
    for d in 0..expected_devices {
        let (tx, rx) = mpsc::channel();
        replies.push(tx);
        endpoints.push(DeviceEndpoint {
            device: d as DeviceId,
            width,
            timeout,
            to_coordinator: up_tx.clone(),
            from_coordinator: rx,
        });
    }
    drop(up_tx);
    let handle = std::thread::spawn(move || -> Result<Coordinator> {
        loop {
            let bytes = match up_rx.recv_timeout(timeout) {
                Ok(b) => b,
                Err(RecvTimeoutError::Disconnected) => return Ok(coordinator),
                Err(RecvTimeoutError::Timeout) => {
                    if !coordinator.has_pending() {
                        continue;
                    }
                    let missing = coordinator.missing();
                    log::error!("round {} stalled, missing {missing:?}", coordinator.round());
                    return Err(Error::BarrierTimeout {
                        round: coordinator.round(),
                        missing,
                    });
                }
            };
            let (msg, _) = decode_frame(&bytes, width)?;
            for reply in coordinator.handle(msg)? {
                let d = reply.device() as usize;
                let tx = replies.get(d).ok_or(Error::UnknownDevice(reply.device()))?;
                // A device that already left is not an error for the others.
                let _ = tx.send(encode_frame(&reply, width));
            }
        }
    });
    (endpoints, handle)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocol::{CoordinatorMode, WeightingSource};

    fn register(ep: &mut DeviceEndpoint, size: u64) {
        ep.send(SyncMessage::Register { device: ep.device(), shared_len: 2, data_size: size })
            .unwrap();
    }

    #[test]
    fn threaded_sync_round() {
        let c = Coordinator::new(vec![0.0, 0.0], CoordinatorMode::Synchronous, WeightingSource::UniformSum, 2);
        let (eps, handle) = spawn_coordinator(c, 2, RealWidth::F64, Duration::from_secs(5));
        let workers: Vec<_> = eps
            .into_iter()
            .map(|mut ep| {
                std::thread::spawn(move || {
                    register(&mut ep, 1);
                    let init = ep.recv().unwrap();
                    assert_eq!(init.vector(), &[0.0, 0.0]);
                    let d = ep.device() as f64;
                    ep.send(SyncMessage::GradientUpdate { device: ep.device(), delta: vec![1.0 + d, 1.0 - d], local_steps: 1 })
                        .unwrap();
                    ep.recv().unwrap().vector().to_vec()
                })
            })
            .collect();
        for w in workers {
            assert_eq!(w.join().unwrap(), vec![3.0, 1.0]);
        }
        let c = handle.join().unwrap().unwrap();
        assert_eq!(c.round(), 1);
    }

    #[test]
    fn missing_update_times_out() {
        let c = Coordinator::new(vec![0.0, 0.0], CoordinatorMode::Synchronous, WeightingSource::UniformSum, 2);
        let (mut eps, handle) = spawn_coordinator(c, 2, RealWidth::F64, Duration::from_millis(100));
        let mut b = eps.pop().unwrap();
        let mut a = eps.pop().unwrap();
        register(&mut a, 1);
        register(&mut b, 1);
        a.recv().unwrap();
        b.recv().unwrap();
        a.send(SyncMessage::GradientUpdate { device: 0, delta: vec![1.0, 1.0], local_steps: 1 }).unwrap();
        match handle.join().unwrap() {
            Err(Error::BarrierTimeout { round, missing }) => {
                assert_eq!(round, 0);
                assert_eq!(missing, vec![1]);
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(a.recv(), Err(Error::ChannelClosed(_))));
    }
}

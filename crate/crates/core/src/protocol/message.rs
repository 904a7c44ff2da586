//! Protocol messages and their binary frame encoding.
//!
//! Frame layout, all little-endian:
//!
//! ```text
//! u32 tag | u32 device_id | u64 vector_length | vector_length reals (f32 or f64) | u64 aux0 | u64 aux1
//! ```
//!
//! Tags: 1 = Register (aux0 = shared_len, aux1 = data_size), 2 = GradientUpdate
//! (aux0 = local step count), 3 = ParamBroadcast (device_id = recipient, aux0 = round).

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub type DeviceId = u32;

const TAG_REGISTER: u32 = 1;
const TAG_UPDATE: u32 = 2;
const TAG_BROADCAST: u32 = 3;
const HEADER: usize = 16;
const TRAILER: usize = 16;

/// Width of reals on the wire.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum RealWidth {
    F32,
    #[default]
    F64,
}

impl RealWidth {
    pub fn bytes(self) -> usize {
        match self {
            RealWidth::F32 => 4,
            RealWidth::F64 => 8,
        }
    }

    /// Rounds values to what survives a trip over the wire.
    pub fn quantize(self, values: &mut [f64]) {
        if self == RealWidth::F32 {
            for v in values {
                *v = *v as f32 as f64;
            }
        }
    }
}

impl TryFrom<u8> for RealWidth {
    type Error = String;
    fn try_from(v: u8) -> std::result::Result<Self, String> {
        match v {
            4 => Ok(RealWidth::F32),
            8 => Ok(RealWidth::F64),
            _ => Err(format!("real width must be 4 or 8 bytes, got {v}")),
        }
    }
}

impl From<RealWidth> for u8 {
    fn from(w: RealWidth) -> u8 {
        w.bytes() as u8
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum SyncMessage {
    Register {
        device: DeviceId,
        shared_len: u64,
        data_size: u64,
    },
    GradientUpdate {
        device: DeviceId,
        delta: Vec<f64>,
        local_steps: u64,
    },
    ParamBroadcast {
        device: DeviceId,
        params: Vec<f64>,
        round: u64,
    },
}

impl SyncMessage {
    pub fn device(&self) -> DeviceId {
        match self {
            SyncMessage::Register { device, .. }
            | SyncMessage::GradientUpdate { device, .. }
            | SyncMessage::ParamBroadcast { device, .. } => *device,
        }
    }

    pub fn vector(&self) -> &[f64] {
        match self {
            SyncMessage::Register { .. } => &[],
            SyncMessage::GradientUpdate { delta, .. } => delta,
            SyncMessage::ParamBroadcast { params, .. } => params,
        }
    }

    /// Bytes of real-valued payload.
    pub fn payload_bytes(&self, width: RealWidth) -> usize {
        self.vector().len() * width.bytes()
    }
}

pub fn encode_frame(msg: &SyncMessage, width: RealWidth) -> Vec<u8> {
    let (tag, aux0, aux1) = match msg {
        SyncMessage::Register {
            shared_len,
            data_size,
            ..
        } => (TAG_REGISTER, *shared_len, *data_size),
        SyncMessage::GradientUpdate { local_steps, .. } => (TAG_UPDATE, *local_steps, 0),
        SyncMessage::ParamBroadcast { round, .. } => (TAG_BROADCAST, *round, 0),
    };
    let v = msg.vector();
    let mut out = Vec::with_capacity(HEADER + v.len() * width.bytes() + TRAILER);
    out.extend_from_slice(&tag.to_le_bytes());
    out.extend_from_slice(&msg.device().to_le_bytes());
    out.extend_from_slice(&(v.len() as u64).to_le_bytes());
    for x in v {
        match width {
            RealWidth::F32 => out.extend_from_slice(&(*x as f32).to_le_bytes()),
            RealWidth::F64 => out.extend_from_slice(&x.to_le_bytes()),
        }
    }
    out.extend_from_slice(&aux0.to_le_bytes());
    out.extend_from_slice(&aux1.to_le_bytes());
    out
}

fn take<const N: usize>(bytes: &[u8], at: usize) -> Result<[u8; N]> {
    bytes
        .get(at..at + N)
        .and_then(|s| s.try_into().ok())
        .ok_or_else(|| Error::Frame(format!("truncated at byte {at}")))
}

/// Decodes one frame from the front of `bytes`; returns the message and bytes consumed.
pub fn decode_frame(bytes: &[u8], width: RealWidth) -> Result<(SyncMessage, usize)> {
    let tag = u32::from_le_bytes(take(bytes, 0)?);
    let device = u32::from_le_bytes(take(bytes, 4)?);
    let len = u64::from_le_bytes(take(bytes, 8)?);
    let len = usize::try_from(len).map_err(|_| Error::Frame("vector length overflow".into()))?;
    let w = width.bytes();
    let body_end = len
        .checked_mul(w)
        .and_then(|b| b.checked_add(HEADER))
        .ok_or_else(|| Error::Frame("vector length overflow".into()))?;
    if bytes.len() < body_end + TRAILER {
        return Err(Error::Frame(format!(
            "frame declares {len} reals but only {} bytes are present",
            bytes.len()
        )));
    }
    let mut v = Vec::with_capacity(len);
    for i in 0..len {
        let at = HEADER + i * w;
        v.push(match width {
            RealWidth::F32 => f32::from_le_bytes(take(bytes, at)?) as f64,
            RealWidth::F64 => f64::from_le_bytes(take(bytes, at)?),
        });
    }
    let aux0 = u64::from_le_bytes(take(bytes, body_end)?);
    let aux1 = u64::from_le_bytes(take(bytes, body_end + 8)?);
    let msg = match tag {
        TAG_REGISTER => {
            if len != 0 {
                return Err(Error::Frame("register frames carry no reals".into()));
            }
            SyncMessage::Register {
                device,
                shared_len: aux0,
                data_size: aux1,
            }
        }
        TAG_UPDATE => SyncMessage::GradientUpdate {
            device,
            delta: v,
            local_steps: aux0,
        },
        TAG_BROADCAST => SyncMessage::ParamBroadcast {
            device,
            params: v,
            round: aux0,
        },
        other => return Err(Error::Frame(format!("unknown tag {other}"))),
    };
    Ok((msg, body_end + TRAILER))
}

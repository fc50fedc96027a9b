//! Byte layout of the radio frames.
//!
//! Control frames are two bytes, `[kind, client]`. The time reply is ten
//! bytes: client, `t_i` as a little-endian `i64`, checksum. A measurement is
//! 34 bytes: client, status, `ha`, `va`, `range` as little-endian `f64`,
//! the client timestamp truncated to its low 56 bits, checksum. The checksum
//! is the wrapping byte sum of everything before it. Frames are told apart
//! by length.
//!
//! Clock correction convention: `delta = client - master`, and corrected
//! timestamps are `t_client - delta`.

use crate::error::{Error, Result};
use crate::types::{FrameId, MeasurementStatus, RawMeasurement, Timestamp};

pub const CONTROL_LEN: usize = 2;
pub const TIME_REPLY_LEN: usize = 10;
pub const MEASUREMENT_LEN: usize = 34;

const TIMESTAMP_BYTES: usize = 7;
const TIMESTAMP_LIMIT: i64 = 1 << 56;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum ControlKind {
    SyncBegin = 0x01,
    SyncEnd = 0x02,
    Ping = 0x03,
    Ack = 0x04,
    TimeRequest = 0x05,
    MeasurementRequest = 0x06,
    NoData = 0x07,
}

impl ControlKind {
    fn from_byte(b: u8) -> Option<Self> {
        use ControlKind::*;
        [SyncBegin, SyncEnd, Ping, Ack, TimeRequest, MeasurementRequest, NoData]
            .into_iter()
            .find(|k| *k as u8 == b)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Frame {
    Control { kind: ControlKind, client: u8 },
    TimeReply { client: u8, t_i: Timestamp },
    Measurement(RawMeasurement),
}

impl Frame {
    pub fn control(kind: ControlKind, client: u8) -> Self {
        Frame::Control { kind, client }
    }

    pub fn client(&self) -> u8 {
        match self {
            Frame::Control { client, .. } | Frame::TimeReply { client, .. } => *client,
            Frame::Measurement(m) => m.station.station_number().unwrap_or(0),
        }
    }

    pub fn kind(&self) -> Option<ControlKind> {
        match self {
            Frame::Control { kind, .. } => Some(*kind),
            _ => None,
        }
    }

    pub fn encoded_len(&self) -> usize {
        match self {
            Frame::Control { .. } => CONTROL_LEN,
            Frame::TimeReply { .. } => TIME_REPLY_LEN,
            Frame::Measurement(_) => MEASUREMENT_LEN,
        }
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(self.encoded_len());
        match self {
            Frame::Control { kind, client } => {
                out.push(*kind as u8);
                out.push(*client);
                return Ok(out);
            }
            Frame::TimeReply { client, t_i } => {
                out.push(*client);
                out.extend_from_slice(&t_i.micros().to_le_bytes());
            }
            Frame::Measurement(m) => {
                let client = m
                    .station
                    .station_number()
                    .ok_or_else(|| Error::Format("measurement frame needs a station".into()))?;
                let t = m.t_client.micros();
                if t >= TIMESTAMP_LIMIT {
                    return Err(Error::OutOfRange(format!("client timestamp {t} does not fit in 56 bits")));
                }
                out.push(client);
                out.push(m.status.code());
                out.extend_from_slice(&m.ha.to_le_bytes());
                out.extend_from_slice(&m.va.to_le_bytes());
                out.extend_from_slice(&m.range.to_le_bytes());
                out.extend_from_slice(&t.to_le_bytes()[..TIMESTAMP_BYTES]);
            }
        }
        out.push(checksum(&out));
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Frame> {
        match bytes.len() {
            CONTROL_LEN => {
                let kind = ControlKind::from_byte(bytes[0])
                    .ok_or_else(|| Error::Format(format!("unknown control kind 0x{:02x}", bytes[0])))?;
                Ok(Frame::Control { kind, client: bytes[1] })
            }
            TIME_REPLY_LEN => {
                verify_checksum(bytes)?;
                let t = i64::from_le_bytes(bytes[1..9].try_into().expect("8 bytes"));
                Ok(Frame::TimeReply { client: bytes[0], t_i: Timestamp::try_from_micros(t)? })
            }
            MEASUREMENT_LEN => {
                verify_checksum(bytes)?;
                let station = FrameId::from_station_number(bytes[0])
                    .ok_or_else(|| Error::Format(format!("unknown client id {}", bytes[0])))?;
                let f = |at: usize| f64::from_le_bytes(bytes[at..at + 8].try_into().expect("8 bytes"));
                let mut t = [0u8; 8];
                t[..TIMESTAMP_BYTES].copy_from_slice(&bytes[26..33]);
                Ok(Frame::Measurement(RawMeasurement {
                    station,
                    status: MeasurementStatus::from_code(bytes[1]),
                    ha: f(2),
                    va: f(10),
                    range: f(18),
                    t_client: Timestamp::from_micros(i64::from_le_bytes(t)),
                }))
            }
            n => Err(Error::Format(format!("no frame type has length {n}"))),
        }
    }
}

pub fn checksum(bytes: &[u8]) -> u8 {
    bytes.iter().fold(0u8, |acc, b| acc.wrapping_add(*b))
}

fn verify_checksum(bytes: &[u8]) -> Result<()> {
    let (body, sum) = bytes.split_at(bytes.len() - 1);
    if checksum(body) != sum[0] {
        return Err(Error::Format("checksum mismatch".into()));
    }
    Ok(())
}

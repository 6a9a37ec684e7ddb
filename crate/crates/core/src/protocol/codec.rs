//! Little-endian binary wire format. See `docs/wire-format.md` for the byte layout.
//!
//! ```text
//! offset  size  field
//!      0     2  magic 0x5843 ("CX" on the wire)
//!      2     1  version (1)
//!      3     1  kind (1..=7)
//!      4     4  seq
//!      8     4  sender_id
//!     12     4  payload length
//!     16     n  payload
//! ```

use thiserror::Error;

use super::{DetectionRequest, DetectionResult, MessageBody, MessageKind, ProtocolMessage, VehicleKinematics};
use crate::geo::GeoPoint;

pub const MAGIC: u16 = 0x5843;
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 16;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DecodeReason {
    #[error("buffer truncated, need {need} more bytes")]
    Truncated { need: usize },
    #[error("bad magic {0:#06x}")]
    BadMagic(u16),
    #[error("unsupported version {0}")]
    BadVersion(u8),
    #[error("unknown message kind {0}")]
    UnknownKind(u8),
    #[error("payload length {got} does not match {expected} for this kind")]
    PayloadLength { expected: usize, got: usize },
    #[error("{0} trailing bytes")]
    Trailing(usize),
    #[error("invalid field: {0}")]
    InvalidField(&'static str),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("decode error at byte {offset}: {reason}")]
pub struct DecodeError {
    pub offset: usize,
    pub reason: DecodeReason,
}

const GEO_LEN: usize = 24;

fn payload_len(kind: MessageKind) -> usize {
    match kind {
        MessageKind::Discover => GEO_LEN + 8,
        MessageKind::Presence => GEO_LEN,
        MessageKind::DetectionRequest => 4 + GEO_LEN + 2 + 2 + 8,
        MessageKind::RequestAck | MessageKind::ResultAck => 4,
        MessageKind::VehicleStatus => GEO_LEN + 8 + 8,
        MessageKind::DetectionResult => 4 + 1 + 8 + 4 + 32,
    }
}

fn put_geo(out: &mut Vec<u8>, g: &GeoPoint) {
    out.extend_from_slice(&g.lat_deg.to_le_bytes());
    out.extend_from_slice(&g.lon_deg.to_le_bytes());
    out.extend_from_slice(&g.alt_m.to_le_bytes());
}

pub fn encode(msg: &ProtocolMessage) -> Vec<u8> {
    let kind = msg.kind();
    let len = payload_len(kind);
    let mut out = Vec::with_capacity(HEADER_LEN + len);
    out.extend_from_slice(&MAGIC.to_le_bytes());
    out.push(VERSION);
    out.push(kind as u8);
    out.extend_from_slice(&msg.seq.to_le_bytes());
    out.extend_from_slice(&msg.sender_id.to_le_bytes());
    out.extend_from_slice(&(len as u32).to_le_bytes());
    match &msg.body {
        MessageBody::Discover { rsu_fix, radius_m } => {
            put_geo(&mut out, rsu_fix);
            out.extend_from_slice(&radius_m.to_le_bytes());
        }
        MessageBody::Presence { fix } => put_geo(&mut out, fix),
        MessageBody::DetectionRequest(r) => {
            out.extend_from_slice(&r.crack_id.to_le_bytes());
            put_geo(&mut out, &r.crack);
            out.extend_from_slice(&r.roi_w.to_le_bytes());
            out.extend_from_slice(&r.roi_h.to_le_bytes());
            out.extend_from_slice(&r.deadline_s.to_le_bytes());
        }
        MessageBody::RequestAck { crack_id } | MessageBody::ResultAck { crack_id } => {
            out.extend_from_slice(&crack_id.to_le_bytes());
        }
        MessageBody::VehicleStatus(k) => {
            put_geo(&mut out, &k.fix);
            out.extend_from_slice(&k.heading_deg.to_le_bytes());
            out.extend_from_slice(&k.speed_mps.to_le_bytes());
        }
        MessageBody::DetectionResult(r) => {
            out.extend_from_slice(&r.crack_id.to_le_bytes());
            out.push(u8::from(r.length_m.is_some()));
            out.extend_from_slice(&r.length_m.unwrap_or(0.0).to_le_bytes());
            out.extend_from_slice(&r.corr);
            out.extend_from_slice(&r.mask_digest);
        }
    }
    debug_assert_eq!(out.len(), HEADER_LEN + len);
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn err(&self, reason: DecodeReason) -> DecodeError {
        DecodeError {
            offset: self.pos,
            reason,
        }
    }

    fn take<const N: usize>(&mut self) -> Result<[u8; N], DecodeError> {
        let end = self.pos + N;
        if end > self.buf.len() {
            return Err(self.err(DecodeReason::Truncated {
                need: end - self.buf.len(),
            }));
        }
        let mut a = [0u8; N];
        a.copy_from_slice(&self.buf[self.pos..end]);
        self.pos = end;
        Ok(a)
    }

    fn u8(&mut self) -> Result<u8, DecodeError> {
        Ok(self.take::<1>()?[0])
    }

    fn u16(&mut self) -> Result<u16, DecodeError> {
        Ok(u16::from_le_bytes(self.take()?))
    }

    fn u32(&mut self) -> Result<u32, DecodeError> {
        Ok(u32::from_le_bytes(self.take()?))
    }

    fn f64(&mut self, name: &'static str) -> Result<f64, DecodeError> {
        let at = self.pos;
        let v = f64::from_le_bytes(self.take()?);
        if !v.is_finite() {
            return Err(DecodeError {
                offset: at,
                reason: DecodeReason::InvalidField(name),
            });
        }
        Ok(v)
    }

    fn geo(&mut self) -> Result<GeoPoint, DecodeError> {
        let at = self.pos;
        let lat = self.f64("latitude")?;
        let lon = self.f64("longitude")?;
        let alt = self.f64("altitude")?;
        GeoPoint::new(lat, lon, alt).map_err(|_| DecodeError {
            offset: at,
            reason: DecodeReason::InvalidField("geodetic fix out of range"),
        })
    }
}

/// Parses exactly one message; rejects truncated, oversized or malformed buffers.
pub fn decode(bytes: &[u8]) -> Result<ProtocolMessage, DecodeError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let magic = r.u16()?;
    if magic != MAGIC {
        return Err(DecodeError {
            offset: 0,
            reason: DecodeReason::BadMagic(magic),
        });
    }
    let version = r.u8()?;
    if version != VERSION {
        return Err(DecodeError {
            offset: 2,
            reason: DecodeReason::BadVersion(version),
        });
    }
    let code = r.u8()?;
    let kind = MessageKind::from_code(code).ok_or(DecodeError {
        offset: 3,
        reason: DecodeReason::UnknownKind(code),
    })?;
    let seq = r.u32()?;
    let sender_id = r.u32()?;
    let len = r.u32()? as usize;
    let expected = payload_len(kind);
    if len != expected {
        return Err(DecodeError {
            offset: 12,
            reason: DecodeReason::PayloadLength { expected, got: len },
        });
    }
    let body = match kind {
        MessageKind::Discover => {
            let rsu_fix = r.geo()?;
            let radius_m = r.f64("radius")?;
            MessageBody::Discover { rsu_fix, radius_m }
        }
        MessageKind::Presence => MessageBody::Presence { fix: r.geo()? },
        MessageKind::DetectionRequest => MessageBody::DetectionRequest(DetectionRequest {
            crack_id: r.u32()?,
            crack: r.geo()?,
            roi_w: r.u16()?,
            roi_h: r.u16()?,
            deadline_s: r.f64("deadline")?,
        }),
        MessageKind::RequestAck => MessageBody::RequestAck { crack_id: r.u32()? },
        MessageKind::ResultAck => MessageBody::ResultAck { crack_id: r.u32()? },
        MessageKind::VehicleStatus => MessageBody::VehicleStatus(VehicleKinematics {
            fix: r.geo()?,
            heading_deg: r.f64("heading")?,
            speed_mps: r.f64("speed")?,
        }),
        MessageKind::DetectionResult => {
            let crack_id = r.u32()?;
            let flag_at = r.pos;
            let flags = r.u8()?;
            let length_at = r.pos;
            let raw_len = f64::from_le_bytes(r.take()?);
            let length_m = match flags {
                0 => None,
                1 if raw_len.is_finite() && raw_len >= 0.0 => Some(raw_len),
                1 => {
                    return Err(DecodeError {
                        offset: length_at,
                        reason: DecodeReason::InvalidField("length"),
                    })
                }
                _ => {
                    return Err(DecodeError {
                        offset: flag_at,
                        reason: DecodeReason::InvalidField("result flags"),
                    })
                }
            };
            let corr_at = r.pos;
            let corr: [u8; 4] = r.take()?;
            if corr.iter().any(|c| *c > 1) {
                return Err(DecodeError {
                    offset: corr_at,
                    reason: DecodeReason::InvalidField("corr"),
                });
            }
            MessageBody::DetectionResult(DetectionResult {
                crack_id,
                length_m,
                corr,
                mask_digest: r.take()?,
            })
        }
    };
    if r.pos != bytes.len() {
        return Err(r.err(DecodeReason::Trailing(bytes.len() - r.pos)));
    }
    Ok(ProtocolMessage { seq, sender_id, body })
}

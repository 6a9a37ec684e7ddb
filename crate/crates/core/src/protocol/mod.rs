//! RSU-initiated tasking protocol.
//!
//! The RSU beacons `Discover`; an OBU inside the advertised radius answers with
//! `Presence`; the RSU then sends a `DetectionRequest` carrying the crack position and
//! waits for `RequestAck`. While the vehicle drives past the crack and runs detection
//! it emits periodic `VehicleStatus`. The finished `DetectionResult` is retransmitted
//! until the RSU answers with `ResultAck`.
//!
//! Both endpoints are pure step functions over explicit state with injected time, so
//! they can be driven by the discrete-event [`sim`] or by a real transport.

pub mod codec;
pub mod obu;
pub mod rsu;
pub mod sim;

use serde::{Deserialize, Serialize};

use crate::geo::GeoPoint;

pub use codec::{decode, encode, DecodeError};
pub use obu::{obu_step, DetectionOutcome, ObuConfig, ObuEvent, ObuPhase, ObuState, ProtocolViolation};
pub use rsu::{rsu_step, RsuConfig, RsuEvent, RsuPhase, RsuState};
pub use sim::{simulate, ChannelConfig, Scenario, SimError, SimOutcome, SimReport, SimSetup, Waypoint};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MessageKind {
    Discover = 1,
    Presence = 2,
    DetectionRequest = 3,
    RequestAck = 4,
    VehicleStatus = 5,
    DetectionResult = 6,
    ResultAck = 7,
}

impl MessageKind {
    pub const ALL: [MessageKind; 7] = [
        Self::Discover,
        Self::Presence,
        Self::DetectionRequest,
        Self::RequestAck,
        Self::VehicleStatus,
        Self::DetectionResult,
        Self::ResultAck,
    ];

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.into_iter().find(|k| *k as u8 == code)
    }
}

/// Crack task disseminated by the RSU.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionRequest {
    pub crack_id: u32,
    pub crack: GeoPoint,
    pub roi_w: u16,
    pub roi_h: u16,
    /// Simulation/wall time by which the RSU gives up on the task.
    pub deadline_s: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VehicleKinematics {
    pub fix: GeoPoint,
    pub heading_deg: f64,
    pub speed_mps: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionResult {
    pub crack_id: u32,
    /// Absent when the mask did not span quadrants 2 and 4.
    pub length_m: Option<f64>,
    pub corr: [u8; 4],
    /// SHA-256 of the mask PNG.
    #[serde(with = "hex_digest")]
    pub mask_digest: [u8; 32],
}

/// Digests as lowercase hex strings in serialized form.
pub(crate) mod hex_digest {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(d: &[u8; 32], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(d))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<[u8; 32], D::Error> {
        let text = String::deserialize(d)?;
        let mut out = [0u8; 32];
        hex::decode_to_slice(&text, &mut out).map_err(serde::de::Error::custom)?;
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MessageBody {
    Discover { rsu_fix: GeoPoint, radius_m: f64 },
    Presence { fix: GeoPoint },
    DetectionRequest(DetectionRequest),
    RequestAck { crack_id: u32 },
    VehicleStatus(VehicleKinematics),
    DetectionResult(DetectionResult),
    ResultAck { crack_id: u32 },
}

impl MessageBody {
    pub fn kind(&self) -> MessageKind {
        match self {
            MessageBody::Discover { .. } => MessageKind::Discover,
            MessageBody::Presence { .. } => MessageKind::Presence,
            MessageBody::DetectionRequest(_) => MessageKind::DetectionRequest,
            MessageBody::RequestAck { .. } => MessageKind::RequestAck,
            MessageBody::VehicleStatus(_) => MessageKind::VehicleStatus,
            MessageBody::DetectionResult(_) => MessageKind::DetectionResult,
            MessageBody::ResultAck { .. } => MessageKind::ResultAck,
        }
    }

    pub fn crack_id(&self) -> Option<u32> {
        match self {
            MessageBody::DetectionRequest(r) => Some(r.crack_id),
            MessageBody::RequestAck { crack_id } | MessageBody::ResultAck { crack_id } => Some(*crack_id),
            MessageBody::DetectionResult(r) => Some(r.crack_id),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProtocolMessage {
    /// Strictly increasing per sender.
    pub seq: u32,
    pub sender_id: u32,
    pub body: MessageBody,
}

impl ProtocolMessage {
    pub fn kind(&self) -> MessageKind {
        self.body.kind()
    }
}

/// Issues strictly increasing sequence numbers for one endpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SeqCounter {
    next: u32,
}

impl SeqCounter {
    pub fn next(&mut self) -> u32 {
        let s = self.next;
        self.next = self.next.wrapping_add(1);
        s
    }

    pub fn peek(&self) -> u32 {
        self.next
    }
}

//! On-board unit: answers discovery, accepts one crack task, reports the result.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{DetectionRequest, DetectionResult, MessageBody, ProtocolMessage, SeqCounter, VehicleKinematics};
use crate::geo::geodetic_to_enu;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObuConfig {
    pub obu_id: u32,
    pub status_interval_s: f64,
    pub result_timeout_s: f64,
}

impl ObuConfig {
    pub fn new(obu_id: u32) -> Self {
        Self {
            obu_id,
            status_interval_s: 1.0,
            result_timeout_s: 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObuPhase {
    Listening,
    TaskAssigned,
    Detecting,
    Reporting,
    Done,
}

impl ObuPhase {
    fn active(self) -> bool {
        matches!(self, ObuPhase::TaskAssigned | ObuPhase::Detecting | ObuPhase::Reporting)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObuState {
    pub phase: ObuPhase,
    pub assigned: Option<DetectionRequest>,
    pub rsu_id: Option<u32>,
    /// Present from `Reporting` on.
    pub result: Option<DetectionResult>,
    pub timer_deadline: Option<f64>,
    pub kinematics: Option<VehicleKinematics>,
    pub retransmissions: u32,
    next_status_s: f64,
    seq: SeqCounter,
}

impl Default for ObuState {
    fn default() -> Self {
        Self {
            phase: ObuPhase::Listening,
            assigned: None,
            rsu_id: None,
            result: None,
            timer_deadline: None,
            kinematics: None,
            retransmissions: 0,
            next_status_s: 0.0,
            seq: SeqCounter::default(),
        }
    }
}

impl ObuState {
    fn send(&mut self, cfg: &ObuConfig, body: MessageBody) -> ProtocolMessage {
        ProtocolMessage {
            seq: self.seq.next(),
            sender_id: cfg.obu_id,
            body,
        }
    }
}

/// Result of the on-vehicle pipeline, handed to the OBU when detection finishes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionOutcome {
    pub length_m: Option<f64>,
    pub corr: [u8; 4],
    #[serde(with = "super::hex_digest")]
    pub mask_digest: [u8; 32],
}

#[derive(Debug, Clone, PartialEq)]
pub enum ObuEvent {
    Message(ProtocolMessage),
    Timer,
    /// Periodic tick carrying the current vehicle pose.
    Tick(VehicleKinematics),
    /// Stage II finished logging; detection has started.
    DetectionStarted,
    DetectionComplete(DetectionOutcome),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ProtocolViolation {
    #[error("detection reported in phase {0:?} without an assigned task")]
    NoAssignment(ObuPhase),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObuStep {
    pub state: ObuState,
    pub outgoing: Vec<ProtocolMessage>,
    pub ignored: Option<&'static str>,
}

fn ignore(state: &ObuState, why: &'static str) -> Result<ObuStep, ProtocolViolation> {
    Ok(ObuStep {
        state: state.clone(),
        outgoing: Vec::new(),
        ignored: Some(why),
    })
}

fn result_body(s: &ObuState) -> MessageBody {
    MessageBody::DetectionResult(s.result.expect("reporting implies a buffered result"))
}

/// Advances the OBU by one event at time `now`.
pub fn obu_step(state: &ObuState, event: &ObuEvent, now: f64, cfg: &ObuConfig) -> Result<ObuStep, ProtocolViolation> {
    let mut s = state.clone();
    let mut out = Vec::new();
    match event {
        ObuEvent::Tick(k) => {
            s.kinematics = Some(*k);
            if s.phase.active() && now >= s.next_status_s {
                let m = s.send(cfg, MessageBody::VehicleStatus(*k));
                out.push(m);
                s.next_status_s = now + cfg.status_interval_s;
            }
        }

        ObuEvent::Message(m) => match (s.phase, &m.body) {
            (ObuPhase::Listening, MessageBody::Discover { rsu_fix, radius_m }) => {
                let Some(k) = s.kinematics else {
                    return ignore(state, "no position fix yet");
                };
                let in_range = geodetic_to_enu(&k.fix, rsu_fix)
                    .map(|e| e.east_m.hypot(e.north_m) <= *radius_m)
                    .unwrap_or(false);
                if !in_range {
                    return ignore(state, "outside rsu radius");
                }
                let p = s.send(cfg, MessageBody::Presence { fix: k.fix });
                out.push(p);
            }
            (ObuPhase::Listening, MessageBody::DetectionRequest(req)) => {
                s.phase = ObuPhase::TaskAssigned;
                s.assigned = Some(*req);
                s.rsu_id = Some(m.sender_id);
                s.next_status_s = now + cfg.status_interval_s;
                let ack = s.send(cfg, MessageBody::RequestAck { crack_id: req.crack_id });
                out.push(ack);
            }
            (_, MessageBody::DetectionRequest(req)) => {
                if s.assigned.map(|a| a.crack_id) != Some(req.crack_id) {
                    return ignore(state, "busy with another task");
                }
                // Duplicate request: re-ack without starting another task.
                let ack = s.send(cfg, MessageBody::RequestAck { crack_id: req.crack_id });
                out.push(ack);
            }
            (ObuPhase::Reporting, MessageBody::ResultAck { crack_id })
                if s.assigned.map(|a| a.crack_id) == Some(*crack_id) =>
            {
                s.phase = ObuPhase::Done;
                s.timer_deadline = None;
            }
            _ => return ignore(state, "unexpected message"),
        },

        ObuEvent::DetectionStarted => match s.phase {
            ObuPhase::TaskAssigned => s.phase = ObuPhase::Detecting,
            ObuPhase::Listening => return Err(ProtocolViolation::NoAssignment(s.phase)),
            _ => return ignore(state, "detection already started"),
        },

        ObuEvent::DetectionComplete(o) => match s.phase {
            ObuPhase::TaskAssigned | ObuPhase::Detecting => {
                let req = s.assigned.expect("assigned in active phase");
                s.result = Some(DetectionResult {
                    crack_id: req.crack_id,
                    length_m: o.length_m,
                    corr: o.corr,
                    mask_digest: o.mask_digest,
                });
                s.phase = ObuPhase::Reporting;
                s.timer_deadline = Some(now + cfg.result_timeout_s);
                let body = result_body(&s);
                let m = s.send(cfg, body);
                out.push(m);
            }
            ObuPhase::Listening => return Err(ProtocolViolation::NoAssignment(s.phase)),
            _ => return ignore(state, "result already reported"),
        },

        ObuEvent::Timer => match (s.phase, s.timer_deadline) {
            (ObuPhase::Reporting, Some(d)) if d <= now => {
                s.retransmissions += 1;
                s.timer_deadline = Some(now + cfg.result_timeout_s);
                let body = result_body(&s);
                let m = s.send(cfg, body);
                out.push(m);
            }
            _ => return ignore(state, "stale timer"),
        },
    }
    Ok(ObuStep {
        state: s,
        outgoing: out,
        ignored: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo::GeoPoint;
    use crate::protocol::MessageKind;

    fn pose() -> VehicleKinematics {
        VehicleKinematics {
            fix: GeoPoint::new(42.3, -83.7, 250.0).unwrap(),
            heading_deg: 0.0,
            speed_mps: 8.0,
        }
    }

    fn request(seq: u32) -> ObuEvent {
        ObuEvent::Message(ProtocolMessage {
            seq,
            sender_id: 1,
            body: MessageBody::DetectionRequest(DetectionRequest {
                crack_id: 5,
                crack: pose().fix,
                roi_w: 512,
                roi_h: 512,
                deadline_s: 60.0,
            }),
        })
    }

    fn outcome() -> ObuEvent {
        ObuEvent::DetectionComplete(DetectionOutcome {
            length_m: Some(3.1),
            corr: [1, 1, 0, 1],
            mask_digest: [9; 32],
        })
    }

    #[test]
    fn duplicate_request_is_idempotent() {
        let c = ObuConfig::new(2);
        let a = obu_step(&ObuState::default(), &request(0), 0.0, &c).unwrap();
        assert_eq!(a.state.phase, ObuPhase::TaskAssigned);
        let b = obu_step(&a.state, &request(1), 0.6, &c).unwrap();
        assert_eq!(b.state.phase, ObuPhase::TaskAssigned);
        assert_eq!(b.state.assigned, a.state.assigned);
        let acks: Vec<_> = a.outgoing.iter().chain(&b.outgoing).map(|m| m.kind()).collect();
        assert_eq!(acks, vec![MessageKind::RequestAck, MessageKind::RequestAck]);
    }

    #[test]
    fn result_retransmitted_until_acked() {
        let c = ObuConfig::new(2);
        let s = obu_step(&ObuState::default(), &request(0), 0.0, &c).unwrap().state;
        let s = obu_step(&s, &ObuEvent::DetectionStarted, 0.1, &c).unwrap().state;
        let r = obu_step(&s, &outcome(), 1.0, &c).unwrap();
        assert_eq!(r.state.phase, ObuPhase::Reporting);
        assert_eq!(r.outgoing[0].kind(), MessageKind::DetectionResult);
        let again = obu_step(&r.state, &ObuEvent::Timer, 1.5, &c).unwrap();
        assert_eq!(again.outgoing[0].kind(), MessageKind::DetectionResult);
        assert_eq!(again.outgoing[0].body, r.outgoing[0].body);
        assert!(again.outgoing[0].seq > r.outgoing[0].seq);
        let ack = ObuEvent::Message(ProtocolMessage {
            seq: 9,
            sender_id: 1,
            body: MessageBody::ResultAck { crack_id: 5 },
        });
        let done = obu_step(&again.state, &ack, 1.6, &c).unwrap();
        assert_eq!(done.state.phase, ObuPhase::Done);
        assert_eq!(done.state.timer_deadline, None);
    }

    #[test]
    fn tick_while_detecting_emits_status() {
        let c = ObuConfig::new(2);
        let s = obu_step(&ObuState::default(), &request(0), 0.0, &c).unwrap().state;
        let s = obu_step(&s, &ObuEvent::DetectionStarted, 0.1, &c).unwrap().state;
        let t = obu_step(&s, &ObuEvent::Tick(pose()), 1.0, &c).unwrap();
        assert_eq!(t.outgoing.len(), 1);
        assert_eq!(t.outgoing[0].body, MessageBody::VehicleStatus(pose()));
        // Not due again until another interval passes.
        let t2 = obu_step(&t.state, &ObuEvent::Tick(pose()), 1.5, &c).unwrap();
        assert!(t2.outgoing.is_empty());
    }

    #[test]
    fn listening_is_silent_on_tick() {
        let c = ObuConfig::new(2);
        let t = obu_step(&ObuState::default(), &ObuEvent::Tick(pose()), 5.0, &c).unwrap();
        assert!(t.outgoing.is_empty());
        assert_eq!(t.state.kinematics, Some(pose()));
    }

    #[test]
    fn detection_without_task_is_violation() {
        let c = ObuConfig::new(2);
        assert_eq!(
            obu_step(&ObuState::default(), &outcome(), 0.0, &c),
            Err(ProtocolViolation::NoAssignment(ObuPhase::Listening))
        );
    }

    #[test]
    fn presence_only_inside_radius() {
        let c = ObuConfig::new(2);
        let s = obu_step(&ObuState::default(), &ObuEvent::Tick(pose()), 0.0, &c).unwrap().state;
        let near = pose().fix.offset_by(crate::geo::EnuVector::new(100.0, 0.0, 0.0));
        let far = pose().fix.offset_by(crate::geo::EnuVector::new(0.0, 400.0, 0.0));
        let disc = |g: GeoPoint| {
            ObuEvent::Message(ProtocolMessage {
                seq: 0,
                sender_id: 1,
                body: MessageBody::Discover {
                    rsu_fix: g,
                    radius_m: 300.0,
                },
            })
        };
        assert_eq!(obu_step(&s, &disc(near), 0.1, &c).unwrap().outgoing[0].kind(), MessageKind::Presence);
        assert!(obu_step(&s, &disc(far), 0.1, &c).unwrap().outgoing.is_empty());
    }
}

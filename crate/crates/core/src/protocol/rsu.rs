//! Roadside unit: advertises itself, hands one crack task to the first vehicle that
//! answers, and waits for the result.

use serde::{Deserialize, Serialize};

use super::{DetectionRequest, DetectionResult, MessageBody, ProtocolMessage, SeqCounter};
use crate::geo::GeoPoint;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RsuConfig {
    pub rsu_id: u32,
    pub position: GeoPoint,
    pub radius_m: f64,
    pub task: DetectionRequest,
    pub discover_interval_s: f64,
    pub request_timeout_s: f64,
    pub result_timeout_s: f64,
    pub max_retries: u32,
}

impl RsuConfig {
    pub fn new(rsu_id: u32, position: GeoPoint, task: DetectionRequest) -> Self {
        Self {
            rsu_id,
            position,
            radius_m: 300.0,
            task,
            discover_interval_s: 1.0,
            request_timeout_s: 0.5,
            result_timeout_s: 2.0,
            max_retries: 5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RsuPhase {
    Scanning,
    AwaitRequestAck,
    AwaitResult,
    Complete,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RsuState {
    pub phase: RsuPhase,
    pub pending_crack_id: Option<u32>,
    pub retry_count: u32,
    /// Armed iff the phase is `AwaitRequestAck` or `AwaitResult`.
    pub timer_deadline: Option<f64>,
    pub assigned_obu: Option<u32>,
    pub result: Option<DetectionResult>,
    next_discover_s: f64,
    seq: SeqCounter,
}

impl Default for RsuState {
    fn default() -> Self {
        Self {
            phase: RsuPhase::Scanning,
            pending_crack_id: None,
            retry_count: 0,
            timer_deadline: None,
            assigned_obu: None,
            result: None,
            next_discover_s: 0.0,
            seq: SeqCounter::default(),
        }
    }
}

impl RsuState {
    pub fn is_terminal(&self) -> bool {
        matches!(self.phase, RsuPhase::Complete | RsuPhase::Failed)
    }

    fn send(&mut self, cfg: &RsuConfig, body: MessageBody) -> ProtocolMessage {
        ProtocolMessage {
            seq: self.seq.next(),
            sender_id: cfg.rsu_id,
            body,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum RsuEvent {
    Message(ProtocolMessage),
    /// The armed timer expired.
    Timer,
    /// Periodic scheduler tick.
    Tick,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RsuStep {
    pub state: RsuState,
    pub outgoing: Vec<ProtocolMessage>,
    /// Why the event was dropped without effect, if it was.
    pub ignored: Option<&'static str>,
}

fn ignore(state: &RsuState, why: &'static str) -> RsuStep {
    RsuStep {
        state: state.clone(),
        outgoing: Vec::new(),
        ignored: Some(why),
    }
}

/// Advances the RSU by one event at time `now`.
pub fn rsu_step(state: &RsuState, event: &RsuEvent, now: f64, cfg: &RsuConfig) -> RsuStep {
    let mut s = state.clone();
    let mut out = Vec::new();
    match (state.phase, event) {
        (RsuPhase::Failed, _) => return ignore(state, "rsu failed"),

        (RsuPhase::Scanning, RsuEvent::Tick) => {
            if now >= cfg.task.deadline_s {
                s.phase = RsuPhase::Failed;
            } else if now >= s.next_discover_s {
                let m = s.send(
                    cfg,
                    MessageBody::Discover {
                        rsu_fix: cfg.position,
                        radius_m: cfg.radius_m,
                    },
                );
                out.push(m);
                s.next_discover_s = now + cfg.discover_interval_s;
            }
        }
        (_, RsuEvent::Tick) => {}

        (RsuPhase::Scanning, RsuEvent::Message(m)) if matches!(m.body, MessageBody::Presence { .. }) => {
            s.phase = RsuPhase::AwaitRequestAck;
            s.pending_crack_id = Some(cfg.task.crack_id);
            s.assigned_obu = Some(m.sender_id);
            s.retry_count = 0;
            s.timer_deadline = Some(now + cfg.request_timeout_s);
            let m = s.send(cfg, MessageBody::DetectionRequest(cfg.task));
            out.push(m);
        }

        (RsuPhase::AwaitRequestAck, RsuEvent::Message(m))
            if m.body == (MessageBody::RequestAck { crack_id: cfg.task.crack_id })
                && Some(m.sender_id) == s.assigned_obu =>
        {
            s.phase = RsuPhase::AwaitResult;
            s.retry_count = 0;
            s.timer_deadline = Some(now + cfg.result_timeout_s);
        }

        (RsuPhase::AwaitResult, RsuEvent::Message(m))
            if matches!(m.body, MessageBody::VehicleStatus(_)) && Some(m.sender_id) == s.assigned_obu =>
        {
            // The vehicle is alive and working: push the result deadline out.
            s.timer_deadline = Some(now + cfg.result_timeout_s);
        }

        (RsuPhase::AwaitRequestAck | RsuPhase::AwaitResult, RsuEvent::Message(m)) => match m.body {
            MessageBody::DetectionResult(r) if r.crack_id == cfg.task.crack_id && Some(m.sender_id) == s.assigned_obu => {
                s.phase = RsuPhase::Complete;
                s.timer_deadline = None;
                s.result = Some(r);
                let ack = s.send(cfg, MessageBody::ResultAck { crack_id: r.crack_id });
                out.push(ack);
            }
            _ => return ignore(state, "unexpected message while awaiting"),
        },

        (RsuPhase::AwaitRequestAck | RsuPhase::AwaitResult, RsuEvent::Timer) => {
            match s.timer_deadline {
                Some(d) if d <= now => {}
                _ => return ignore(state, "stale timer"),
            }
            if s.retry_count >= cfg.max_retries {
                s.phase = RsuPhase::Failed;
                s.timer_deadline = None;
            } else {
                s.retry_count += 1;
                let timeout = if s.phase == RsuPhase::AwaitRequestAck {
                    cfg.request_timeout_s
                } else {
                    cfg.result_timeout_s
                };
                s.timer_deadline = Some(now + timeout);
                let m = s.send(cfg, MessageBody::DetectionRequest(cfg.task));
                out.push(m);
            }
        }

        (RsuPhase::Complete, RsuEvent::Message(m)) => match m.body {
            // The OBU missed our ack and retransmitted.
            MessageBody::DetectionResult(r) if r.crack_id == cfg.task.crack_id && Some(m.sender_id) == s.assigned_obu => {
                let ack = s.send(cfg, MessageBody::ResultAck { crack_id: r.crack_id });
                out.push(ack);
            }
            _ => return ignore(state, "task complete"),
        },

        (_, RsuEvent::Message(_)) => return ignore(state, "unexpected message"),
        (_, RsuEvent::Timer) => return ignore(state, "no timer armed"),
    }
    RsuStep {
        state: s,
        outgoing: out,
        ignored: None,
    }
}

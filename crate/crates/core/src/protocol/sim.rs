//! Discrete-event harness: one virtual clock, a seeded lossy channel and a scripted
//! vehicle trajectory driving both endpoints.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::obu::{DetectionOutcome, ObuStep};
use super::rsu::RsuStep;
use super::{
    codec, obu_step, rsu_step, DetectionRequest, MessageKind, ObuConfig, ObuEvent, ObuPhase, ObuState,
    ProtocolMessage, RsuConfig, RsuEvent, RsuPhase, RsuState, VehicleKinematics,
};
use crate::geo::{geo_to_vehicle, geodetic_to_enu, EnuVector, GeoPoint};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid channel: {0}")]
    Channel(String),
    #[error("invalid scenario: {0}")]
    Scenario(String),
    #[error("reading scenario: {0}")]
    Io(#[from] std::io::Error),
    #[error("parsing scenario: {0}")]
    Toml(#[from] toml::de::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelConfig {
    pub drop_probability: f64,
    pub delay_min_s: f64,
    pub delay_max_s: f64,
    pub seed: u64,
}

impl Default for ChannelConfig {
    fn default() -> Self {
        Self {
            drop_probability: 0.0,
            delay_min_s: 0.01,
            delay_max_s: 0.01,
            seed: 0,
        }
    }
}

impl ChannelConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        if !(0.0..=1.0).contains(&self.drop_probability) {
            return Err(SimError::Channel(format!("drop probability {} outside [0, 1]", self.drop_probability)));
        }
        if !(self.delay_min_s >= 0.0 && self.delay_min_s <= self.delay_max_s && self.delay_max_s.is_finite()) {
            return Err(SimError::Channel(format!(
                "delay range [{}, {}] must satisfy 0 <= min <= max",
                self.delay_min_s, self.delay_max_s
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Waypoint {
    pub t_s: f64,
    pub fix: GeoPoint,
    pub heading_deg: f64,
}

/// Scripted vehicle motion and the detection result the vehicle will report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    /// Waypoints in increasing time; the pose is interpolated linearly and held after the last one.
    pub trajectory: Vec<Waypoint>,
    pub detection_latency_s: f64,
    #[serde(default = "default_tick")]
    pub tick_interval_s: f64,
    pub horizon_s: f64,
    pub result_length_m: Option<f64>,
    #[serde(default = "all_corr")]
    pub result_corr: [u8; 4],
    /// Hex SHA-256 of the mask the vehicle reports.
    #[serde(default = "zero_digest")]
    pub result_digest: String,
}

fn default_tick() -> f64 {
    0.1
}

fn all_corr() -> [u8; 4] {
    [1; 4]
}

fn zero_digest() -> String {
    hex::encode([0u8; 32])
}

impl Scenario {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: &str| Err(SimError::Scenario(m.to_string()));
        if self.trajectory.is_empty() {
            return bad("trajectory is empty");
        }
        if self.trajectory.windows(2).any(|w| w[1].t_s <= w[0].t_s) {
            return bad("waypoint times must increase");
        }
        for w in &self.trajectory {
            w.fix.validate().map_err(|e| SimError::Scenario(e.to_string()))?;
        }
        if !(self.horizon_s.is_finite() && self.horizon_s > 0.0) {
            return bad("horizon must be finite and positive");
        }
        if !(self.tick_interval_s.is_finite() && self.tick_interval_s > 0.0) {
            return bad("tick interval must be positive");
        }
        if !(self.detection_latency_s.is_finite() && self.detection_latency_s >= 0.0) {
            return bad("detection latency must be non-negative");
        }
        self.digest()?;
        Ok(())
    }

    pub fn digest(&self) -> Result<[u8; 32], SimError> {
        let mut d = [0u8; 32];
        hex::decode_to_slice(&self.result_digest, &mut d)
            .map_err(|e| SimError::Scenario(format!("result digest: {e}")))?;
        Ok(d)
    }

    pub fn outcome(&self) -> Result<DetectionOutcome, SimError> {
        Ok(DetectionOutcome {
            length_m: self.result_length_m,
            corr: self.result_corr,
            mask_digest: self.digest()?,
        })
    }

    /// Pose at time `t`.
    pub fn kinematics_at(&self, t: f64) -> VehicleKinematics {
        let tr = &self.trajectory;
        let i = tr.partition_point(|w| w.t_s <= t);
        if i == 0 || i == tr.len() {
            let w = if i == 0 { tr[0] } else { tr[tr.len() - 1] };
            return VehicleKinematics {
                fix: w.fix,
                heading_deg: w.heading_deg,
                speed_mps: 0.0,
            };
        }
        let (a, b) = (tr[i - 1], tr[i]);
        let dt = b.t_s - a.t_s;
        let s = (t - a.t_s) / dt;
        let d = geodetic_to_enu(&b.fix, &a.fix).unwrap_or(EnuVector::new(0.0, 0.0, 0.0));
        let fix = a.fix.offset_by(EnuVector::new(s * d.east_m, s * d.north_m, s * d.up_m));
        let turn = (b.heading_deg - a.heading_deg + 540.0).rem_euclid(360.0) - 180.0;
        VehicleKinematics {
            fix,
            heading_deg: (a.heading_deg + s * turn).rem_euclid(360.0),
            speed_mps: d.east_m.hypot(d.north_m) / dt,
        }
    }

    pub fn end_time(&self) -> f64 {
        self.trajectory.last().map_or(0.0, |w| w.t_s)
    }
}

/// Everything needed for one run; the on-disk `--scenario` format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimSetup {
    pub rsu: RsuConfig,
    pub obu: ObuConfig,
    #[serde(default)]
    pub channel: ChannelConfig,
    pub scenario: Scenario,
}

impl SimSetup {
    pub fn from_toml_str(s: &str) -> Result<Self, SimError> {
        Ok(toml::from_str(s)?)
    }

    pub fn load(path: &Path) -> Result<Self, SimError> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("setup serializes")
    }

    /// A vehicle 2 m short of the crack driving north at 10 m/s for 10 s; the RSU
    /// sits on the crack.
    pub fn demo() -> Self {
        let crack = GeoPoint::new(42.2936, -83.7166, 250.0).expect("valid");
        let start = crack.offset_by(EnuVector::new(0.0, -2.0, 0.0));
        let end = crack.offset_by(EnuVector::new(0.0, 98.0, 0.0));
        let task = DetectionRequest {
            crack_id: 1,
            crack,
            roi_w: 512,
            roi_h: 512,
            deadline_s: 60.0,
        };
        SimSetup {
            rsu: RsuConfig::new(1, crack, task),
            obu: ObuConfig::new(100),
            channel: ChannelConfig::default(),
            scenario: Scenario {
                trajectory: vec![
                    Waypoint {
                        t_s: 0.0,
                        fix: start,
                        heading_deg: 0.0,
                    },
                    Waypoint {
                        t_s: 10.0,
                        fix: end,
                        heading_deg: 0.0,
                    },
                ],
                detection_latency_s: 1.5,
                tick_interval_s: 0.1,
                horizon_s: 120.0,
                result_length_m: Some(3.24),
                result_corr: [1, 1, 1, 1],
                result_digest: zero_digest(),
            },
        }
    }

    pub fn run(&self) -> Result<SimReport, SimError> {
        simulate(&self.rsu, &self.obu, &self.channel, &self.scenario)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Node {
    Rsu,
    Obu,
}

/// One line of the transcript.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptRecord {
    pub t: f64,
    #[serde(flatten)]
    pub entry: TranscriptEntry,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum TranscriptEntry {
    Send { from: Node, kind: MessageKind, seq: u32, bytes: usize },
    Drop { from: Node, kind: MessageKind, seq: u32 },
    Deliver { to: Node, kind: MessageKind, seq: u32 },
    Transition { node: Node, from: String, to: String },
    Ignored { node: Node, reason: String },
    Violation { node: Node, error: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimOutcome {
    Completed,
    RsuFailed,
    Timeout,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub outcome: SimOutcome,
    pub end_time_s: f64,
    pub rsu_phase: RsuPhase,
    pub obu_phase: ObuPhase,
    pub rsu_retries: u32,
    /// Messages handed to the channel, by kind.
    pub sent: BTreeMap<MessageKind, u32>,
    pub delivered: BTreeMap<MessageKind, u32>,
    pub rsu: RsuState,
    pub obu: ObuState,
    pub transcript: Vec<TranscriptRecord>,
}

impl SimReport {
    pub fn transcript_jsonl(&self) -> String {
        let mut s = String::new();
        for r in &self.transcript {
            s.push_str(&serde_json::to_string(r).expect("record serializes"));
            s.push('\n');
        }
        s
    }

    pub fn sent_count(&self, k: MessageKind) -> u32 {
        self.sent.get(&k).copied().unwrap_or(0)
    }
}

/// The serialized (snake_case) name of a phase.
fn phase_name<P: Serialize>(p: &P) -> String {
    match serde_json::to_value(p) {
        Ok(serde_json::Value::String(s)) => s,
        _ => unreachable!("phases serialize as strings"),
    }
}

#[derive(Debug)]
enum Ev {
    Deliver { to: Node, bytes: Vec<u8> },
    RsuTimer(f64),
    ObuTimer(f64),
    Tick(u64),
    DetectionDone,
}

struct Queued {
    t: f64,
    n: u64,
    ev: Ev,
}

impl PartialEq for Queued {
    fn eq(&self, o: &Self) -> bool {
        self.cmp(o) == Ordering::Equal
    }
}
impl Eq for Queued {}
impl PartialOrd for Queued {
    fn partial_cmp(&self, o: &Self) -> Option<Ordering> {
        Some(self.cmp(o))
    }
}
impl Ord for Queued {
    // Reversed so the max-heap pops the earliest event; insertion order breaks ties.
    fn cmp(&self, o: &Self) -> Ordering {
        o.t.total_cmp(&self.t).then(o.n.cmp(&self.n))
    }
}

struct World<'a> {
    rsu_cfg: &'a RsuConfig,
    obu_cfg: &'a ObuConfig,
    channel: &'a ChannelConfig,
    rng: ChaCha8Rng,
    queue: BinaryHeap<Queued>,
    counter: u64,
    rsu: RsuState,
    obu: ObuState,
    log: Vec<TranscriptRecord>,
    sent: BTreeMap<MessageKind, u32>,
    delivered: BTreeMap<MessageKind, u32>,
}

impl World<'_> {
    fn push(&mut self, t: f64, ev: Ev) {
        self.counter += 1;
        self.queue.push(Queued { t, n: self.counter, ev });
    }

    fn record(&mut self, t: f64, entry: TranscriptEntry) {
        self.log.push(TranscriptRecord { t, entry });
    }

    fn transmit(&mut self, now: f64, from: Node, msgs: Vec<ProtocolMessage>) {
        for m in msgs {
            let bytes = codec::encode(&m);
            *self.sent.entry(m.kind()).or_default() += 1;
            self.record(
                now,
                TranscriptEntry::Send {
                    from,
                    kind: m.kind(),
                    seq: m.seq,
                    bytes: bytes.len(),
                },
            );
            let p = self.channel.drop_probability;
            if p > 0.0 && self.rng.random::<f64>() < p {
                self.record(now, TranscriptEntry::Drop { from, kind: m.kind(), seq: m.seq });
                continue;
            }
            let (lo, hi) = (self.channel.delay_min_s, self.channel.delay_max_s);
            let delay = if hi > lo { self.rng.random_range(lo..hi) } else { lo };
            let to = match from {
                Node::Rsu => Node::Obu,
                Node::Obu => Node::Rsu,
            };
            self.push(now + delay, Ev::Deliver { to, bytes });
        }
    }

    fn apply_rsu(&mut self, now: f64, ev: RsuEvent) {
        let RsuStep { state, outgoing, ignored } = rsu_step(&self.rsu, &ev, now, self.rsu_cfg);
        if let Some(why) = ignored {
            self.record(now, TranscriptEntry::Ignored { node: Node::Rsu, reason: why.into() });
            return;
        }
        if state.phase != self.rsu.phase {
            self.record(
                now,
                TranscriptEntry::Transition {
                    node: Node::Rsu,
                    from: phase_name(&self.rsu.phase),
                    to: phase_name(&state.phase),
                },
            );
        }
        if let Some(d) = state.timer_deadline {
            if self.rsu.timer_deadline != Some(d) {
                self.push(d, Ev::RsuTimer(d));
            }
        }
        self.rsu = state;
        self.transmit(now, Node::Rsu, outgoing);
    }

    fn apply_obu(&mut self, now: f64, ev: ObuEvent) {
        let ObuStep { state, outgoing, ignored } = match obu_step(&self.obu, &ev, now, self.obu_cfg) {
            Ok(s) => s,
            Err(e) => {
                self.record(now, TranscriptEntry::Violation { node: Node::Obu, error: e.to_string() });
                return;
            }
        };
        if let Some(why) = ignored {
            self.record(now, TranscriptEntry::Ignored { node: Node::Obu, reason: why.into() });
            return;
        }
        if state.phase != self.obu.phase {
            self.record(
                now,
                TranscriptEntry::Transition {
                    node: Node::Obu,
                    from: phase_name(&self.obu.phase),
                    to: phase_name(&state.phase),
                },
            );
        }
        if let Some(d) = state.timer_deadline {
            if self.obu.timer_deadline != Some(d) {
                self.push(d, Ev::ObuTimer(d));
            }
        }
        self.obu = state;
        self.transmit(now, Node::Obu, outgoing);
    }

    fn done(&self) -> bool {
        self.rsu.phase == RsuPhase::Failed || (self.rsu.phase == RsuPhase::Complete && self.obu.phase == ObuPhase::Done)
    }
}

/// Runs both endpoints against each other until both are terminal, the RSU fails, or
/// the horizon passes. Identical inputs produce an identical transcript.
pub fn simulate(
    rsu_cfg: &RsuConfig,
    obu_cfg: &ObuConfig,
    channel: &ChannelConfig,
    scenario: &Scenario,
) -> Result<SimReport, SimError> {
    channel.validate()?;
    scenario.validate()?;
    let outcome_payload = scenario.outcome()?;
    let mut w = World {
        rsu_cfg,
        obu_cfg,
        channel,
        rng: ChaCha8Rng::seed_from_u64(channel.seed),
        queue: BinaryHeap::new(),
        counter: 0,
        rsu: RsuState::default(),
        obu: ObuState::default(),
        log: Vec::new(),
        sent: BTreeMap::new(),
        delivered: BTreeMap::new(),
    };
    w.push(0.0, Ev::Tick(0));
    let mut detection_started = false;
    let mut now = 0.0;
    let mut finished = false;

    while let Some(Queued { t, ev, .. }) = w.queue.pop() {
        if t > scenario.horizon_s {
            break;
        }
        now = t;
        match ev {
            Ev::Tick(k) => {
                let pose = scenario.kinematics_at(t);
                w.apply_rsu(t, RsuEvent::Tick);
                w.apply_obu(t, ObuEvent::Tick(pose));
                // Stage II ends once the crack is behind the vehicle or the drive is over.
                if !detection_started && w.obu.phase == ObuPhase::TaskAssigned {
                    let task = w.obu.assigned.expect("assigned");
                    let behind = geo_to_vehicle(&task.crack, &pose.fix, pose.heading_deg)
                        .map(|v| v.x_m < 0.0)
                        .unwrap_or(false);
                    if behind || t >= scenario.end_time() {
                        detection_started = true;
                        w.apply_obu(t, ObuEvent::DetectionStarted);
                        w.push(t + scenario.detection_latency_s, Ev::DetectionDone);
                    }
                }
                w.push((k + 1) as f64 * scenario.tick_interval_s, Ev::Tick(k + 1));
            }
            Ev::Deliver { to, bytes } => {
                // Both ends speak the wire format; a decode failure would be a codec bug.
                let m = codec::decode(&bytes).expect("channel carries encoder output");
                *w.delivered.entry(m.kind()).or_default() += 1;
                w.record(t, TranscriptEntry::Deliver { to, kind: m.kind(), seq: m.seq });
                match to {
                    Node::Rsu => w.apply_rsu(t, RsuEvent::Message(m)),
                    Node::Obu => w.apply_obu(t, ObuEvent::Message(m)),
                }
            }
            Ev::RsuTimer(d) => {
                if w.rsu.timer_deadline == Some(d) {
                    w.apply_rsu(t, RsuEvent::Timer);
                }
            }
            Ev::ObuTimer(d) => {
                if w.obu.timer_deadline == Some(d) {
                    w.apply_obu(t, ObuEvent::Timer);
                }
            }
            Ev::DetectionDone => w.apply_obu(t, ObuEvent::DetectionComplete(outcome_payload)),
        }
        if w.done() {
            finished = true;
            break;
        }
    }

    let outcome = if !finished {
        SimOutcome::Timeout
    } else if w.rsu.phase == RsuPhase::Failed {
        SimOutcome::RsuFailed
    } else {
        SimOutcome::Completed
    };
    Ok(SimReport {
        outcome,
        end_time_s: if finished { now } else { scenario.horizon_s },
        rsu_phase: w.rsu.phase,
        obu_phase: w.obu.phase,
        rsu_retries: w.rsu.retry_count,
        sent: w.sent,
        delivered: w.delivered,
        rsu: w.rsu,
        obu: w.obu,
        transcript: w.log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(drop: f64, seed: u64, retries: u32) -> SimReport {
        let mut s = SimSetup::demo();
        s.channel.drop_probability = drop;
        s.channel.seed = seed;
        s.channel.delay_max_s = 0.05;
        s.rsu.max_retries = retries;
        s.run().unwrap()
    }

    #[test]
    fn lossless_happy_path() {
        let r = SimSetup::demo().run().unwrap();
        assert_eq!(r.outcome, SimOutcome::Completed);
        assert_eq!((r.rsu_phase, r.obu_phase), (RsuPhase::Complete, ObuPhase::Done));
        for k in MessageKind::ALL {
            assert_eq!(r.sent_count(k), 1, "{k:?}");
        }
        assert_eq!(r.rsu.result.unwrap().length_m, Some(3.24));
    }

    #[test]
    fn lossy_run_is_reproducible() {
        let a = run(0.2, 42, 10);
        let b = run(0.2, 42, 10);
        assert!(matches!(a.outcome, SimOutcome::Completed | SimOutcome::RsuFailed));
        assert_eq!(a.transcript_jsonl(), b.transcript_jsonl());
        assert_ne!(a.transcript_jsonl(), run(0.2, 43, 10).transcript_jsonl());
    }

    #[test]
    fn total_loss_fails_without_crashing() {
        let r = run(1.0, 7, 3);
        assert_eq!(r.outcome, SimOutcome::RsuFailed);
        assert!(r.rsu_retries <= 3);
        assert!(r.delivered.is_empty());
    }

    #[test]
    fn horizon_shorter_than_task_times_out() {
        let mut s = SimSetup::demo();
        s.scenario.horizon_s = 0.5;
        assert_eq!(s.run().unwrap().outcome, SimOutcome::Timeout);
    }

    #[test]
    fn setup_round_trips_through_toml() {
        let s = SimSetup::demo();
        assert_eq!(SimSetup::from_toml_str(&s.to_toml_string()).unwrap(), s);
    }

    #[test]
    fn interpolated_pose() {
        let s = SimSetup::demo().scenario;
        let k = s.kinematics_at(5.0);
        assert!((k.speed_mps - 10.0).abs() < 1e-6);
        let d = geodetic_to_enu(&k.fix, &s.trajectory[0].fix).unwrap();
        assert!((d.north_m - 50.0).abs() < 1e-6);
        assert_eq!(s.kinematics_at(20.0).speed_mps, 0.0);
    }

    #[test]
    fn bad_channel_rejected() {
        let mut s = SimSetup::demo();
        s.channel.delay_min_s = 1.0;
        s.channel.delay_max_s = 0.5;
        assert!(matches!(s.run(), Err(SimError::Channel(_))));
    }
}

//! Acceptance suite. Each test prints one `PASS`/`FAIL` line and then asserts.
//!
//! Run with `cargo test -p crackscan --test acceptance -- --nocapture --test-threads=1`
//! to see the summary lines in order.

use std::f64::consts::SQRT_2;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

use crackscan::calibration::{aot, calibrate_extrinsics, oog, BoundingBox, SearchConfig};
use crackscan::camera::{
    back_project_ground, default_vehicle_to_camera_axes, vehicle_to_camera, CameraIntrinsics, CameraModel,
    ExtrinsicAngles, PixelPoint,
};
use crackscan::crack::{blackhat_mask, select_edge_corners, BinaryMask};
use crackscan::crop::{compute_crop_window, CropWindow};
use crackscan::geo::{GeoPoint, VehicleVector};
use crackscan::metrics::{
    combined_loss, combined_total_loss, default_thresholds, dice_loss, evaluate, weighted_bce, LogitMap, LossWeights,
    ScoreMap,
};
use crackscan::pipeline::{run_stage2, run_stage3, Detector};
use crackscan::protocol::{decode, MessageKind, ObuPhase, RsuPhase, SimOutcome, SimSetup};
use crackscan::synth::{approach_session, calibration_scene, clutter_scene, GroundCrack, RenderStyle};

fn report(n: u32, name: &str, ok: bool, detail: String) {
    println!("criterion {n:>2} [{}] {name}: {detail}", if ok { "PASS" } else { "FAIL" });
}

fn camera(angles: ExtrinsicAngles) -> CameraModel {
    CameraModel::new(
        CameraIntrinsics::new(1200.0, 1200.0, 1032.0, 772.0, 2064, 1544).unwrap(),
        angles,
        default_vehicle_to_camera_axes(),
        VehicleVector::new(1.2, 0.0, 1.5),
    )
    .unwrap()
}

#[test]
fn c01_geometry_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut cases = Vec::with_capacity(10_000);
    while cases.len() < 10_000 {
        let a = ExtrinsicAngles::new(
            rng.random_range(-15.0..15.0),
            rng.random_range(-15.0..15.0),
            rng.random_range(-15.0..15.0),
        );
        let m = camera(a);
        let p = VehicleVector::new(rng.random_range(0.0..110.0), rng.random_range(-60.0..60.0), 0.0);
        let z_c = vehicle_to_camera(p - m.t_vc, &m).z_m;
        if !(1.0..=100.0).contains(&z_c) {
            continue;
        }
        cases.push((m, p));
    }
    let t0 = Instant::now();
    let mut worst = 0.0f64;
    let mut failures = 0;
    for (m, p) in &cases {
        let ok = m
            .project_vehicle_point(*p)
            .and_then(|px| back_project_ground(px, m))
            .map(|q| q.distance(p));
        match ok {
            Ok(e) => worst = worst.max(e),
            Err(_) => failures += 1,
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    let pass = failures == 0 && worst < 1e-6 && secs < 1.0;
    report(
        1,
        "geometry round trip",
        pass,
        format!("10000 points, max error {worst:.3e} m, {failures} failures, {secs:.3} s"),
    );
    assert!(pass);
}

#[test]
fn c02_crop_containment() {
    let (w, h, b) = (2064u32, 1544u32, 512u32);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut bad = 0;
    for _ in 0..10_000 {
        let c = PixelPoint::new(rng.random_range(0.0..w as f64), rng.random_range(0.0..h as f64));
        let win = compute_crop_window(c, b, b, w, h).unwrap();
        let sized = win.u_max - win.u_min == b && win.v_max - win.v_min == b;
        if !(sized && win.is_inside_image(w, h) && win.contains(c)) {
            bad += 1;
        }
    }
    report(2, "crop containment", bad == 0, format!("10000 centers, {bad} violations"));
    assert_eq!(bad, 0);
}

#[test]
fn c03_calibration_recovery() {
    let origin = GeoPoint::new(42.2936, -83.7166, 250.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let t0 = Instant::now();
    let mut good = 0;
    let mut misses = Vec::new();
    for scene in 0..50u64 {
        let truth = ExtrinsicAngles::new(
            rng.random_range(-8.0..8.0),
            rng.random_range(-8.0..8.0),
            rng.random_range(-8.0..8.0),
        );
        let samples = calibration_scene(&camera(truth), &origin, 5, 512, 100 + scene);
        let template = camera(ExtrinsicAngles::default());
        let got = calibrate_extrinsics(&samples, &template, &SearchConfig::default()).map(|r| r.angles);
        let ok = got.as_ref().is_ok_and(|a| {
            (a.yaw_deg - truth.yaw_deg).abs() <= 1.0
                && (a.pitch_deg - truth.pitch_deg).abs() <= 1.0
                && (a.roll_deg - truth.roll_deg).abs() <= 1.0
        });
        if ok {
            good += 1;
        } else {
            misses.push((scene, truth, got.ok()));
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    let pass = good >= 48 && secs < 30.0;
    report(
        3,
        "calibration recovery",
        pass,
        format!("{good}/50 scenes within 1 deg, {secs:.2} s; misses {misses:?}"),
    );
    assert!(pass);
}

#[test]
fn c04_alignment_fixtures() {
    let crop = CropWindow {
        u_min: 144,
        v_min: 44,
        u_max: 656,
        v_max: 556,
        b_w: 512,
        b_h: 512,
    };
    let at = |u, v| aot(&crop, &BoundingBox::new(u, v, 50.0, 50.0)).unwrap();
    let centered = at(400.0, 300.0);
    let edge = at(656.0, 300.0);
    let half = oog(&crop, &BoundingBox::new(656.0, 300.0, 100.0, 100.0)).unwrap();
    let pass = (centered - 1.0 / SQRT_2).abs() <= 1e-9 && edge.abs() <= 1e-9 && half == 0.5;
    report(
        4,
        "AoT/OoG fixtures",
        pass,
        format!("AoT centered {centered:.12}, AoT edge {edge:.3e}, OoG half {half}"),
    );
    assert!(pass);
}

/// Per-quadrant argmax by exhaustive comparison; ties keep the lowest index.
fn corners_oracle(pts: &[VehicleVector]) -> ([Option<usize>; 4], [u8; 4]) {
    let n = pts.len() as f64;
    let cx = pts.iter().map(|p| p.x_m).sum::<f64>() / n;
    let cy = pts.iter().map(|p| p.y_m).sum::<f64>() / n;
    let cz = pts.iter().map(|p| p.z_m).sum::<f64>() / n;
    let in_q: [fn(f64, f64) -> bool; 4] = [
        |dx, dy| dx >= 0.0 && dy > 0.0,
        |dx, dy| dx < 0.0 && dy >= 0.0,
        |dx, dy| dx <= 0.0 && dy < 0.0,
        |dx, dy| dx > 0.0 && dy <= 0.0,
    ];
    let mut idx = [None; 4];
    for q in 0..4 {
        let members: Vec<usize> = (0..pts.len())
            .filter(|&i| in_q[q](pts[i].x_m - cx, pts[i].y_m - cy))
            .collect();
        let dist = |i: usize| {
            let p = pts[i];
            ((p.x_m - cx).powi(2) + (p.y_m - cy).powi(2) + (p.z_m - cz).powi(2)).sqrt()
        };
        let best = members.iter().map(|&i| dist(i)).fold(f64::NEG_INFINITY, f64::max);
        idx[q] = members.into_iter().find(|&i| dist(i) == best);
    }
    (idx, idx.map(|i| u8::from(i.is_some())))
}

#[test]
fn c05_edge_selection_equivalence() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut mismatches = 0;
    for k in 0..1000 {
        let n = rng.random_range(1..=500);
        // Half the clouds sit on a coarse lattice to force ties and on-axis points.
        let lattice = k % 2 == 0;
        let pts: Vec<VehicleVector> = (0..n)
            .map(|_| {
                if lattice {
                    VehicleVector::new(rng.random_range(-4..=4) as f64 * 0.5, rng.random_range(-4..=4) as f64 * 0.5, 0.0)
                } else {
                    VehicleVector::new(rng.random_range(0.0..20.0), rng.random_range(-5.0..5.0), 0.0)
                }
            })
            .collect();
        let got = select_edge_corners(&pts).unwrap();
        let (idx, corr) = corners_oracle(&pts);
        let want = idx.map(|i| i.map(|i| pts[i]));
        if got.corners != want || got.corr != corr {
            mismatches += 1;
        }
    }
    report(5, "edge selection equivalence", mismatches == 0, format!("1000 clouds, {mismatches} mismatches"));
    assert_eq!(mismatches, 0);
}

#[test]
fn c06_end_to_end_length() {
    let model = camera(ExtrinsicAngles::new(1.0, 2.0, 0.5));
    let crack = GroundCrack {
        center: GeoPoint::new(42.2936, -83.7166, 250.0).unwrap(),
        length_m: 3.24,
        bearing_deg: 45.0,
        width_m: 0.006,
    };
    let dir = tempfile::tempdir().unwrap();
    let distances: Vec<f64> = (0..12).map(|k| 24.0 - 1.5 * k as f64).collect();
    let log = approach_session(dir.path(), &model, &crack, 0.0, &distances, &RenderStyle::default()).unwrap();
    let retained = run_stage2(&log, 60.0).unwrap();
    let out = run_stage3(&log, &retained, &Detector::default()).unwrap();
    let err = |m: &crackscan::pipeline::FrameMeasurement| {
        m.length.as_ref().map_or(f64::INFINITY, |l| (l.length_m - 3.24).abs() / 3.24)
    };
    let high = out.diagnostics.iter().find(|m| m.frame_id == out.report.frame_id).unwrap();
    let low = out
        .diagnostics
        .iter()
        .min_by(|a, b| a.pixels_per_meter.total_cmp(&b.pixels_per_meter))
        .unwrap();
    let (e_hi, e_lo) = (err(high), err(low));
    let pass = e_hi <= 0.02 && e_lo >= e_hi && low.frame_id != high.frame_id;
    report(
        6,
        "end-to-end length",
        pass,
        format!(
            "high-res {} ({:.0} px/m) error {:.2}%, low-res {} ({:.0} px/m) error {:.2}%",
            high.frame_id,
            high.pixels_per_meter,
            100.0 * e_hi,
            low.frame_id,
            low.pixels_per_meter,
            100.0 * e_lo
        ),
    );
    assert!(pass);
}

/// Dataset-level F1 with zero for empty denominators.
fn f1(tp: f64, fp: f64, fn_: f64) -> (f64, f64, f64) {
    let p = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
    let r = if tp + fn_ > 0.0 { tp / (tp + fn_) } else { 0.0 };
    let f = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
    (p, r, f)
}

fn counts(scores: &[f64], gt: &[bool], t: f64) -> (f64, f64, f64) {
    let mut c = (0.0, 0.0, 0.0);
    for (&s, &g) in scores.iter().zip(gt) {
        match (s > t, g) {
            (true, true) => c.0 += 1.0,
            (true, false) => c.1 += 1.0,
            (false, true) => c.2 += 1.0,
            _ => {}
        }
    }
    c
}

/// Brute-force ODS/OIS/AP straight from the definitions.
fn metrics_oracle(scores: &[Vec<f64>], gts: &[Vec<bool>], ts: &[f64]) -> (f64, f64, f64) {
    let mut ods = 0.0f64;
    let mut curve = Vec::new();
    for &t in ts {
        let (mut tp, mut fp, mut fn_) = (0.0, 0.0, 0.0);
        for (s, g) in scores.iter().zip(gts) {
            let c = counts(s, g, t);
            tp += c.0;
            fp += c.1;
            fn_ += c.2;
        }
        let (p, r, f) = f1(tp, fp, fn_);
        ods = ods.max(f);
        curve.push((r, p));
    }
    let ois = scores
        .iter()
        .zip(gts)
        .map(|(s, g)| {
            ts.iter()
                .map(|&t| {
                    let c = counts(s, g, t);
                    f1(c.0, c.1, c.2).2
                })
                .fold(0.0, f64::max)
        })
        .sum::<f64>()
        / scores.len() as f64;
    // Envelope: best precision among points with recall >= r.
    curve.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    let env: Vec<(f64, f64)> = curve
        .iter()
        .map(|&(r, _)| (r, curve.iter().filter(|q| q.0 >= r).map(|q| q.1).fold(0.0, f64::max)))
        .collect();
    let mut ap = 0.0;
    let mut prev = (0.0, env[0].1);
    for &(r, p) in &env {
        ap += (r - prev.0) * (p + prev.1) / 2.0;
        prev = (r, p);
    }
    (ods, ois, ap)
}

/// Also requires ODS <= OIS on every instance. That ordering does not hold in general
/// when OIS averages per-image F1 while ODS pools counts over the set; see
/// `pooled_ods_can_exceed_ois` in `tests/metrics.rs` for a four-pixel counterexample.
#[test]
fn c07_metrics_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let ts = default_thresholds();
    let mut worst = 0.0f64;
    let mut order_violations = 0;
    for _ in 0..50 {
        let mut scores = Vec::new();
        let mut gts = Vec::new();
        for _ in 0..3 {
            let density = rng.random_range(0.0..0.6);
            let g: Vec<bool> = (0..64).map(|_| rng.random_bool(density)).collect();
            let s: Vec<f64> = g
                .iter()
                .map(|&y| {
                    let base: f64 = if y { rng.random_range(0.3..1.0) } else { rng.random_range(0.0..0.7) };
                    (base * 32.0).round() / 32.0
                })
                .collect();
            scores.push(s);
            gts.push(g);
        }
        let preds: Vec<ScoreMap> = scores.iter().map(|s| ScoreMap::new(8, 8, s.clone()).unwrap()).collect();
        let masks: Vec<BinaryMask> = gts.iter().map(|g| BinaryMask::new(8, 8, g.clone(), (0, 0)).unwrap()).collect();
        let b = evaluate(&preds, &masks, &ts).unwrap().bundle;
        let (ods, ois, ap) = metrics_oracle(&scores, &gts, &ts);
        worst = worst
            .max((b.ods_f1 - ods).abs())
            .max((b.ois_f1 - ois).abs())
            .max((b.ap - ap).abs());
        if b.ods_f1 > b.ois_f1 {
            order_violations += 1;
        }
    }
    let pass = worst <= 1e-12 && order_violations == 0;
    report(
        7,
        "metrics oracle",
        pass,
        format!("50 datasets, max deviation {worst:.2e}, ODS > OIS on {order_violations}"),
    );
    assert!(pass);
}

#[derive(Deserialize)]
struct LossCase {
    #[serde(rename = "final")]
    final_logits: Vec<String>,
    labels: Vec<bool>,
    intermediates: Vec<Vec<String>>,
    wbce: String,
    dice: String,
    combined: String,
    total: String,
}

#[test]
fn c08_loss_kernels() {
    let cases: Vec<LossCase> = serde_json::from_str(include_str!("fixtures/loss_oracle.json")).unwrap();
    let w = LossWeights::default();
    let defaults_ok = (w.omega_pos, w.omega_neg, w.lambda_bce, w.lambda_dice, w.dice_eps) == (5.0, 1.0, 0.7, 0.3, 1.0);
    let logits = |v: &[String]| LogitMap::new(4, 4, v.iter().map(|x| x.parse().unwrap()).collect()).unwrap();
    let rel = |got: f64, want: &str| {
        let want: f64 = want.parse().unwrap();
        (got - want).abs() / want.abs().max(f64::MIN_POSITIVE)
    };
    let mut worst = 0.0f64;
    for c in &cases {
        let fin = logits(&c.final_logits);
        let inter: Vec<LogitMap> = c.intermediates.iter().map(|m| logits(m)).collect();
        let gt = BinaryMask::new(4, 4, c.labels.clone(), (0, 0)).unwrap();
        worst = worst
            .max(rel(weighted_bce(&fin, &gt, &w).unwrap(), &c.wbce))
            .max(rel(dice_loss(&fin, &gt, w.dice_eps).unwrap(), &c.dice))
            .max(rel(combined_loss(&fin, &gt, &w).unwrap(), &c.combined))
            .max(rel(combined_total_loss(&fin, &inter, &gt, &w).unwrap(), &c.total));
    }
    let pass = defaults_ok && worst <= 1e-12;
    report(
        8,
        "loss kernels",
        pass,
        format!("{} instances, max relative error {worst:.2e}, defaults wired: {defaults_ok}", cases.len()),
    );
    assert!(pass);
}

#[test]
fn c09_protocol() {
    let happy = SimSetup::demo().run().unwrap();
    let one_each = MessageKind::ALL.iter().all(|&k| happy.sent_count(k) == 1);
    let happy_ok = one_each && happy.outcome == SimOutcome::Completed;

    let mut not_terminated = Vec::new();
    let mut nondeterministic = Vec::new();
    for seed in 1..=100u64 {
        let mut s = SimSetup::demo();
        s.channel.drop_probability = 0.3;
        s.channel.delay_min_s = 0.005;
        s.channel.delay_max_s = 0.05;
        s.channel.seed = seed;
        s.rsu.max_retries = 50;
        let a = s.run().unwrap();
        if !(a.rsu_phase == RsuPhase::Complete && a.obu_phase == ObuPhase::Done) {
            not_terminated.push(seed);
        }
        if a.transcript_jsonl() != s.run().unwrap().transcript_jsonl() {
            nondeterministic.push(seed);
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let valid = crackscan::protocol::codec::encode(&happy_message());
    let fuzz = std::panic::catch_unwind(move || {
        let mut accepted = 0;
        for i in 0..100_000 {
            let buf: Vec<u8> = if i % 2 == 0 {
                let n = rng.random_range(0..96);
                (0..n).map(|_| rng.random()).collect()
            } else {
                // Mutated valid frames reach deeper into the payload parsers.
                let mut b = valid.clone();
                for _ in 0..rng.random_range(1..4) {
                    let j = rng.random_range(0..b.len());
                    b[j] = rng.random();
                }
                b.truncate(rng.random_range(0..=b.len()));
                b
            };
            if decode(&buf).is_ok() {
                accepted += 1;
            }
        }
        accepted
    });

    let pass = happy_ok && not_terminated.is_empty() && nondeterministic.is_empty() && fuzz.is_ok();
    report(
        9,
        "protocol",
        pass,
        format!(
            "happy path one-of-each {one_each}; non-terminating seeds {not_terminated:?}; \
             nondeterministic seeds {nondeterministic:?}; fuzz 100000 buffers {}",
            match &fuzz {
                Ok(n) => format!("ok ({n} decoded)"),
                Err(_) => "panicked".to_string(),
            }
        ),
    );
    assert!(pass);
}

fn happy_message() -> crackscan::protocol::ProtocolMessage {
    use crackscan::protocol::{DetectionResult, MessageBody, ProtocolMessage};
    ProtocolMessage {
        seq: 7,
        sender_id: 100,
        body: MessageBody::DetectionResult(DetectionResult {
            crack_id: 1,
            length_m: Some(3.24),
            corr: [1, 1, 0, 1],
            mask_digest: [0xab; 32],
        }),
    }
}

fn precision(pred: &BinaryMask, truth: &BinaryMask) -> f64 {
    let mut tp = 0usize;
    let mut fp = 0usize;
    for p in pred.frame_pixels() {
        if truth.get(p.u as u32, p.v as u32) {
            tp += 1;
        } else {
            fp += 1;
        }
    }
    if tp + fp == 0 {
        0.0
    } else {
        tp as f64 / (tp + fp) as f64
    }
}

/// Clutter lies outside the ROI, so cropping can only remove false positives. This
/// is a property check on synthetic scenes. The published +247% precision gain came
/// from a trained network on real imagery and is not reproduced here.
#[test]
fn c10_crop_vs_full_frame_precision() {
    let (w, h) = (1280u32, 960u32);
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut worse = Vec::new();
    let mut sums = (0.0, 0.0);
    let n = 20;
    for k in 0..n {
        let c = PixelPoint::new(rng.random_range(300.0..980.0), rng.random_range(300.0..660.0));
        let roi = compute_crop_window(c, 512, 512, w, h).unwrap();
        let scene = clutter_scene(w, h, roi, 10, 1000 + k);
        let full = blackhat_mask(&scene.image, 15, 30).unwrap();
        let mut cropped = blackhat_mask(&scene.image.crop(&roi).unwrap(), 15, 30).unwrap();
        cropped.crop_origin = (roi.u_min, roi.v_min);
        let (pf, pc) = (precision(&full, &scene.truth), precision(&cropped, &scene.truth));
        sums.0 += pf;
        sums.1 += pc;
        if pc < pf {
            worse.push(k);
        }
    }
    let pass = worse.is_empty();
    report(
        10,
        "crop vs full-frame precision",
        pass,
        format!(
            "{n} images, mean precision full {:.3} crop {:.3}, crop worse on {worse:?}",
            sums.0 / n as f64,
            sums.1 / n as f64
        ),
    );
    assert!(pass);
}

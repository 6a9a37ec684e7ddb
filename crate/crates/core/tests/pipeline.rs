use std::fs;
use std::path::Path;

use crackscan::camera::{default_vehicle_to_camera_axes, CameraIntrinsics, CameraModel, ExtrinsicAngles};
use crackscan::crack::BinaryMask;
use crackscan::geo::{GeoPoint, VehicleVector};
use crackscan::pipeline::{
    png_bytes, process_session, run_stage2, run_stage3, sync_frames, Detector, GpsSample, PipelineError, RawImage,
    SessionLog,
};
use crackscan::protocol::{obu_step, ObuConfig, ObuPhase, ObuState};
use crackscan::synth::{approach_session, GroundCrack, RenderStyle};

fn camera() -> CameraModel {
    CameraModel::new(
        CameraIntrinsics::new(1200.0, 1200.0, 1032.0, 772.0, 2064, 1544).unwrap(),
        ExtrinsicAngles::new(0.5, 1.5, -0.5),
        default_vehicle_to_camera_axes(),
        VehicleVector::new(1.2, 0.0, 1.5),
    )
    .unwrap()
}

fn crack() -> GroundCrack {
    GroundCrack {
        center: GeoPoint::new(42.2936, -83.7166, 250.0).unwrap(),
        length_m: 3.24,
        bearing_deg: 135.0,
        width_m: 0.006,
    }
}

fn session(dir: &Path, distances: &[f64]) -> SessionLog {
    approach_session(dir, &camera(), &crack(), 90.0, distances, &RenderStyle::default()).unwrap()
}

#[test]
fn gate_keeps_exactly_the_close_frames() {
    let dir = tempfile::tempdir().unwrap();
    let distances: Vec<f64> = (0..24).map(|k| 50.0 - 2.0 * k as f64).collect();
    let log = session(dir.path(), &distances);
    let retained = run_stage2(&log, 60.0).unwrap();
    // Depth along the optical axis, from the model, decides the gate.
    let m = &log.model;
    let expected: Vec<String> = log
        .frames
        .iter()
        .filter(|f| {
            let p = crackscan::geo::geo_to_vehicle(&log.crack.location, &f.vehicle_fix, f.heading_deg).unwrap() - m.t_vc;
            let z = crackscan::camera::vehicle_to_camera(p, m).z_m;
            z > 0.0 && z <= m.intrinsics.fx / 60.0
        })
        .map(|f| f.frame_id.clone())
        .collect();
    let got: Vec<String> = retained.iter().map(|r| r.frame_id.clone()).collect();
    assert_eq!(got, expected);
    assert!(!got.is_empty() && got.len() < distances.len());
    for r in &retained {
        assert!(r.window.is_inside_image(2064, 1544));
        assert!(r.pixels_per_meter >= 60.0);
    }
}

#[test]
fn crack_behind_vehicle_retains_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let log = session(dir.path(), &[-3.0, -6.0]);
    assert!(run_stage2(&log, 60.0).unwrap().is_empty());
    assert!(matches!(
        run_stage3(&log, &[], &Detector::default()),
        Err(PipelineError::NoRetainedFrames)
    ));
}

#[test]
fn rerun_writes_identical_report() {
    let dir = tempfile::tempdir().unwrap();
    let log = session(&dir.path().join("s"), &[14.0, 11.0, 8.0]);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let ra = process_session(&log, &Detector::default(), 60.0, &a).unwrap();
    process_session(&SessionLog::load(&log.dir).unwrap(), &Detector::default(), 60.0, &b).unwrap();
    for f in ["report.json", "diagnostics.json", &ra.stage3.report.mask_file] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    assert!(a.join("timings.json").exists());
    assert!(a.join(format!("{}_crop.json", ra.retained[0].frame_id)).exists());
}

#[test]
fn report_digest_matches_written_mask() {
    let dir = tempfile::tempdir().unwrap();
    let log = session(&dir.path().join("s"), &[16.0, 13.0]);
    let out = dir.path().join("out");
    let r = process_session(&log, &Detector::default(), 60.0, &out).unwrap().stage3.report;
    use sha2::Digest;
    let bytes = fs::read(out.join(&r.mask_file)).unwrap();
    assert_eq!(hex::encode(sha2::Sha256::digest(&bytes)), r.mask_sha256);
    let len = r.length.as_ref().unwrap();
    assert!(len.length_m >= 0.0);
    assert!(len.endpoints.0.z_m.abs() < 1e-9 && len.endpoints.1.z_m.abs() < 1e-9);
    assert_eq!(r.corr[1], 1);
    assert_eq!(r.corr[3], 1);
}

#[test]
fn empty_mask_reports_without_length() {
    let dir = tempfile::tempdir().unwrap();
    let log = session(&dir.path().join("s"), &[10.0]);
    let retained = run_stage2(&log, 60.0).unwrap();
    let masks = dir.path().join("masks");
    fs::create_dir_all(&masks).unwrap();
    let w = retained[0].window;
    let empty = BinaryMask::empty(w.b_w, w.b_h).to_gray();
    fs::write(masks.join(format!("{}_mask.png", retained[0].frame_id)), png_bytes(&empty)).unwrap();
    let out = run_stage3(&log, &retained, &Detector::MaskDir(masks)).unwrap();
    assert!(out.report.length.is_none());
    assert_eq!(out.report.corr, [0; 4]);

    // The report still travels to the RSU.
    let cfg = ObuConfig::new(100);
    let mut s = ObuState::default();
    s.phase = ObuPhase::Detecting;
    s.assigned = Some(crackscan::protocol::DetectionRequest {
        crack_id: log.crack.crack_id,
        crack: log.crack.location,
        roi_w: 512,
        roi_h: 512,
        deadline_s: 60.0,
    });
    let step = obu_step(&s, &out.report.obu_event(), 1.0, &cfg).unwrap();
    assert_eq!(step.state.phase, ObuPhase::Reporting);
    assert_eq!(step.outgoing.len(), 1);
}

#[test]
fn mask_directory_matches_blackhat_path() {
    let dir = tempfile::tempdir().unwrap();
    let log = session(&dir.path().join("s"), &[13.0, 10.0, 7.0]);
    let retained = run_stage2(&log, 60.0).unwrap();
    let bh = run_stage3(&log, &retained, &Detector::default()).unwrap();

    let masks = dir.path().join("masks");
    fs::create_dir_all(&masks).unwrap();
    for r in &retained {
        let img = crackscan::crack::GrayImage::load(log.image_path(&log.frames[r.index])).unwrap();
        let m = Detector::default().detect(&r.frame_id, &img, &r.window).unwrap();
        fs::write(masks.join(format!("{}_mask.png", r.frame_id)), png_bytes(&m.to_gray())).unwrap();
    }
    let md = run_stage3(&log, &retained, &Detector::MaskDir(masks)).unwrap();
    assert_eq!(md.report, bh.report);
    assert_eq!(md.diagnostics, bh.diagnostics);
}

#[test]
fn sync_pairs_slow_images_with_fast_gps() {
    let fix = GeoPoint::new(42.0, -83.0, 200.0).unwrap();
    let gps: Vec<GpsSample> = (0..100)
        .map(|k| GpsSample {
            timestamp: k as f64 * 0.1,
            fix,
            heading_deg: k as f64,
        })
        .collect();
    let images: Vec<RawImage> = (0..30)
        .map(|k| RawImage {
            frame_id: format!("i{k}"),
            timestamp: k as f64 / 3.0,
            image_path: format!("i{k}.png").into(),
        })
        .collect();
    let s = sync_frames(&images, &gps, 0.1).unwrap();
    assert_eq!(s.dropped, 0);
    assert_eq!(s.frames.len(), 30);
    for (img, f) in images.iter().zip(&s.frames) {
        // Nearest sample by brute force, earlier on ties.
        let best = gps
            .iter()
            .min_by(|a, b| {
                (a.timestamp - img.timestamp)
                    .abs()
                    .total_cmp(&(b.timestamp - img.timestamp).abs())
                    .then(a.timestamp.total_cmp(&b.timestamp))
            })
            .unwrap();
        assert!((best.timestamp - img.timestamp).abs() <= 0.05 + 1e-12);
        assert_eq!(f.heading_deg, best.heading_deg);
    }
}

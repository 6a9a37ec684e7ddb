use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use crackscan::crack::{BinaryMask, GrayImage};
use crackscan::pipeline::png_bytes;

fn crackscan(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_crackscan"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str], cwd: &Path) -> String {
    let out = crackscan(args, cwd);
    assert!(
        out.status.success(),
        "{args:?} exited {:?}: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str], cwd: &Path) -> i32 {
    crackscan(args, cwd).status.code().unwrap()
}

fn json(s: &str) -> serde_json::Value {
    serde_json::from_str(s).unwrap()
}

#[test]
fn synthetic_session_end_to_end() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    ok(&["synth", "session", "--out", "s"], p);
    let r = json(&ok(&["process", "--session", "s", "--out", "a"], p));
    let len = r["length"]["length_m"].as_f64().unwrap();
    assert!((len - 3.24).abs() / 3.24 <= 0.02, "{len}");
    ok(&["process", "--session", "s/session.toml", "--out", "b"], p);
    assert_eq!(fs::read(p.join("a/report.json")).unwrap(), fs::read(p.join("b/report.json")).unwrap());
    for f in ["diagnostics.json", "timings.json", "f011_crop.png", "f011_crop.json"] {
        assert!(p.join("a").join(f).exists(), "{f}");
    }

    // The written mask measured on its own gives the same length.
    let w = &r["window"];
    let origin = format!("{},{}", w["u_min"], w["v_min"]);
    let fix = fs::read_to_string(p.join("s/frames.jsonl")).unwrap();
    let frame = fix.lines().map(json).find(|f| f["frame_id"] == r["frame_id"]).unwrap();
    let g = &frame["vehicle_fix"];
    let fix = format!("{},{},{}", g["lat_deg"], g["lon_deg"], g["alt_m"]);
    let mask = format!("a/{}", r["mask_file"].as_str().unwrap());
    let l = json(&ok(
        &["length", "--camera", "s/camera.toml", "--fix", &fix, "--heading", "0", "--mask", &mask, "--origin", &origin],
        p,
    ));
    assert!((l["length_m"].as_f64().unwrap() - len).abs() < 1e-12);
}

#[test]
fn external_masks_and_gate() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    ok(&["synth", "session", "--out", "s", "--frames", "4", "--start", "14", "--step", "2"], p);
    fs::create_dir_all(p.join("masks")).unwrap();
    // No mask files yet: reading the first one fails while processing.
    assert_eq!(code(&["process", "--session", "s", "--out", "o", "--detector", "maskdir:masks"], p), 3);
    assert_eq!(code(&["process", "--session", "s", "--out", "o", "--detector", "sobel"], p), 2);
    assert_eq!(code(&["process", "--session", "s", "--out", "o", "--threshold", "1000"], p), 3);
    assert_eq!(code(&["process", "--session", "missing", "--out", "o"], p), 2);
    fs::write(p.join("cfg.toml"), "threshold_ppm = 1000.0\n").unwrap();
    assert_eq!(code(&["--config", "cfg.toml", "process", "--session", "s", "--out", "o"], p), 3);
    fs::write(p.join("bad.toml"), "thresold = 1\n").unwrap();
    assert_eq!(code(&["--config", "bad.toml", "process", "--session", "s", "--out", "o"], p), 2);
}

#[test]
fn simulate_is_reproducible() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    let args = ["simulate", "--drop", "0.3", "--seed", "9", "--max-retries", "50", "--delay-min", "0.005", "--delay-max", "0.05"];
    let a = ok(&args, p);
    let b = ok(&args, p);
    assert_eq!(a, b);
    assert!(a.lines().all(|l| json(l).get("event").is_some()));

    ok(&["synth", "scenario", "--out", "setup.toml"], p);
    let s = json(&ok(&["simulate", "--scenario", "setup.toml", "--transcript", "t.jsonl"], p));
    assert_eq!(s["outcome"], "completed");
    assert_eq!(s["result"]["length_m"], 3.24);
    assert!(fs::read_to_string(p.join("t.jsonl")).unwrap().lines().count() > 10);

    let s = json(&ok(&["simulate", "--drop", "1", "--transcript", "t.jsonl"], p));
    assert_eq!(s["outcome"], "rsu_failed");
    assert_eq!(code(&["simulate", "--drop", "1.5"], p), 2);
    assert_eq!(code(&["simulate", "--scenario", "nope.toml"], p), 2);
}

#[test]
fn calibrate_recovers_rendered_angles() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    ok(&["synth", "calibration", "--out", "samples.json", "--camera-out", "cam.toml", "--yaw", "-3", "--pitch", "2", "--roll", "1"], p);
    let r = json(&ok(&["calibrate", "--samples", "samples.json", "--camera", "cam.toml", "--write-camera", "fit.toml"], p));
    let a = &r["angles"];
    for (k, v) in [("yaw_deg", -3.0), ("pitch_deg", 2.0), ("roll_deg", 1.0)] {
        assert!((a[k].as_f64().unwrap() - v).abs() <= 1.0, "{k} {}", a[k]);
    }
    assert!(fs::read_to_string(p.join("fit.toml")).unwrap().contains("yaw_deg"));
    fs::write(p.join("empty.json"), "[]").unwrap();
    assert_eq!(code(&["calibrate", "--samples", "empty.json", "--camera", "cam.toml"], p), 2);
}

#[test]
fn eval_scores_directories() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    for dir in ["pred", "gt"] {
        fs::create_dir_all(p.join(dir)).unwrap();
    }
    for k in 0..3u32 {
        let bits: Vec<bool> = (0..64).map(|i| (i + k) % 5 == 0).collect();
        let m = BinaryMask::new(8, 8, bits, (0, 0)).unwrap();
        let name = format!("{k}.png");
        fs::write(p.join("gt").join(&name), png_bytes(&m.to_gray())).unwrap();
        fs::write(p.join("pred").join(&name), png_bytes(&m.to_gray())).unwrap();
    }
    let b = json(&ok(&["eval", "--pred", "pred", "--gt", "gt", "--json"], p));
    for k in ["ods_f1", "ois_f1", "ap"] {
        assert_eq!(b[k], 1.0, "{k}");
    }
    assert!(ok(&["eval", "--pred", "pred", "--gt", "gt"], p).contains("ODS F1     1.0000"));
    fs::remove_file(p.join("gt/2.png")).unwrap();
    assert_eq!(code(&["eval", "--pred", "pred", "--gt", "gt"], p), 2);
}

#[test]
fn crop_and_sync() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    ok(&["synth", "session", "--out", "s", "--frames", "3", "--start", "12", "--step", "2"], p);
    let frames: Vec<serde_json::Value> = fs::read_to_string(p.join("s/frames.jsonl")).unwrap().lines().map(json).collect();
    let g = &frames[0]["vehicle_fix"];
    let fix = format!("{},{},{}", g["lat_deg"], g["lon_deg"], g["alt_m"]);
    let crack = "42.2936,-83.7166,250";
    let c = json(&ok(
        &["crop", "--camera", "s/camera.toml", "--fix", &fix, "--heading", "0", "--image", "s/f000.png", "--crack", crack, "--out", "c.png"],
        p,
    ));
    assert_eq!(c["window"]["b_w"], 512);
    let img = GrayImage::load(p.join("c.png")).unwrap();
    assert_eq!((img.width, img.height), (512, 512));
    // Facing away from the crack.
    assert_eq!(
        code(
            &["crop", "--camera", "s/camera.toml", "--fix", &fix, "--heading", "180", "--image", "s/f000.png", "--crack", crack, "--out", "c.png"],
            p
        ),
        3
    );

    // Re-pair the logged images with a 10 Hz GPS stream.
    let mut images = String::new();
    let mut gps = String::new();
    for f in &frames {
        images.push_str(&format!(
            "{{\"frame_id\":{},\"timestamp\":{},\"image_path\":{}}}\n",
            f["frame_id"], f["timestamp"], f["image_path"]
        ));
        gps.push_str(&format!(
            "{{\"timestamp\":{},\"fix\":{},\"heading_deg\":0.0}}\n",
            f["timestamp"].as_f64().unwrap() + 0.02,
            f["vehicle_fix"]
        ));
    }
    fs::write(p.join("s/images.jsonl"), images).unwrap();
    fs::write(p.join("gps.jsonl"), gps).unwrap();
    let s = json(&ok(&["sync", "--images", "s/images.jsonl", "--gps", "gps.jsonl", "--camera", "s/camera.toml", "--crack", crack], p));
    assert_eq!(s["frames"], 3);
    assert_eq!(s["dropped"], 0);
    ok(&["process", "--session", "s", "--out", "o"], p);
    let far = ["sync", "--images", "s/images.jsonl", "--gps", "gps.jsonl", "--camera", "s/camera.toml", "--crack", crack, "--max-skew", "0.001"];
    assert_eq!(code(&far, p), 3);
}

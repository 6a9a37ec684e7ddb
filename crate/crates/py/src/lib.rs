//! Python bindings for `crackscan`.
//!
//! Geometry and camera types are exposed as classes; larger results (reports,
//! transcripts, calibration output) come back as JSON strings.

use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use crackscan::calibration::{self, BoundingBox, CalibrationSample, SearchConfig};
use crackscan::camera::{self as cam, default_vehicle_to_camera_axes, CameraIntrinsics, ExtrinsicAngles, PixelPoint};
use crackscan::crack::{self, BinaryMask, GrayImage};
use crackscan::crop;
use crackscan::geo::{self, EnuVector, VehicleVector};
use crackscan::metrics::{self, LogitMap, LossWeights, ScoreMap};
use crackscan::pipeline::{self, Detector, SessionLog};
use crackscan::protocol::{self as proto, SimSetup};

fn invalid<E: std::fmt::Display>(e: E) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn failed<E: std::fmt::Display>(e: E) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

fn to_json<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("serializable")
}

/// WGS84 fix in degrees and meters.
#[pyclass(name = "GeoPoint", module = "crackscan_py", frozen, skip_from_py_object)]
#[derive(Clone, Copy)]
struct PyGeoPoint(geo::GeoPoint);

#[pymethods]
impl PyGeoPoint {
    #[new]
    fn new(lat_deg: f64, lon_deg: f64, alt_m: f64) -> PyResult<Self> {
        geo::GeoPoint::new(lat_deg, lon_deg, alt_m).map(Self).map_err(invalid)
    }

    #[getter]
    fn lat_deg(&self) -> f64 {
        self.0.lat_deg
    }

    #[getter]
    fn lon_deg(&self) -> f64 {
        self.0.lon_deg
    }

    #[getter]
    fn alt_m(&self) -> f64 {
        self.0.alt_m
    }

    /// East/north/up offset of `self` from `reference`.
    fn enu_from(&self, reference: &PyGeoPoint) -> PyResult<(f64, f64, f64)> {
        let e = geo::geodetic_to_enu(&self.0, &reference.0).map_err(invalid)?;
        Ok((e.east_m, e.north_m, e.up_m))
    }

    fn offset(&self, east_m: f64, north_m: f64, up_m: f64) -> Self {
        Self(self.0.offset_by(EnuVector::new(east_m, north_m, up_m)))
    }

    /// Position in the frame of a vehicle at `fix` heading `heading_deg`.
    fn to_vehicle(&self, fix: &PyGeoPoint, heading_deg: f64) -> PyResult<(f64, f64, f64)> {
        let v = geo::geo_to_vehicle(&self.0, &fix.0, heading_deg).map_err(invalid)?;
        Ok((v.x_m, v.y_m, v.z_m))
    }

    fn __repr__(&self) -> String {
        format!("GeoPoint({}, {}, {})", self.0.lat_deg, self.0.lon_deg, self.0.alt_m)
    }
}

/// Pinhole camera with mounting angles and lens offset.
#[pyclass(name = "CameraModel", module = "crackscan_py", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyCameraModel(cam::CameraModel);

#[pymethods]
impl PyCameraModel {
    #[new]
    #[pyo3(signature = (fx, fy, cx, cy, width, height, yaw_deg=0.0, pitch_deg=0.0, roll_deg=0.0, t_vc=(0.0, 0.0, 0.0)))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: u32,
        height: u32,
        yaw_deg: f64,
        pitch_deg: f64,
        roll_deg: f64,
        t_vc: (f64, f64, f64),
    ) -> PyResult<Self> {
        let intr = CameraIntrinsics::new(fx, fy, cx, cy, width, height).map_err(invalid)?;
        cam::CameraModel::new(
            intr,
            ExtrinsicAngles::new(yaw_deg, pitch_deg, roll_deg),
            default_vehicle_to_camera_axes(),
            VehicleVector::new(t_vc.0, t_vc.1, t_vc.2),
        )
        .map(Self)
        .map_err(invalid)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        cam::CameraModel::load(path).map(Self).map_err(invalid)
    }

    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        cam::CameraModel::from_toml_str(text).map(Self).map_err(invalid)
    }

    fn to_toml(&self) -> String {
        self.0.to_toml_string()
    }

    #[getter]
    fn angles(&self) -> (f64, f64, f64) {
        let a = self.0.angles;
        (a.yaw_deg, a.pitch_deg, a.roll_deg)
    }

    fn with_angles(&self, yaw_deg: f64, pitch_deg: f64, roll_deg: f64) -> Self {
        Self(self.0.with_angles(ExtrinsicAngles::new(yaw_deg, pitch_deg, roll_deg)))
    }

    /// Pixel of a vehicle-frame point (x forward, y left, z up).
    fn project(&self, x: f64, y: f64, z: f64) -> PyResult<(f64, f64)> {
        let px = self.0.project_vehicle_point(VehicleVector::new(x, y, z)).map_err(invalid)?;
        Ok((px.u, px.v))
    }

    /// Road point (z = 0) seen at pixel `(u, v)`.
    fn back_project(&self, u: f64, v: f64) -> PyResult<(f64, f64, f64)> {
        let p = cam::back_project_ground(PixelPoint::new(u, v), &self.0).map_err(invalid)?;
        Ok((p.x_m, p.y_m, p.z_m))
    }

    /// Pixels per meter at the point's depth.
    fn pixels_per_meter(&self, x: f64, y: f64, z: f64) -> Option<f64> {
        let p = VehicleVector::new(x, y, z) - self.0.t_vc;
        crop::resolution_gate(p, &self.0, 0.0).measured_ppm()
    }
}

/// Crop window `(u_min, v_min, u_max, v_max)` centered on `(u, v)` and kept inside the image.
#[pyfunction]
#[pyo3(signature = (u, v, width, height, image_width, image_height))]
fn compute_crop_window(
    u: f64,
    v: f64,
    width: u32,
    height: u32,
    image_width: u32,
    image_height: u32,
) -> PyResult<(u32, u32, u32, u32)> {
    let w = crop::compute_crop_window(PixelPoint::new(u, v), width, height, image_width, image_height)
        .map_err(invalid)?;
    Ok((w.u_min, w.v_min, w.u_max, w.v_max))
}

fn square_window(window: (u32, u32, u32, u32)) -> crop::CropWindow {
    let (u_min, v_min, u_max, v_max) = window;
    crop::CropWindow {
        u_min,
        v_min,
        u_max,
        v_max,
        b_w: u_max.saturating_sub(u_min),
        b_h: v_max.saturating_sub(v_min),
    }
}

/// `(oog, aot)` for a crop window and a `(center_u, center_v, width, height)` box.
#[pyfunction]
fn alignment(window: (u32, u32, u32, u32), gt_box: (f64, f64, f64, f64)) -> PyResult<(f64, f64)> {
    let w = square_window(window);
    let b = BoundingBox::new(gt_box.0, gt_box.1, gt_box.2, gt_box.3);
    Ok((
        calibration::oog(&w, &b).map_err(invalid)?,
        calibration::aot(&w, &b).map_err(invalid)?,
    ))
}

/// Fits mounting angles to samples given as a JSON array; returns the report as JSON.
#[pyfunction]
#[pyo3(signature = (samples_json, camera, half_range_deg=10.0, step_deg=1.0))]
fn calibrate(samples_json: &str, camera: &PyCameraModel, half_range_deg: f64, step_deg: f64) -> PyResult<String> {
    let samples: Vec<CalibrationSample> = serde_json::from_str(samples_json).map_err(invalid)?;
    let search = SearchConfig {
        yaw: calibration::AngleRange::symmetric(half_range_deg),
        pitch: calibration::AngleRange::symmetric(half_range_deg),
        roll: calibration::AngleRange::symmetric(half_range_deg),
        step_deg,
        ..SearchConfig::default()
    };
    let r = calibration::calibrate_extrinsics(&samples, &camera.0, &search).map_err(failed)?;
    Ok(to_json(&r))
}

/// Synthetic checkerboard samples rendered under `camera`, as JSON.
#[pyfunction]
#[pyo3(signature = (camera, origin, count=8, seed=0))]
fn synth_calibration(camera: &PyCameraModel, origin: &PyGeoPoint, count: usize, seed: u64) -> String {
    to_json(&crackscan::synth::calibration_scene(&camera.0, &origin.0, count, crop::DEFAULT_CROP_SIZE, seed))
}

fn gray(pixels: Vec<u8>, width: u32, height: u32) -> PyResult<GrayImage> {
    GrayImage::new(width, height, pixels).map_err(invalid)
}

/// Black-hat crack mask of a row-major 8-bit image, as a list of booleans.
#[pyfunction]
#[pyo3(signature = (pixels, width, height, kernel=15, threshold=30))]
fn blackhat_mask(pixels: Vec<u8>, width: u32, height: u32, kernel: u32, threshold: u8) -> PyResult<Vec<bool>> {
    let m = crack::blackhat_mask(&gray(pixels, width, height)?, kernel, threshold).map_err(invalid)?;
    Ok(m.bits)
}

/// Crack length from a mask placed at `origin` in the full frame.
///
/// Returns `(length_m or None, corr)`.
#[pyfunction]
#[pyo3(signature = (camera, mask, width, height, origin=(0, 0)))]
fn estimate_length(
    camera: &PyCameraModel,
    mask: Vec<bool>,
    width: u32,
    height: u32,
    origin: (u32, u32),
) -> PyResult<(Option<f64>, [u8; 4])> {
    let mask = BinaryMask::new(width, height, mask, origin).map_err(invalid)?;
    let ground = crack::mask_to_ground(&mask, &camera.0);
    let edges = crack::select_edge_corners(&ground.points).map_err(failed)?;
    let len = crack::estimate_length(&edges, "").ok().map(|l| l.length_m);
    Ok((len, edges.corr))
}

fn score_maps(preds: Vec<Vec<f64>>, gts: Vec<Vec<bool>>, width: u32, height: u32) -> PyResult<(Vec<ScoreMap>, Vec<BinaryMask>)> {
    let p = preds
        .into_iter()
        .map(|s| ScoreMap::new(width, height, s).map_err(invalid))
        .collect::<PyResult<Vec<_>>>()?;
    let g = gts
        .into_iter()
        .map(|b| BinaryMask::new(width, height, b, (0, 0)).map_err(invalid))
        .collect::<PyResult<Vec<_>>>()?;
    Ok((p, g))
}

/// ODS/OIS/AP over images of equal size; returns a dict.
#[pyfunction]
fn evaluate<'py>(
    py: Python<'py>,
    preds: Vec<Vec<f64>>,
    gts: Vec<Vec<bool>>,
    width: u32,
    height: u32,
) -> PyResult<Bound<'py, PyDict>> {
    let (p, g) = score_maps(preds, gts, width, height)?;
    let b = metrics::ods_ois_ap(&p, &g, &metrics::default_thresholds()).map_err(invalid)?;
    let d = PyDict::new(py);
    d.set_item("ods_f1", b.ods_f1)?;
    d.set_item("ois_f1", b.ois_f1)?;
    d.set_item("precision", b.precision_at_ods)?;
    d.set_item("recall", b.recall_at_ods)?;
    d.set_item("ap", b.ap)?;
    Ok(d)
}

/// `(wbce, dice, combined)` with the default weights.
#[pyfunction]
fn losses(logits: Vec<f64>, labels: Vec<bool>, width: u32, height: u32) -> PyResult<(f64, f64, f64)> {
    let l = LogitMap::new(width, height, logits).map_err(invalid)?;
    let g = BinaryMask::new(width, height, labels, (0, 0)).map_err(invalid)?;
    let w = LossWeights::default();
    Ok((
        metrics::weighted_bce(&l, &g, &w).map_err(invalid)?,
        metrics::dice_loss(&l, &g, w.dice_eps).map_err(invalid)?,
        metrics::combined_loss(&l, &g, &w).map_err(invalid)?,
    ))
}

/// Result of one protocol simulation.
#[pyclass(name = "SimResult", module = "crackscan_py", frozen)]
struct PySimResult {
    #[pyo3(get)]
    outcome: String,
    #[pyo3(get)]
    end_time_s: f64,
    #[pyo3(get)]
    rsu_retries: u32,
    #[pyo3(get)]
    length_m: Option<f64>,
    #[pyo3(get)]
    transcript: String,
}

/// Runs the RSU/OBU exchange; `scenario` is a setup TOML path (demo setup if omitted).
#[pyfunction]
#[pyo3(signature = (drop=0.0, delay_min=0.01, delay_max=0.01, seed=0, max_retries=5, scenario=None))]
fn simulate(
    drop: f64,
    delay_min: f64,
    delay_max: f64,
    seed: u64,
    max_retries: u32,
    scenario: Option<PathBuf>,
) -> PyResult<PySimResult> {
    let mut s = match scenario {
        Some(p) => SimSetup::load(&p).map_err(invalid)?,
        None => SimSetup::demo(),
    };
    s.channel = proto::ChannelConfig {
        drop_probability: drop,
        delay_min_s: delay_min,
        delay_max_s: delay_max,
        seed,
    };
    s.rsu.max_retries = max_retries;
    let r = s.run().map_err(invalid)?;
    let outcome = serde_json::to_value(r.outcome).expect("serializable");
    Ok(PySimResult {
        outcome: outcome.as_str().unwrap_or_default().to_string(),
        end_time_s: r.end_time_s,
        rsu_retries: r.rsu_retries,
        length_m: r.rsu.result.and_then(|x| x.length_m),
        transcript: r.transcript_jsonl(),
    })
}

/// Decodes a wire message into JSON; raises `ValueError` on malformed input.
#[pyfunction]
fn decode_message(data: &[u8]) -> PyResult<String> {
    proto::decode(data).map(|m| to_json(&m)).map_err(invalid)
}

/// Encodes a message given as JSON (the form produced by `decode_message`).
#[pyfunction]
fn encode_message(message_json: &str) -> PyResult<Vec<u8>> {
    let m: proto::ProtocolMessage = serde_json::from_str(message_json).map_err(invalid)?;
    Ok(proto::encode(&m))
}

/// Runs Stages II and III over a session directory; returns the report as JSON.
#[pyfunction]
#[pyo3(signature = (session, out_dir, detector="blackhat", threshold_ppm=60.0))]
fn process_session(session: PathBuf, out_dir: PathBuf, detector: &str, threshold_ppm: f64) -> PyResult<String> {
    let log = SessionLog::load(&session).map_err(invalid)?;
    let det: Detector = detector.parse().map_err(PyValueError::new_err)?;
    let out = pipeline::process_session(&log, &det, threshold_ppm, &out_dir).map_err(failed)?;
    Ok(to_json(&out.stage3.report))
}

/// Renders a straight crack approach into `out_dir` and writes its session files.
#[pyfunction]
#[pyo3(signature = (out_dir, camera, crack_center, length_m=3.24, bearing_deg=45.0, distances=None, seed=0))]
fn synth_session(
    out_dir: PathBuf,
    camera: &PyCameraModel,
    crack_center: &PyGeoPoint,
    length_m: f64,
    bearing_deg: f64,
    distances: Option<Vec<f64>>,
    seed: u64,
) -> PyResult<usize> {
    let crack = crackscan::synth::GroundCrack {
        center: crack_center.0,
        length_m,
        bearing_deg,
        width_m: 0.006,
    };
    let d = distances.unwrap_or_else(|| (0..12).map(|k| 24.0 - 1.5 * k as f64).collect());
    let style = crackscan::synth::RenderStyle {
        seed,
        ..Default::default()
    };
    let log = crackscan::synth::approach_session(&out_dir, &camera.0, &crack, 0.0, &d, &style).map_err(failed)?;
    Ok(log.frames.len())
}

#[pymodule]
fn crackscan_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyGeoPoint>()?;
    m.add_class::<PyCameraModel>()?;
    m.add_class::<PySimResult>()?;
    m.add_function(wrap_pyfunction!(compute_crop_window, m)?)?;
    m.add_function(wrap_pyfunction!(alignment, m)?)?;
    m.add_function(wrap_pyfunction!(calibrate, m)?)?;
    m.add_function(wrap_pyfunction!(synth_calibration, m)?)?;
    m.add_function(wrap_pyfunction!(blackhat_mask, m)?)?;
    m.add_function(wrap_pyfunction!(estimate_length, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(losses, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(encode_message, m)?)?;
    m.add_function(wrap_pyfunction!(decode_message, m)?)?;
    m.add_function(wrap_pyfunction!(process_session, m)?)?;
    m.add_function(wrap_pyfunction!(synth_session, m)?)?;
    Ok(())
}

//! Session logs and the Stage II (log + crop) and Stage III (detect + measure) drivers.
//!
//! A session directory holds `session.toml`, a camera TOML and `frames.jsonl` (one
//! [`FrameRecord`] per line). Image paths are relative to the session directory.

use std::fs;
use std::io::{BufRead, Cursor, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::camera::{CameraError, CameraModel};
use crate::crack::{
    blackhat_mask, estimate_length, mask_to_ground, select_edge_corners, BinaryMask, CrackError, GrayImage,
    LengthEstimate, DEFAULT_MASK_THRESHOLD,
};
use crate::crop::{compute_crop_window, view_crack, CropError, CropWindow, FrameRecord, DEFAULT_CROP_SIZE, DEFAULT_MIN_PPM};
use crate::geo::{GeoError, GeoPoint};
use crate::protocol::obu::{DetectionOutcome, ObuEvent};

pub const DEFAULT_MAX_SKEW_S: f64 = 0.1;
pub const DEFAULT_BLACKHAT_KERNEL: u32 = 15;
pub const DEFAULT_BLACKHAT_THRESHOLD: u8 = 30;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}:{line}: {source}")]
    Json {
        path: PathBuf,
        line: usize,
        source: serde_json::Error,
    },
    #[error("{0}: {1}")]
    Toml(PathBuf, toml::de::Error),
    #[error("invalid session: {0}")]
    Validation(String),
    #[error("sync: {0}")]
    Sync(String),
    #[error("no frame passed stage II")]
    NoRetainedFrames,
    #[error(transparent)]
    Camera(#[from] CameraError),
    #[error(transparent)]
    Geo(#[from] GeoError),
    #[error(transparent)]
    Crop(#[from] CropError),
    #[error(transparent)]
    Crack(#[from] CrackError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// The crack a session was recorded for.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CrackTask {
    pub crack_id: u32,
    pub location: GeoPoint,
    #[serde(default = "default_roi")]
    pub roi_w: u32,
    #[serde(default = "default_roi")]
    pub roi_h: u32,
}

fn default_roi() -> u32 {
    DEFAULT_CROP_SIZE
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionManifest {
    pub camera: PathBuf,
    pub frames: PathBuf,
    pub crack: CrackTask,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SessionLog {
    pub dir: PathBuf,
    pub model: CameraModel,
    pub crack: CrackTask,
    /// Nondecreasing in timestamp.
    pub frames: Vec<FrameRecord>,
}

impl SessionLog {
    pub fn validate(&self) -> Result<(), PipelineError> {
        self.model.validate()?;
        self.crack.location.validate()?;
        if let Some(w) = self.frames.windows(2).find(|w| w[1].timestamp < w[0].timestamp) {
            return Err(PipelineError::Validation(format!(
                "frame {} is older than {}",
                w[1].frame_id, w[0].frame_id
            )));
        }
        for f in &self.frames {
            f.vehicle_fix.validate()?;
            let p = self.image_path(f);
            if !p.is_file() {
                return Err(PipelineError::Validation(format!("image {} not found", p.display())));
            }
        }
        Ok(())
    }

    pub fn image_path(&self, f: &FrameRecord) -> PathBuf {
        self.dir.join(&f.image_path)
    }

    /// Loads `session.toml` (or the given manifest file) and everything it points at.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, PipelineError> {
        let path = path.as_ref();
        let manifest_path = if path.is_dir() { path.join("session.toml") } else { path.to_path_buf() };
        let dir = manifest_path.parent().unwrap_or(Path::new(".")).to_path_buf();
        let text = fs::read_to_string(&manifest_path).map_err(io_err(&manifest_path))?;
        let manifest: SessionManifest = toml::from_str(&text).map_err(|e| PipelineError::Toml(manifest_path.clone(), e))?;
        let model = CameraModel::load(dir.join(&manifest.camera))?;
        let frames = read_frames(&dir.join(&manifest.frames))?;
        let log = SessionLog {
            dir,
            model,
            crack: manifest.crack,
            frames,
        };
        log.validate()?;
        Ok(log)
    }

    /// Writes `session.toml`, `camera.toml` and `frames.jsonl` into `self.dir`.
    pub fn save(&self) -> Result<PathBuf, PipelineError> {
        fs::create_dir_all(&self.dir).map_err(io_err(&self.dir))?;
        let manifest = SessionManifest {
            camera: "camera.toml".into(),
            frames: "frames.jsonl".into(),
            crack: self.crack,
        };
        let write = |name: &str, body: String| -> Result<(), PipelineError> {
            let p = self.dir.join(name);
            fs::write(&p, body).map_err(io_err(&p))
        };
        write("camera.toml", self.model.to_toml_string())?;
        let mut lines = String::new();
        for f in &self.frames {
            lines.push_str(&serde_json::to_string(f).expect("frame serializes"));
            lines.push('\n');
        }
        write("frames.jsonl", lines)?;
        write("session.toml", toml::to_string_pretty(&manifest).expect("manifest serializes"))?;
        Ok(self.dir.join("session.toml"))
    }
}

fn read_frames(path: &Path) -> Result<Vec<FrameRecord>, PipelineError> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|source| PipelineError::Json {
            path: path.to_path_buf(),
            line: i + 1,
            source,
        })?);
    }
    Ok(out)
}

/// A timestamped camera image before pose synchronization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawImage {
    pub frame_id: String,
    pub timestamp: f64,
    pub image_path: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GpsSample {
    pub timestamp: f64,
    pub fix: GeoPoint,
    pub heading_deg: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyncResult {
    pub frames: Vec<FrameRecord>,
    /// Images with no GPS sample within the skew.
    pub dropped: usize,
}

/// Pairs each image with the nearest-in-time GPS sample no more than `max_skew_s`
/// away. Equal distances take the earlier sample. Output is sorted by timestamp.
pub fn sync_frames(images: &[RawImage], gps: &[GpsSample], max_skew_s: f64) -> Result<SyncResult, PipelineError> {
    let mut gps: Vec<GpsSample> = gps.to_vec();
    gps.sort_by(|a, b| a.timestamp.total_cmp(&b.timestamp));
    let mut images: Vec<&RawImage> = images.iter().collect();
    images.sort_by(|a, b| a.timestamp.total_cmp(&b.timestamp).then_with(|| a.frame_id.cmp(&b.frame_id)));
    let mut frames = Vec::new();
    let mut dropped = 0;
    for img in images {
        let i = gps.partition_point(|g| g.timestamp < img.timestamp);
        let before = i.checked_sub(1).map(|j| &gps[j]);
        let after = gps.get(i);
        let nearest = match (before, after) {
            (Some(b), Some(a)) => {
                if img.timestamp - b.timestamp <= a.timestamp - img.timestamp {
                    Some(b)
                } else {
                    Some(a)
                }
            }
            (b, a) => b.or(a),
        };
        match nearest {
            Some(g) if (g.timestamp - img.timestamp).abs() <= max_skew_s => frames.push(FrameRecord {
                frame_id: img.frame_id.clone(),
                timestamp: img.timestamp,
                vehicle_fix: g.fix,
                heading_deg: g.heading_deg,
                image_path: img.image_path.clone(),
                crack_distance_m: None,
                pixels_per_meter: None,
            }),
            _ => dropped += 1,
        }
    }
    if frames.is_empty() {
        return Err(PipelineError::Sync(format!(
            "no image within {max_skew_s} s of a GPS sample ({dropped} dropped)"
        )));
    }
    Ok(SyncResult { frames, dropped })
}

/// A frame kept by Stage II together with its crop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetainedFrame {
    /// Index into the session's frames.
    pub index: usize,
    pub frame_id: String,
    pub window: CropWindow,
    pub pixels_per_meter: f64,
    pub distance_m: f64,
}

/// Frames that pass the resolution gate with the crack center on the sensor, in time order.
pub fn run_stage2(log: &SessionLog, threshold_ppm: f64) -> Result<Vec<RetainedFrame>, PipelineError> {
    let intr = &log.model.intrinsics;
    let mut out = Vec::new();
    for (index, frame) in log.frames.iter().enumerate() {
        let view = view_crack(frame, &log.model, &log.crack.location, threshold_ppm)?;
        if !view.usable() {
            continue;
        }
        let px = view.pixel.expect("usable view has a pixel");
        let window = compute_crop_window(px, log.crack.roi_w, log.crack.roi_h, intr.i_w, intr.i_h)?;
        out.push(RetainedFrame {
            index,
            frame_id: frame.frame_id.clone(),
            window,
            pixels_per_meter: view.gate.measured_ppm().expect("passing gate"),
            distance_m: view.distance_m,
        });
    }
    Ok(out)
}

/// Sidecar stored next to each crop image.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CropSidecar {
    pub u_min: u32,
    pub v_min: u32,
    pub window: CropWindow,
}

/// Writes `<frame_id>_crop.png` and `<frame_id>_crop.json` for every retained frame.
pub fn persist_stage2(log: &SessionLog, retained: &[RetainedFrame], out_dir: &Path) -> Result<(), PipelineError> {
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    for r in retained {
        let img = GrayImage::load(log.image_path(&log.frames[r.index]))?;
        img.crop(&r.window)?.save(out_dir.join(format!("{}_crop.png", r.frame_id)))?;
        let side = CropSidecar {
            u_min: r.window.u_min,
            v_min: r.window.v_min,
            window: r.window,
        };
        let p = out_dir.join(format!("{}_crop.json", r.frame_id));
        fs::write(&p, serde_json::to_string_pretty(&side).expect("sidecar serializes")).map_err(io_err(&p))?;
    }
    Ok(())
}

/// Where Stage III masks come from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Detector {
    BlackHat { kernel: u32, threshold: u8 },
    /// Reads `<dir>/<frame_id>_mask.png`, either crop-sized or full-frame.
    MaskDir(PathBuf),
}

impl Default for Detector {
    fn default() -> Self {
        Detector::BlackHat {
            kernel: DEFAULT_BLACKHAT_KERNEL,
            threshold: DEFAULT_BLACKHAT_THRESHOLD,
        }
    }
}

impl FromStr for Detector {
    type Err = String;

    /// `blackhat`, `blackhat:<kernel>:<threshold>` or `maskdir:<path>`.
    fn from_str(s: &str) -> Result<Self, String> {
        if let Some(p) = s.strip_prefix("maskdir:") {
            return Ok(Detector::MaskDir(p.into()));
        }
        let mut parts = s.split(':');
        if parts.next() != Some("blackhat") {
            return Err(format!("unknown detector {s:?}; expected blackhat or maskdir:<path>"));
        }
        let Detector::BlackHat { mut kernel, mut threshold } = Detector::default() else {
            unreachable!()
        };
        if let Some(k) = parts.next() {
            kernel = k.parse().map_err(|e| format!("kernel: {e}"))?;
        }
        if let Some(t) = parts.next() {
            threshold = t.parse().map_err(|e| format!("threshold: {e}"))?;
        }
        if parts.next().is_some() {
            return Err(format!("too many fields in {s:?}"));
        }
        Ok(Detector::BlackHat { kernel, threshold })
    }
}

impl Detector {
    /// Mask for `frame_id` over `window`, positioned in the full frame.
    pub fn detect(&self, frame_id: &str, image: &GrayImage, window: &CropWindow) -> Result<BinaryMask, CrackError> {
        match self {
            Detector::BlackHat { kernel, threshold } => {
                let crop = image.crop(window)?;
                let mut m = blackhat_mask(&crop, *kernel, *threshold)?;
                m.crop_origin = (window.u_min, window.v_min);
                Ok(m)
            }
            Detector::MaskDir(dir) => {
                let path = dir.join(format!("{frame_id}_mask.png"));
                let full = BinaryMask::load(&path, DEFAULT_MASK_THRESHOLD, (0, 0))?;
                if (full.width, full.height) == (window.b_w, window.b_h) {
                    Ok(BinaryMask {
                        crop_origin: (window.u_min, window.v_min),
                        ..full
                    })
                } else {
                    full.crop(window)
                }
            }
        }
    }
}

/// Mask, corners and length for one frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameMeasurement {
    pub frame_id: String,
    pub pixels_per_meter: f64,
    pub mask_pixels: usize,
    pub corr: [u8; 4],
    pub length: Option<LengthEstimate>,
}

fn measure(
    frame_id: &str,
    mask: &BinaryMask,
    model: &CameraModel,
    ppm: f64,
) -> FrameMeasurement {
    let ground = mask_to_ground(mask, model);
    let (corr, length) = match select_edge_corners(&ground.points) {
        Ok(edges) => (edges.corr, estimate_length(&edges, frame_id).ok()),
        Err(_) => ([0; 4], None),
    };
    FrameMeasurement {
        frame_id: frame_id.to_string(),
        pixels_per_meter: ppm,
        mask_pixels: mask.count(),
        corr,
        length,
    }
}

/// Stage III result for the best frame. Holds no timings so reruns are byte-identical.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    pub crack_id: u32,
    pub frame_id: String,
    pub window: CropWindow,
    /// File name of the mask PNG, relative to the output directory.
    pub mask_file: String,
    /// Hex SHA-256 of the mask PNG bytes.
    pub mask_sha256: String,
    pub corr: [u8; 4],
    /// Present iff `corr[1] == corr[3] == 1`.
    pub length: Option<LengthEstimate>,
}

impl DetectionReport {
    pub fn outcome(&self) -> DetectionOutcome {
        let mut digest = [0u8; 32];
        hex::decode_to_slice(&self.mask_sha256, &mut digest).expect("digest is 32 hex bytes");
        DetectionOutcome {
            length_m: self.length.as_ref().map(|l| l.length_m),
            corr: self.corr,
            mask_digest: digest,
        }
    }

    /// The detection-complete event for the OBU state machine.
    pub fn obu_event(&self) -> ObuEvent {
        ObuEvent::DetectionComplete(self.outcome())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    pub stage2_ms: f64,
    pub stage3_ms: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stage3Output {
    pub report: DetectionReport,
    /// One entry per retained frame, in time order.
    pub diagnostics: Vec<FrameMeasurement>,
    pub best_mask: BinaryMask,
}

pub fn png_bytes(img: &GrayImage) -> Vec<u8> {
    let mut buf = Cursor::new(Vec::new());
    image::GrayImage::from_raw(img.width, img.height, img.pixels.clone())
        .expect("sized buffer")
        .write_to(&mut buf, image::ImageFormat::Png)
        .expect("in-memory png encode");
    buf.into_inner()
}

/// Detects and measures the crack in every retained frame and reports the best one,
/// i.e. the highest pixels-per-meter (earliest on ties).
pub fn run_stage3(log: &SessionLog, retained: &[RetainedFrame], detector: &Detector) -> Result<Stage3Output, PipelineError> {
    if retained.is_empty() {
        return Err(PipelineError::NoRetainedFrames);
    }
    let mut best = 0;
    for (i, r) in retained.iter().enumerate() {
        if r.pixels_per_meter > retained[best].pixels_per_meter {
            best = i;
        }
    }
    let mut diagnostics = Vec::with_capacity(retained.len());
    let mut best_mask = None;
    for (i, r) in retained.iter().enumerate() {
        let image = GrayImage::load(log.image_path(&log.frames[r.index]))?;
        let mask = detector.detect(&r.frame_id, &image, &r.window)?;
        diagnostics.push(measure(&r.frame_id, &mask, &log.model, r.pixels_per_meter));
        if i == best {
            best_mask = Some(mask);
        }
    }
    let best_mask = best_mask.expect("best index is in range");
    let m = &diagnostics[best];
    let digest = Sha256::digest(png_bytes(&best_mask.to_gray()));
    let report = DetectionReport {
        crack_id: log.crack.crack_id,
        frame_id: m.frame_id.clone(),
        window: retained[best].window,
        mask_file: format!("{}_mask.png", m.frame_id),
        mask_sha256: hex::encode(digest),
        corr: m.corr,
        length: m.length.clone(),
    };
    Ok(Stage3Output {
        report,
        diagnostics,
        best_mask,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProcessOutput {
    pub retained: Vec<RetainedFrame>,
    pub stage3: Stage3Output,
    pub timings: StageTimings,
}

/// Runs Stages II and III and writes crops, the best mask, `report.json`,
/// `diagnostics.json` and `timings.json` into `out_dir`.
pub fn process_session(
    log: &SessionLog,
    detector: &Detector,
    threshold_ppm: f64,
    out_dir: &Path,
) -> Result<ProcessOutput, PipelineError> {
    let t0 = Instant::now();
    let retained = run_stage2(log, threshold_ppm)?;
    persist_stage2(log, &retained, out_dir)?;
    let t1 = Instant::now();
    let stage3 = run_stage3(log, &retained, detector)?;
    let t2 = Instant::now();
    let timings = StageTimings {
        stage2_ms: (t1 - t0).as_secs_f64() * 1e3,
        stage3_ms: (t2 - t1).as_secs_f64() * 1e3,
    };
    let mask_path = out_dir.join(&stage3.report.mask_file);
    let png = png_bytes(&stage3.best_mask.to_gray());
    fs::write(&mask_path, &png).map_err(io_err(&mask_path))?;
    let put = |name: &str, body: String| -> Result<(), PipelineError> {
        let p = out_dir.join(name);
        let mut f = fs::File::create(&p).map_err(io_err(&p))?;
        f.write_all(body.as_bytes()).map_err(io_err(&p))?;
        f.write_all(b"\n").map_err(io_err(&p))
    };
    put("report.json", serde_json::to_string_pretty(&stage3.report).expect("report serializes"))?;
    put("diagnostics.json", serde_json::to_string_pretty(&stage3.diagnostics).expect("serializes"))?;
    put("timings.json", serde_json::to_string_pretty(&timings).expect("serializes"))?;
    Ok(ProcessOutput {
        retained,
        stage3,
        timings,
    })
}

/// Default gate used by the CLI.
pub fn default_threshold_ppm() -> f64 {
    DEFAULT_MIN_PPM
}

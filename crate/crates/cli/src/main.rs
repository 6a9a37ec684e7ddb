//! `crackscan` command line.
//!
//! Exit codes: 0 on success, 2 when inputs are missing or invalid, 3 when a valid
//! input fails in processing (nothing passes the gate, calibration is infeasible, ...).

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crackscan::calibration::{calibrate_extrinsics, AngleRange, CalibrationError, CalibrationSample, SearchConfig};
use crackscan::camera::{default_vehicle_to_camera_axes, CameraIntrinsics, CameraModel, ExtrinsicAngles};
use crackscan::crack::{
    estimate_length, mask_to_ground, select_edge_corners, BinaryMask, GrayImage, DEFAULT_MASK_THRESHOLD,
};
use crackscan::crop::{compute_crop_window, view_crack, FrameRecord, DEFAULT_CROP_SIZE, DEFAULT_MIN_PPM};
use crackscan::geo::{vehicle_to_enu, GeoPoint, VehicleVector};
use crackscan::metrics::{default_thresholds, evaluate, ScoreMap};
use crackscan::pipeline::{
    process_session, sync_frames, CrackTask, Detector, GpsSample, PipelineError, RawImage, SessionLog,
    DEFAULT_MAX_SKEW_S,
};
use crackscan::protocol::SimSetup;
use crackscan::synth::{approach_session, calibration_scene, GroundCrack, RenderStyle};

#[derive(Parser)]
#[command(name = "crackscan", version, about = "Infrastructure-guided crack localization and length estimation")]
struct Cli {
    /// TOML file with defaults for thresholds, detector and protocol timers.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Estimate camera mounting angles from checkerboard observations.
    Calibrate(CalibrateArgs),
    /// Run the RSU/OBU protocol over a simulated lossy channel.
    Simulate(SimulateArgs),
    /// Pair logged images with GPS samples and write a session.
    Sync(SyncArgs),
    /// Run Stages II and III over a session and write the detection report.
    Process(ProcessArgs),
    /// Score predicted masks against ground truth.
    Eval(EvalArgs),
    /// Crop one image around a crack position.
    Crop(CropArgs),
    /// Measure a crack from a mask image.
    Length(LengthArgs),
    /// Generate synthetic inputs for the other commands.
    #[command(subcommand)]
    Synth(SynthCommand),
}

#[derive(Args)]
struct CalibrateArgs {
    /// Samples as a JSON array or JSON lines.
    #[arg(long)]
    samples: PathBuf,
    /// Camera file supplying intrinsics and lens offset; its angles are ignored.
    #[arg(long)]
    camera: PathBuf,
    /// Half-width of the search range for every angle, degrees.
    #[arg(long, default_value_t = 10.0)]
    range: f64,
    #[arg(long, default_value_t = 1.0)]
    step: f64,
    #[arg(long)]
    crop_size: Option<u32>,
    /// Also write the camera file with the recovered angles.
    #[arg(long)]
    write_camera: Option<PathBuf>,
}

#[derive(Args)]
struct SimulateArgs {
    /// Setup TOML; defaults to the built-in demo.
    #[arg(long)]
    scenario: Option<PathBuf>,
    #[arg(long)]
    drop: Option<f64>,
    #[arg(long)]
    delay_min: Option<f64>,
    #[arg(long)]
    delay_max: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    max_retries: Option<u32>,
    /// Write the transcript here instead of stdout; the summary then goes to stdout.
    #[arg(long)]
    transcript: Option<PathBuf>,
}

#[derive(Args)]
struct SyncArgs {
    /// JSON lines of `{frame_id, timestamp, image_path}`.
    #[arg(long)]
    images: PathBuf,
    /// JSON lines of `{timestamp, fix, heading_deg}`.
    #[arg(long)]
    gps: PathBuf,
    #[arg(long)]
    camera: PathBuf,
    /// Crack position as `lat,lon,alt`.
    #[arg(long, allow_hyphen_values = true)]
    crack: String,
    #[arg(long, default_value_t = 1)]
    crack_id: u32,
    #[arg(long)]
    max_skew: Option<f64>,
    /// Session directory; defaults to the directory of the images file.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ProcessArgs {
    /// Session directory or manifest.
    #[arg(long)]
    session: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// `blackhat`, `blackhat:<kernel>:<threshold>` or `maskdir:<path>`.
    #[arg(long)]
    detector: Option<String>,
    /// Resolution gate in pixels per meter.
    #[arg(long)]
    threshold: Option<f64>,
}

#[derive(Args)]
struct EvalArgs {
    /// Directory of score images (PNG, scaled to [0, 1]).
    #[arg(long)]
    pred: PathBuf,
    /// Directory of ground-truth masks with the same file names.
    #[arg(long)]
    gt: PathBuf,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct PoseArgs {
    #[arg(long)]
    camera: PathBuf,
    /// Vehicle fix as `lat,lon,alt` (road surface altitude).
    #[arg(long, allow_hyphen_values = true)]
    fix: String,
    #[arg(long, allow_hyphen_values = true)]
    heading: f64,
}

#[derive(Args)]
struct CropArgs {
    #[command(flatten)]
    pose: PoseArgs,
    #[arg(long)]
    image: PathBuf,
    /// Crack position as `lat,lon,alt`.
    #[arg(long, allow_hyphen_values = true)]
    crack: String,
    #[arg(long)]
    size: Option<u32>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct LengthArgs {
    #[command(flatten)]
    pose: PoseArgs,
    #[arg(long)]
    mask: PathBuf,
    /// Top-left pixel of a crop-sized mask in the full frame, `u,v`.
    #[arg(long, default_value = "0,0")]
    origin: String,
}

#[derive(Subcommand)]
enum SynthCommand {
    /// Render an approach towards a straight crack.
    Session {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 3.24)]
        length: f64,
        #[arg(long, default_value_t = 12)]
        frames: usize,
        /// Lens-to-crack distance of the first frame, meters.
        #[arg(long, default_value_t = 24.0)]
        start: f64,
        #[arg(long, default_value_t = 1.5)]
        step: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write the demo protocol setup.
    Scenario {
        #[arg(long)]
        out: PathBuf,
    },
    /// Write checkerboard observations rendered with known angles.
    Calibration {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        camera_out: PathBuf,
        #[arg(long, default_value_t = 2.0, allow_hyphen_values = true)]
        yaw: f64,
        #[arg(long, default_value_t = -1.0, allow_hyphen_values = true)]
        pitch: f64,
        #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
        roll: f64,
        #[arg(long, default_value_t = 8)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

/// Optional settings file; command-line flags take precedence.
#[derive(Debug, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct Config {
    threshold_ppm: Option<f64>,
    detector: Option<String>,
    max_skew_s: Option<f64>,
    crop_size: Option<u32>,
    #[serde(default)]
    protocol: ProtocolTimers,
}

#[derive(Debug, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct ProtocolTimers {
    discover_interval_s: Option<f64>,
    request_timeout_s: Option<f64>,
    result_timeout_s: Option<f64>,
    max_retries: Option<u32>,
    status_interval_s: Option<f64>,
    obu_result_timeout_s: Option<f64>,
}

enum Failure {
    Invalid(anyhow::Error),
    Pipeline(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Invalid(e)
    }
}

type Outcome = Result<(), Failure>;

trait Stage<T> {
    fn failed(self) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> Stage<T> for Result<T, E> {
    fn failed(self) -> Result<T, Failure> {
        self.map_err(|e| Failure::Pipeline(e.into()))
    }
}

/// Input problems exit 2; anything raised while processing valid input exits 3.
fn classify(e: PipelineError) -> Failure {
    match e {
        PipelineError::Io { .. }
        | PipelineError::Json { .. }
        | PipelineError::Toml(..)
        | PipelineError::Validation(_)
        | PipelineError::Camera(_) => Failure::Invalid(e.into()),
        _ => Failure::Pipeline(e.into()),
    }
}

fn parse_geo(s: &str) -> anyhow::Result<GeoPoint> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .with_context(|| format!("expected lat,lon,alt, got {s:?}"))?;
    let [lat, lon, alt] = parts[..] else {
        bail!("expected lat,lon,alt, got {s:?}");
    };
    Ok(GeoPoint::new(lat, lon, alt)?)
}

fn parse_pair(s: &str) -> anyhow::Result<(u32, u32)> {
    let (a, b) = s.split_once(',').ok_or_else(|| anyhow!("expected u,v, got {s:?}"))?;
    Ok((a.trim().parse()?, b.trim().parse()?))
}

fn read_json_records<T: for<'de> Deserialize<'de>>(path: &Path) -> anyhow::Result<Vec<T>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    if text.trim_start().starts_with('[') {
        return serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()));
    }
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).with_context(|| format!("{}:{}", path.display(), i + 1)))
        .collect()
}

fn load_camera(path: &Path) -> anyhow::Result<CameraModel> {
    CameraModel::load(path).with_context(|| format!("loading camera {}", path.display()))
}

/// Writes to stdout, quietly stopping if the reader has gone away.
fn emit(text: &str) {
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(text.as_bytes()).and_then(|_| out.flush());
}

fn print_json<T: Serialize>(v: &T) {
    emit(&(serde_json::to_string_pretty(v).expect("serializable") + "\n"));
}

fn calibrate(a: CalibrateArgs, cfg: &Config) -> Outcome {
    let samples: Vec<CalibrationSample> = read_json_records(&a.samples)?;
    let template = load_camera(&a.camera)?;
    let search = SearchConfig {
        yaw: AngleRange::symmetric(a.range),
        pitch: AngleRange::symmetric(a.range),
        roll: AngleRange::symmetric(a.range),
        step_deg: a.step,
        crop_size: a.crop_size.or(cfg.crop_size).unwrap_or(DEFAULT_CROP_SIZE),
    };
    let report = match calibrate_extrinsics(&samples, &template, &search) {
        Ok(r) => r,
        Err(e @ (CalibrationError::NoSamples | CalibrationError::InvalidSearch(_))) => {
            return Err(Failure::Invalid(e.into()))
        }
        Err(e) => return Err(Failure::Pipeline(e.into())),
    };
    if let Some(p) = &a.write_camera {
        fs::write(p, template.with_angles(report.angles).to_toml_string())
            .with_context(|| format!("writing {}", p.display()))?;
    }
    print_json(&report);
    Ok(())
}

fn simulate(a: SimulateArgs, cfg: &Config) -> Outcome {
    let mut setup = match &a.scenario {
        Some(p) => SimSetup::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => SimSetup::demo(),
    };
    let t = &cfg.protocol;
    let rsu = &mut setup.rsu;
    rsu.discover_interval_s = t.discover_interval_s.unwrap_or(rsu.discover_interval_s);
    rsu.request_timeout_s = t.request_timeout_s.unwrap_or(rsu.request_timeout_s);
    rsu.result_timeout_s = t.result_timeout_s.unwrap_or(rsu.result_timeout_s);
    rsu.max_retries = a.max_retries.or(t.max_retries).unwrap_or(rsu.max_retries);
    let obu = &mut setup.obu;
    obu.status_interval_s = t.status_interval_s.unwrap_or(obu.status_interval_s);
    obu.result_timeout_s = t.obu_result_timeout_s.unwrap_or(obu.result_timeout_s);
    let ch = &mut setup.channel;
    ch.drop_probability = a.drop.unwrap_or(ch.drop_probability);
    ch.delay_min_s = a.delay_min.unwrap_or(ch.delay_min_s);
    ch.delay_max_s = a.delay_max.unwrap_or(ch.delay_max_s);
    ch.seed = a.seed.unwrap_or(ch.seed);
    let report = setup.run().context("invalid simulation setup")?;
    let summary = json!({
        "outcome": report.outcome,
        "end_time_s": report.end_time_s,
        "rsu_phase": report.rsu_phase,
        "obu_phase": report.obu_phase,
        "rsu_retries": report.rsu_retries,
        "sent": report.sent,
        "delivered": report.delivered,
        "result": report.rsu.result,
    });
    match &a.transcript {
        Some(p) => {
            fs::write(p, report.transcript_jsonl()).with_context(|| format!("writing {}", p.display()))?;
            print_json(&summary);
        }
        None => {
            emit(&report.transcript_jsonl());
            eprintln!("{}", serde_json::to_string(&summary).expect("serializable"));
        }
    }
    Ok(())
}

fn sync(a: SyncArgs, cfg: &Config) -> Outcome {
    let images: Vec<RawImage> = read_json_records(&a.images)?;
    let gps: Vec<GpsSample> = read_json_records(&a.gps)?;
    let model = load_camera(&a.camera)?;
    let location = parse_geo(&a.crack)?;
    let skew = a.max_skew.or(cfg.max_skew_s).unwrap_or(DEFAULT_MAX_SKEW_S);
    let synced = sync_frames(&images, &gps, skew).map_err(classify)?;
    let dir = match a.out {
        Some(d) => d,
        None => a.images.parent().map_or_else(|| PathBuf::from("."), Path::to_path_buf),
    };
    let size = cfg.crop_size.unwrap_or(DEFAULT_CROP_SIZE);
    let log = SessionLog {
        dir,
        model,
        crack: CrackTask {
            crack_id: a.crack_id,
            location,
            roi_w: size,
            roi_h: size,
        },
        frames: synced.frames,
    };
    log.validate().map_err(classify)?;
    let manifest = log.save().map_err(classify)?;
    print_json(&json!({
        "session": manifest,
        "frames": log.frames.len(),
        "dropped": synced.dropped,
    }));
    Ok(())
}

fn process(a: ProcessArgs, cfg: &Config) -> Outcome {
    let log = SessionLog::load(&a.session).map_err(classify)?;
    let name = a.detector.or(cfg.detector.clone()).unwrap_or_else(|| "blackhat".into());
    let detector: Detector = name.parse().map_err(|e: String| anyhow!(e))?;
    let threshold = a.threshold.or(cfg.threshold_ppm).unwrap_or(DEFAULT_MIN_PPM);
    if !(threshold.is_finite() && threshold > 0.0) {
        return Err(anyhow!("threshold must be positive, got {threshold}").into());
    }
    let out = process_session(&log, &detector, threshold, &a.out).map_err(classify)?;
    print_json(&out.stage3.report);
    Ok(())
}

fn png_names(dir: &Path) -> anyhow::Result<Vec<String>> {
    let mut names: Vec<String> = fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.to_ascii_lowercase().ends_with(".png"))
        .collect();
    names.sort();
    Ok(names)
}

fn eval(a: EvalArgs) -> Outcome {
    let names = png_names(&a.pred)?;
    if names.is_empty() {
        return Err(anyhow!("no PNG files in {}", a.pred.display()).into());
    }
    let mut preds = Vec::new();
    let mut gts = Vec::new();
    for n in &names {
        preds.push(ScoreMap::load(a.pred.join(n)).with_context(|| format!("loading prediction {n}"))?);
        let g = a.gt.join(n);
        if !g.exists() {
            return Err(anyhow!("no ground truth for {n} in {}", a.gt.display()).into());
        }
        gts.push(BinaryMask::load(&g, DEFAULT_MASK_THRESHOLD, (0, 0)).with_context(|| format!("loading mask {n}"))?);
    }
    let e = evaluate(&preds, &gts, &default_thresholds()).map_err(|e| Failure::Invalid(e.into()))?;
    let b = e.bundle;
    if a.json {
        print_json(&b);
    } else {
        emit(&format!(
            "images     {}\nODS F1     {:.4}\nOIS F1     {:.4}\nprecision  {:.4}\nrecall     {:.4}\nAP         {:.4}\n",
            names.len(),
            b.ods_f1,
            b.ois_f1,
            b.precision_at_ods,
            b.recall_at_ods,
            b.ap
        ));
    }
    Ok(())
}

fn crop(a: CropArgs, cfg: &Config) -> Outcome {
    let model = load_camera(&a.pose.camera)?;
    let fix = parse_geo(&a.pose.fix)?;
    let crack = parse_geo(&a.crack)?;
    let image = GrayImage::load(&a.image).with_context(|| format!("loading {}", a.image.display()))?;
    let intr = &model.intrinsics;
    if (image.width, image.height) != (intr.i_w, intr.i_h) {
        return Err(anyhow!(
            "image is {}x{} but the camera expects {}x{}",
            image.width,
            image.height,
            intr.i_w,
            intr.i_h
        )
        .into());
    }
    let frame = FrameRecord {
        frame_id: "frame".into(),
        timestamp: 0.0,
        vehicle_fix: fix,
        heading_deg: a.pose.heading,
        image_path: a.image.clone(),
        crack_distance_m: None,
        pixels_per_meter: None,
    };
    let threshold = cfg.threshold_ppm.unwrap_or(DEFAULT_MIN_PPM);
    let view = view_crack(&frame, &model, &crack, threshold).failed()?;
    let px = match view.pixel {
        Some(px) if intr.contains(px) => px,
        _ => return Err(Failure::Pipeline(anyhow!("crack is not on the sensor in this pose"))),
    };
    let size = a.size.or(cfg.crop_size).unwrap_or(DEFAULT_CROP_SIZE);
    let window = compute_crop_window(px, size, size, intr.i_w, intr.i_h).map_err(|e| Failure::Invalid(e.into()))?;
    image.crop(&window).failed()?.save(&a.out).failed()?;
    print_json(&json!({
        "pixel": px,
        "window": window,
        "distance_m": view.distance_m,
        "gate": view.gate,
    }));
    Ok(())
}

fn length(a: LengthArgs) -> Outcome {
    let model = load_camera(&a.pose.camera)?;
    let fix = parse_geo(&a.pose.fix)?;
    let origin = parse_pair(&a.origin)?;
    let mask = BinaryMask::load(&a.mask, DEFAULT_MASK_THRESHOLD, origin)
        .with_context(|| format!("loading {}", a.mask.display()))?;
    let intr = &model.intrinsics;
    if origin.0 + mask.width > intr.i_w || origin.1 + mask.height > intr.i_h {
        return Err(anyhow!("mask at {origin:?} extends past the {}x{} frame", intr.i_w, intr.i_h).into());
    }
    let ground = mask_to_ground(&mask, &model);
    let edges = select_edge_corners(&ground.points).failed()?;
    let stem = a.mask.file_stem().map_or_else(String::new, |s| s.to_string_lossy().into_owned());
    match estimate_length(&edges, &stem) {
        Ok(l) => {
            let geo = |p| fix.offset_by(vehicle_to_enu(p, a.pose.heading));
            print_json(&json!({
                "length_m": l.length_m,
                "corr": edges.corr,
                "endpoints_vehicle": l.endpoints,
                "endpoints_geo": [geo(l.endpoints.0), geo(l.endpoints.1)],
                "mask_pixels": mask.count(),
                "skipped_pixels": ground.skipped,
            }));
            Ok(())
        }
        Err(e) => {
            print_json(&json!({ "length_m": null, "corr": edges.corr, "mask_pixels": mask.count() }));
            Err(Failure::Pipeline(e.into()))
        }
    }
}

fn synth(c: SynthCommand) -> Outcome {
    let site = GeoPoint::new(42.2936, -83.7166, 250.0).expect("valid");
    let model = || {
        CameraModel::new(
            CameraIntrinsics::new(1200.0, 1200.0, 1032.0, 772.0, 2064, 1544).expect("valid intrinsics"),
            ExtrinsicAngles::new(1.0, 2.0, 0.5),
            default_vehicle_to_camera_axes(),
            VehicleVector::new(1.2, 0.0, 1.5),
        )
        .expect("valid camera")
    };
    match c {
        SynthCommand::Session {
            out,
            length,
            frames,
            start,
            step,
            seed,
        } => {
            let crack = GroundCrack {
                center: site,
                length_m: length,
                bearing_deg: 45.0,
                width_m: 0.006,
            };
            let distances: Vec<f64> = (0..frames).map(|k| start - step * k as f64).collect();
            let style = RenderStyle {
                seed,
                ..RenderStyle::default()
            };
            let log = approach_session(&out, &model(), &crack, 0.0, &distances, &style).map_err(classify)?;
            print_json(&json!({ "session": log.dir.join("session.toml"), "frames": log.frames.len() }));
        }
        SynthCommand::Scenario { out } => {
            fs::write(&out, SimSetup::demo().to_toml_string()).with_context(|| format!("writing {}", out.display()))?;
        }
        SynthCommand::Calibration {
            out,
            camera_out,
            yaw,
            pitch,
            roll,
            count,
            seed,
        } => {
            let truth = model().with_angles(ExtrinsicAngles::new(yaw, pitch, roll));
            truth.validate().context("angles")?;
            let samples = calibration_scene(&truth, &site, count, DEFAULT_CROP_SIZE, seed);
            fs::write(&out, serde_json::to_string_pretty(&samples).expect("serializable"))
                .with_context(|| format!("writing {}", out.display()))?;
            let blank = truth.with_angles(ExtrinsicAngles::default());
            fs::write(&camera_out, blank.to_toml_string()).with_context(|| format!("writing {}", camera_out.display()))?;
        }
    }
    Ok(())
}

fn load_config(path: Option<&Path>) -> anyhow::Result<Config> {
    let Some(p) = path else {
        return Ok(Config::default());
    };
    let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
    toml::from_str(&text).with_context(|| format!("parsing {}", p.display()))
}

fn run(cli: Cli) -> Outcome {
    let cfg = load_config(cli.config.as_deref())?;
    match cli.command {
        Command::Calibrate(a) => calibrate(a, &cfg),
        Command::Simulate(a) => simulate(a, &cfg),
        Command::Sync(a) => sync(a, &cfg),
        Command::Process(a) => process(a, &cfg),
        Command::Eval(a) => eval(a),
        Command::Crop(a) => crop(a, &cfg),
        Command::Length(a) => length(a),
        Command::Synth(c) => synth(c),
    }
}

/// The error chain joined by colons, skipping causes a message already quotes.
fn describe(e: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in e.chain() {
        let s = cause.to_string();
        if out.contains(&s) {
            continue;
        }
        if !out.is_empty() {
            out.push_str(": ");
        }
        out.push_str(&s);
    }
    out
}

fn main() -> ExitCode {
    let (code, e) = match run(Cli::parse()) {
        Ok(()) => return ExitCode::SUCCESS,
        Err(Failure::Invalid(e)) => (2, e),
        Err(Failure::Pipeline(e)) => (3, e),
    };
    eprintln!("error: {}", describe(&e));
    ExitCode::from(code)
}

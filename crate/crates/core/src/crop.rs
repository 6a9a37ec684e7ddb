//! Dynamic cropping window, resolution gating and best-frame selection.

use std::cmp::Ordering;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::camera::{project_pinhole, vehicle_to_camera, CameraModel, PixelPoint};
use crate::geo::{geo_to_vehicle, GeoError, GeoPoint, VehicleVector};

/// Default crop edge length in pixels, matching the detector input.
pub const DEFAULT_CROP_SIZE: u32 = 512;
/// Default minimum resolution at the crack, pixels per meter.
pub const DEFAULT_MIN_PPM: f64 = 60.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CropError {
    #[error("crop {b_w}x{b_h} does not fit in image {i_w}x{i_h}")]
    WindowTooLarge { b_w: u32, b_h: u32, i_w: u32, i_h: u32 },
    #[error("crop size must be positive")]
    EmptyWindow,
    #[error("crop center is not finite")]
    NonFiniteCenter,
    #[error("no frames to select from")]
    NoFrames,
    #[error("no frame passed selection ({} rejected)", .0.len())]
    NoFrameSelected(Vec<(usize, RejectReason)>),
    #[error(transparent)]
    Geo(#[from] GeoError),
}

/// Pixel rectangle `[u_min, u_max) x [v_min, v_max)` inside the full frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropWindow {
    pub u_min: u32,
    pub v_min: u32,
    pub u_max: u32,
    pub v_max: u32,
    pub b_w: u32,
    pub b_h: u32,
}

impl CropWindow {
    pub fn center(&self) -> PixelPoint {
        PixelPoint::new(
            (self.u_min + self.u_max) as f64 / 2.0,
            (self.v_min + self.v_max) as f64 / 2.0,
        )
    }

    /// Closed-interval containment, matching the window corners.
    pub fn contains(&self, p: PixelPoint) -> bool {
        p.u >= self.u_min as f64
            && p.u <= self.u_max as f64
            && p.v >= self.v_min as f64
            && p.v <= self.v_max as f64
    }

    pub fn is_inside_image(&self, i_w: u32, i_h: u32) -> bool {
        self.u_max <= i_w && self.v_max <= i_h
    }
}

/// Window of size `b_w x b_h` centered on `center`, shifted as little as needed to
/// stay inside an `i_w x i_h` image. The corner is rounded to the nearest pixel.
pub fn compute_crop_window(
    center: PixelPoint,
    b_w: u32,
    b_h: u32,
    i_w: u32,
    i_h: u32,
) -> Result<CropWindow, CropError> {
    if b_w == 0 || b_h == 0 {
        return Err(CropError::EmptyWindow);
    }
    if b_w > i_w || b_h > i_h {
        return Err(CropError::WindowTooLarge { b_w, b_h, i_w, i_h });
    }
    if !center.is_finite() {
        return Err(CropError::NonFiniteCenter);
    }
    let corner = |c: f64, b: u32, i: u32| -> u32 {
        let lo = (c - b as f64 / 2.0).min((i - b) as f64).max(0.0);
        lo.round() as u32
    };
    let u_min = corner(center.u, b_w, i_w);
    let v_min = corner(center.v, b_h, i_h);
    Ok(CropWindow {
        u_min,
        v_min,
        u_max: u_min + b_w,
        v_max: v_min + b_h,
        b_w,
        b_h,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    BehindCamera,
    BelowThreshold,
    OutsideImage,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum GateOutcome {
    Pass { measured_ppm: f64 },
    Reject { measured_ppm: Option<f64>, reason: RejectReason },
}

impl GateOutcome {
    pub fn passed(&self) -> bool {
        matches!(self, GateOutcome::Pass { .. })
    }

    pub fn measured_ppm(&self) -> Option<f64> {
        match *self {
            GateOutcome::Pass { measured_ppm } => Some(measured_ppm),
            GateOutcome::Reject { measured_ppm, .. } => measured_ppm,
        }
    }
}

/// Pixels spanned by one meter at the crack's depth, compared against `threshold_ppm`.
///
/// `p_rel` is the crack relative to the lens in the vehicle frame.
pub fn resolution_gate(p_rel: VehicleVector, model: &CameraModel, threshold_ppm: f64) -> GateOutcome {
    let z = vehicle_to_camera(p_rel, model).z_m;
    if !(z > 0.0) {
        return GateOutcome::Reject {
            measured_ppm: None,
            reason: RejectReason::BehindCamera,
        };
    }
    let ppm = model.intrinsics.fx / z;
    if ppm >= threshold_ppm {
        GateOutcome::Pass { measured_ppm: ppm }
    } else {
        GateOutcome::Reject {
            measured_ppm: Some(ppm),
            reason: RejectReason::BelowThreshold,
        }
    }
}

/// One logged camera frame with the pose it was synchronized to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub frame_id: String,
    pub timestamp: f64,
    pub vehicle_fix: GeoPoint,
    pub heading_deg: f64,
    pub image_path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub crack_distance_m: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pixels_per_meter: Option<f64>,
}

/// Geometry of a crack as seen from one frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrameView {
    /// Crack relative to the lens, vehicle frame.
    pub p_rel: VehicleVector,
    pub distance_m: f64,
    pub pixel: Option<PixelPoint>,
    pub gate: GateOutcome,
}

impl FrameView {
    /// Passed the gate and the crack center projects onto the sensor.
    pub fn usable(&self) -> bool {
        self.reject_reason().is_none()
    }

    pub fn reject_reason(&self) -> Option<RejectReason> {
        match self.gate {
            GateOutcome::Reject { reason, .. } => Some(reason),
            GateOutcome::Pass { .. } => match self.pixel {
                None => Some(RejectReason::BehindCamera),
                Some(_) => None,
            },
        }
    }
}

pub fn view_crack(
    frame: &FrameRecord,
    model: &CameraModel,
    crack: &GeoPoint,
    threshold_ppm: f64,
) -> Result<FrameView, GeoError> {
    let p_v = geo_to_vehicle(crack, &frame.vehicle_fix, frame.heading_deg)?;
    let p_rel = p_v - model.t_vc;
    let mut gate = resolution_gate(p_rel, model, threshold_ppm);
    let pixel = project_pinhole(vehicle_to_camera(p_rel, model), &model.intrinsics).ok();
    let pixel = match pixel {
        Some(px) if !model.intrinsics.contains(px) => {
            if gate.passed() {
                gate = GateOutcome::Reject {
                    measured_ppm: gate.measured_ppm(),
                    reason: RejectReason::OutsideImage,
                };
            }
            Some(px)
        }
        other => other,
    };
    Ok(FrameView {
        p_rel,
        distance_m: p_rel.to_vector().norm(),
        pixel,
        gate,
    })
}

/// Index of the frame with the highest resolution at the crack.
///
/// Candidates must pass [`resolution_gate`] and see the crack center on the sensor.
/// Ties go to the earliest timestamp, then the smallest frame id.
pub fn select_best_frame(
    frames: &[FrameRecord],
    model: &CameraModel,
    crack: &GeoPoint,
    threshold_ppm: f64,
) -> Result<usize, CropError> {
    if frames.is_empty() {
        return Err(CropError::NoFrames);
    }
    let mut rejects = Vec::new();
    let mut best: Option<(usize, f64)> = None;
    for (i, frame) in frames.iter().enumerate() {
        let view = view_crack(frame, model, crack, threshold_ppm)?;
        if let Some(reason) = view.reject_reason() {
            rejects.push((i, reason));
            continue;
        }
        let ppm = view.gate.measured_ppm().expect("passing gate has ppm");
        best = match best {
            Some((j, best_ppm)) if !better(frame, ppm, &frames[j], best_ppm) => Some((j, best_ppm)),
            _ => Some((i, ppm)),
        };
    }
    best.map(|(i, _)| i).ok_or(CropError::NoFrameSelected(rejects))
}

fn better(a: &FrameRecord, a_ppm: f64, b: &FrameRecord, b_ppm: f64) -> bool {
    match a_ppm.total_cmp(&b_ppm) {
        Ordering::Greater => true,
        Ordering::Less => false,
        Ordering::Equal => match a.timestamp.total_cmp(&b.timestamp) {
            Ordering::Less => true,
            Ordering::Greater => false,
            Ordering::Equal => a.frame_id < b.frame_id,
        },
    }
}

//! Pinhole camera model mounted on the vehicle.
//!
//! A vehicle-frame point relative to the lens goes to the camera frame through the
//! fixed axis relabeling `r_c_v` followed by the mounting rotation built from the
//! yaw/pitch/roll angles, then onto the image through the intrinsic matrix.
//! [`back_project_ground`] inverts that chain for pixels that see the road.

use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geo::VehicleVector;

/// `(R_C^V)^T R^T c` z-components at or above this are treated as not hitting the road.
pub const GROUND_RAY_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CameraError {
    #[error("point is behind the camera (z = {0})")]
    BehindCamera(f64),
    #[error("pixel ray does not intersect the ground plane (ray z = {0})")]
    NoGroundIntersection(f64),
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("invalid extrinsics: {0}")]
    InvalidExtrinsics(String),
    #[error("camera config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraVector {
    pub x_m: f64,
    pub y_m: f64,
    pub z_m: f64,
}

impl CameraVector {
    pub const fn new(x_m: f64, y_m: f64, z_m: f64) -> Self {
        Self { x_m, y_m, z_m }
    }

    pub fn to_vector(self) -> Vector3<f64> {
        Vector3::new(self.x_m, self.y_m, self.z_m)
    }

    pub fn from_vector(v: Vector3<f64>) -> Self {
        Self::new(v.x, v.y, v.z)
    }
}

/// Image coordinate; `u` is the column, `v` the row. Integer values are pixel centers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PixelPoint {
    pub u: f64,
    pub v: f64,
}

impl PixelPoint {
    pub const fn new(u: f64, v: f64) -> Self {
        Self { u, v }
    }

    pub fn is_finite(&self) -> bool {
        self.u.is_finite() && self.v.is_finite()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// Sensor width in pixels.
    pub i_w: u32,
    /// Sensor height in pixels.
    pub i_h: u32,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, i_w: u32, i_h: u32) -> Result<Self, CameraError> {
        let k = Self {
            fx,
            fy,
            cx,
            cy,
            i_w,
            i_h,
        };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<(), CameraError> {
        if !(self.fx > 0.0 && self.fy > 0.0 && self.fx.is_finite() && self.fy.is_finite()) {
            return Err(CameraError::InvalidIntrinsics(format!(
                "focal lengths must be positive, got fx={} fy={}",
                self.fx, self.fy
            )));
        }
        if !(self.cx > 0.0 && self.cx < self.i_w as f64) {
            return Err(CameraError::InvalidIntrinsics(format!(
                "cx={} outside (0, {})",
                self.cx, self.i_w
            )));
        }
        if !(self.cy > 0.0 && self.cy < self.i_h as f64) {
            return Err(CameraError::InvalidIntrinsics(format!(
                "cy={} outside (0, {})",
                self.cy, self.i_h
            )));
        }
        Ok(())
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    /// True when the pixel lies on the sensor, `[0, i_w) x [0, i_h)`.
    pub fn contains(&self, p: PixelPoint) -> bool {
        p.u >= 0.0 && p.v >= 0.0 && p.u < self.i_w as f64 && p.v < self.i_h as f64
    }
}

/// Mounting angles in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ExtrinsicAngles {
    pub yaw_deg: f64,
    pub pitch_deg: f64,
    pub roll_deg: f64,
}

impl ExtrinsicAngles {
    pub const fn new(yaw_deg: f64, pitch_deg: f64, roll_deg: f64) -> Self {
        Self {
            yaw_deg,
            pitch_deg,
            roll_deg,
        }
    }

    pub fn validate(&self) -> Result<(), CameraError> {
        for (name, a) in [
            ("yaw", self.yaw_deg),
            ("pitch", self.pitch_deg),
            ("roll", self.roll_deg),
        ] {
            if !(-180.0..180.0).contains(&a) {
                return Err(CameraError::InvalidExtrinsics(format!(
                    "{name} {a} deg outside [-180, 180)"
                )));
            }
        }
        Ok(())
    }

    /// Sum of absolute angles; used to break ties toward the smallest correction.
    pub fn l1(&self) -> f64 {
        self.yaw_deg.abs() + self.pitch_deg.abs() + self.roll_deg.abs()
    }
}

/// Order in which the elementary rotations are composed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RotationOrder {
    /// `R_z(yaw) R_x(pitch) R_y(roll)`.
    #[default]
    Zxy,
    /// `R_z(yaw) R_y(roll) R_x(pitch)`.
    Zyx,
}

pub fn rot_x(deg: f64) -> Matrix3<f64> {
    let (s, c) = deg.to_radians().sin_cos();
    Matrix3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c)
}

pub fn rot_y(deg: f64) -> Matrix3<f64> {
    let (s, c) = deg.to_radians().sin_cos();
    Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
}

pub fn rot_z(deg: f64) -> Matrix3<f64> {
    let (s, c) = deg.to_radians().sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

/// Mounting rotation `R_z(yaw) R_x(pitch) R_y(roll)`.
pub fn rotation_zyx(angles: &ExtrinsicAngles) -> Matrix3<f64> {
    mounting_rotation(angles, RotationOrder::Zxy)
}

pub fn mounting_rotation(angles: &ExtrinsicAngles, order: RotationOrder) -> Matrix3<f64> {
    let z = rot_z(angles.yaw_deg);
    let x = rot_x(angles.pitch_deg);
    let y = rot_y(angles.roll_deg);
    match order {
        RotationOrder::Zxy => z * x * y,
        RotationOrder::Zyx => z * y * x,
    }
}

/// Vehicle (x fwd, y left, z up) to optical (x right, y down, z fwd) relabeling.
pub fn default_vehicle_to_camera_axes() -> Matrix3<f64> {
    Matrix3::new(0.0, -1.0, 0.0, 0.0, 0.0, -1.0, 1.0, 0.0, 0.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CameraModel {
    pub intrinsics: CameraIntrinsics,
    pub angles: ExtrinsicAngles,
    pub rotation_order: RotationOrder,
    /// Fixed rotation taking vehicle-frame axes to camera-frame axes.
    pub r_c_v: Matrix3<f64>,
    /// Lens position in the vehicle frame; `z_m` is the lens height above the road.
    pub t_vc: VehicleVector,
}

impl CameraModel {
    pub fn new(
        intrinsics: CameraIntrinsics,
        angles: ExtrinsicAngles,
        r_c_v: Matrix3<f64>,
        t_vc: VehicleVector,
    ) -> Result<Self, CameraError> {
        let m = Self {
            intrinsics,
            angles,
            rotation_order: RotationOrder::default(),
            r_c_v,
            t_vc,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<(), CameraError> {
        self.intrinsics.validate()?;
        self.angles.validate()?;
        let r = &self.r_c_v;
        let err = (r.transpose() * r - Matrix3::identity()).abs().max();
        if err > 1e-9 || (r.determinant() - 1.0).abs() > 1e-9 {
            return Err(CameraError::InvalidExtrinsics(
                "r_c_v must be orthonormal with determinant +1".into(),
            ));
        }
        if !(self.t_vc.z_m > 0.0) {
            return Err(CameraError::InvalidExtrinsics(format!(
                "lens height t_vc.z must be positive, got {}",
                self.t_vc.z_m
            )));
        }
        Ok(())
    }

    pub fn with_angles(&self, angles: ExtrinsicAngles) -> Self {
        Self {
            angles,
            ..self.clone()
        }
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        mounting_rotation(&self.angles, self.rotation_order)
    }

    /// Combined vehicle-to-camera rotation `R r_c_v`.
    pub fn vehicle_to_camera_rotation(&self) -> Matrix3<f64> {
        self.rotation() * self.r_c_v
    }

    /// Pixel of a vehicle-frame point (lens offset removed internally).
    pub fn project_vehicle_point(&self, p: VehicleVector) -> Result<PixelPoint, CameraError> {
        project_pinhole(
            vehicle_to_camera(p - self.t_vc, self),
            &self.intrinsics,
        )
    }

    pub fn from_config(cfg: &CameraConfig) -> Result<Self, CameraError> {
        let intr = CameraIntrinsics::new(cfg.fx, cfg.fy, cfg.cx, cfg.cy, cfg.i_w, cfg.i_h)?;
        let r = &cfg.r_c_v;
        let m = Self {
            intrinsics: intr,
            angles: ExtrinsicAngles::new(cfg.yaw_deg, cfg.pitch_deg, cfg.roll_deg),
            rotation_order: cfg.rotation_order,
            r_c_v: Matrix3::new(r[0], r[1], r[2], r[3], r[4], r[5], r[6], r[7], r[8]),
            t_vc: VehicleVector::new(cfg.t_vc[0], cfg.t_vc[1], cfg.t_vc[2]),
        };
        m.validate()?;
        Ok(m)
    }

    pub fn to_config(&self) -> CameraConfig {
        let r = &self.r_c_v;
        CameraConfig {
            fx: self.intrinsics.fx,
            fy: self.intrinsics.fy,
            cx: self.intrinsics.cx,
            cy: self.intrinsics.cy,
            i_w: self.intrinsics.i_w,
            i_h: self.intrinsics.i_h,
            yaw_deg: self.angles.yaw_deg,
            pitch_deg: self.angles.pitch_deg,
            roll_deg: self.angles.roll_deg,
            rotation_order: self.rotation_order,
            r_c_v: [
                r[(0, 0)],
                r[(0, 1)],
                r[(0, 2)],
                r[(1, 0)],
                r[(1, 1)],
                r[(1, 2)],
                r[(2, 0)],
                r[(2, 1)],
                r[(2, 2)],
            ],
            t_vc: [self.t_vc.x_m, self.t_vc.y_m, self.t_vc.z_m],
        }
    }

    pub fn from_toml_str(s: &str) -> Result<Self, CameraError> {
        let cfg: CameraConfig = toml::from_str(s).map_err(|e| CameraError::Config(e.to_string()))?;
        Self::from_config(&cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CameraError> {
        let path = path.as_ref();
        let s = std::fs::read_to_string(path)
            .map_err(|e| CameraError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&s)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(&self.to_config()).expect("camera config serializes")
    }
}

/// On-disk camera description. Angles in degrees, lengths in meters, `r_c_v` row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraConfig {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub i_w: u32,
    pub i_h: u32,
    #[serde(default)]
    pub yaw_deg: f64,
    #[serde(default)]
    pub pitch_deg: f64,
    #[serde(default)]
    pub roll_deg: f64,
    #[serde(default)]
    pub rotation_order: RotationOrder,
    #[serde(default = "default_r_c_v")]
    pub r_c_v: [f64; 9],
    pub t_vc: [f64; 3],
}

fn default_r_c_v() -> [f64; 9] {
    [0.0, -1.0, 0.0, 0.0, 0.0, -1.0, 1.0, 0.0, 0.0]
}

/// `p_C = R r_c_v p_rel`, where `p_rel` is already relative to the lens.
pub fn vehicle_to_camera(p_rel: VehicleVector, model: &CameraModel) -> CameraVector {
    CameraVector::from_vector(model.vehicle_to_camera_rotation() * p_rel.to_vector())
}

pub fn project_pinhole(p_c: CameraVector, intr: &CameraIntrinsics) -> Result<PixelPoint, CameraError> {
    if !(p_c.z_m > 0.0) {
        return Err(CameraError::BehindCamera(p_c.z_m));
    }
    Ok(PixelPoint::new(
        intr.fx * p_c.x_m / p_c.z_m + intr.cx,
        intr.fy * p_c.y_m / p_c.z_m + intr.cy,
    ))
}

/// Normalized viewing ray of a pixel, expressed in the vehicle frame.
pub fn pixel_ray_vehicle(pixel: PixelPoint, model: &CameraModel) -> Vector3<f64> {
    let k = &model.intrinsics;
    let ray_c = Vector3::new((pixel.u - k.cx) / k.fx, (pixel.v - k.cy) / k.fy, 1.0);
    model.r_c_v.transpose() * model.rotation().transpose() * ray_c
}

/// Scales a vehicle-frame ray from the lens until it reaches the road (z = 0).
pub fn intersect_ground(ray_v: Vector3<f64>, t_vc: VehicleVector) -> Result<VehicleVector, CameraError> {
    if !(ray_v.z < -GROUND_RAY_TOLERANCE) {
        return Err(CameraError::NoGroundIntersection(ray_v.z));
    }
    let scale = -t_vc.z_m / ray_v.z;
    Ok(VehicleVector::new(
        t_vc.x_m + scale * ray_v.x,
        t_vc.y_m + scale * ray_v.y,
        0.0,
    ))
}

/// Ground point seen at `pixel`, assuming a flat road at z = 0.
pub fn back_project_ground(pixel: PixelPoint, model: &CameraModel) -> Result<VehicleVector, CameraError> {
    intersect_ground(pixel_ray_vehicle(pixel, model), model.t_vc)
}

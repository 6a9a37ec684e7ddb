//! WGS84 geodesy and the local frames used to place a crack relative to the vehicle.
//!
//! Positions move through three frames:
//!
//! 1. geodetic fixes ([`GeoPoint`]) from RTK GPS,
//! 2. a local east-north-up tangent plane ([`EnuVector`]) anchored at the vehicle fix,
//! 3. the vehicle body frame ([`VehicleVector`]): x forward, y left, z up, with the
//!    road surface at z = 0.
//!
//! The ENU step uses the full ECEF chain on the WGS84 ellipsoid.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// WGS84 semi-major axis in meters.
pub const WGS84_A: f64 = 6_378_137.0;
/// WGS84 flattening.
pub const WGS84_F: f64 = 1.0 / 298.257_223_563;
/// First eccentricity squared.
pub const WGS84_E2: f64 = WGS84_F * (2.0 - WGS84_F);

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeoError {
    #[error("latitude {0} deg outside [-90, 90]")]
    Latitude(f64),
    #[error("longitude {0} deg outside [-180, 180]")]
    Longitude(f64),
    #[error("non-finite coordinate")]
    NonFinite,
}

/// A WGS84 fix. Altitude is meters above the ellipsoid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoPoint {
    pub lat_deg: f64,
    pub lon_deg: f64,
    pub alt_m: f64,
}

impl GeoPoint {
    pub fn new(lat_deg: f64, lon_deg: f64, alt_m: f64) -> Result<Self, GeoError> {
        let p = Self {
            lat_deg,
            lon_deg,
            alt_m,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), GeoError> {
        if !(self.lat_deg.is_finite() && self.lon_deg.is_finite() && self.alt_m.is_finite()) {
            return Err(GeoError::NonFinite);
        }
        if !(-90.0..=90.0).contains(&self.lat_deg) {
            return Err(GeoError::Latitude(self.lat_deg));
        }
        if !(-180.0..=180.0).contains(&self.lon_deg) {
            return Err(GeoError::Longitude(self.lon_deg));
        }
        Ok(())
    }

    /// Earth-centered, earth-fixed coordinates in meters.
    pub fn to_ecef(&self) -> Vector3<f64> {
        let lat = self.lat_deg.to_radians();
        let lon = self.lon_deg.to_radians();
        let (sin_lat, cos_lat) = lat.sin_cos();
        let (sin_lon, cos_lon) = lon.sin_cos();
        let n = WGS84_A / (1.0 - WGS84_E2 * sin_lat * sin_lat).sqrt();
        Vector3::new(
            (n + self.alt_m) * cos_lat * cos_lon,
            (n + self.alt_m) * cos_lat * sin_lon,
            (n * (1.0 - WGS84_E2) + self.alt_m) * sin_lat,
        )
    }

    /// Inverse of [`geodetic_to_enu`]: the fix lying at `enu` from `self`.
    ///
    /// Uses Bowring's closed form for the ECEF to geodetic step, which is accurate
    /// to well below a millimeter near the surface.
    pub fn offset_by(&self, enu: EnuVector) -> GeoPoint {
        let lat = self.lat_deg.to_radians();
        let lon = self.lon_deg.to_radians();
        let ecef = self.to_ecef() + enu_basis(lat, lon).transpose() * enu.to_vector();
        ecef_to_geodetic(ecef)
    }
}

fn ecef_to_geodetic(p: Vector3<f64>) -> GeoPoint {
    let b = WGS84_A * (1.0 - WGS84_F);
    let ep2 = (WGS84_A * WGS84_A - b * b) / (b * b);
    let r = (p.x * p.x + p.y * p.y).sqrt();
    let theta = (p.z * WGS84_A).atan2(r * b);
    let (st, ct) = theta.sin_cos();
    let lat = (p.z + ep2 * b * st * st * st).atan2(r - WGS84_E2 * WGS84_A * ct * ct * ct);
    let lon = p.y.atan2(p.x);
    let sin_lat = lat.sin();
    let n = WGS84_A / (1.0 - WGS84_E2 * sin_lat * sin_lat).sqrt();
    let alt = if lat.cos().abs() > 1e-10 {
        r / lat.cos() - n
    } else {
        p.z.abs() / sin_lat.abs() - n * (1.0 - WGS84_E2)
    };
    GeoPoint {
        lat_deg: lat.to_degrees(),
        lon_deg: lon.to_degrees(),
        alt_m: alt,
    }
}

/// Rows are the east, north and up unit vectors expressed in ECEF.
fn enu_basis(lat: f64, lon: f64) -> nalgebra::Matrix3<f64> {
    let (sl, cl) = lat.sin_cos();
    let (so, co) = lon.sin_cos();
    nalgebra::Matrix3::new(
        -so,
        co,
        0.0,
        -sl * co,
        -sl * so,
        cl,
        cl * co,
        cl * so,
        sl,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnuVector {
    pub east_m: f64,
    pub north_m: f64,
    pub up_m: f64,
}

impl EnuVector {
    pub fn new(east_m: f64, north_m: f64, up_m: f64) -> Self {
        Self {
            east_m,
            north_m,
            up_m,
        }
    }

    pub fn to_vector(self) -> Vector3<f64> {
        Vector3::new(self.east_m, self.north_m, self.up_m)
    }
}

/// Position in the vehicle body frame: x forward, y left, z up, road surface at z = 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VehicleVector {
    pub x_m: f64,
    pub y_m: f64,
    pub z_m: f64,
}

impl VehicleVector {
    pub const fn new(x_m: f64, y_m: f64, z_m: f64) -> Self {
        Self { x_m, y_m, z_m }
    }

    pub fn to_vector(self) -> Vector3<f64> {
        Vector3::new(self.x_m, self.y_m, self.z_m)
    }

    pub fn from_vector(v: Vector3<f64>) -> Self {
        Self::new(v.x, v.y, v.z)
    }

    pub fn distance(&self, other: &VehicleVector) -> f64 {
        (self.to_vector() - other.to_vector()).norm()
    }
}

impl std::ops::Sub for VehicleVector {
    type Output = VehicleVector;

    fn sub(self, rhs: Self) -> Self {
        VehicleVector::new(self.x_m - rhs.x_m, self.y_m - rhs.y_m, self.z_m - rhs.z_m)
    }
}

impl std::ops::Add for VehicleVector {
    type Output = VehicleVector;

    fn add(self, rhs: Self) -> Self {
        VehicleVector::new(self.x_m + rhs.x_m, self.y_m + rhs.y_m, self.z_m + rhs.z_m)
    }
}

/// Position of `target` in the ENU tangent plane anchored at `reference`.
pub fn geodetic_to_enu(target: &GeoPoint, reference: &GeoPoint) -> Result<EnuVector, GeoError> {
    target.validate()?;
    reference.validate()?;
    let d = target.to_ecef() - reference.to_ecef();
    let enu = enu_basis(reference.lat_deg.to_radians(), reference.lon_deg.to_radians()) * d;
    Ok(EnuVector::new(enu.x, enu.y, enu.z))
}

/// Rotates an ENU offset into the vehicle body frame given the vehicle heading.
///
/// `heading_deg` is the compass heading of the vehicle's forward axis, clockwise
/// from north. Body pitch and roll are taken as zero (flat road).
pub fn enu_to_vehicle(enu: EnuVector, heading_deg: f64) -> VehicleVector {
    let (s, c) = heading_deg.to_radians().sin_cos();
    VehicleVector::new(
        enu.east_m * s + enu.north_m * c,
        -enu.east_m * c + enu.north_m * s,
        enu.up_m,
    )
}

/// Inverse of [`enu_to_vehicle`].
pub fn vehicle_to_enu(v: VehicleVector, heading_deg: f64) -> EnuVector {
    let (s, c) = heading_deg.to_radians().sin_cos();
    EnuVector::new(v.x_m * s - v.y_m * c, v.x_m * c + v.y_m * s, v.z_m)
}

/// Position of a geodetic point in the vehicle frame.
///
/// The vehicle fix altitude is taken as the road surface beneath the antenna, so a
/// crack lying on the road at the same ellipsoidal height comes out at z = 0.
pub fn geo_to_vehicle(
    point: &GeoPoint,
    vehicle_fix: &GeoPoint,
    heading_deg: f64,
) -> Result<VehicleVector, GeoError> {
    Ok(enu_to_vehicle(
        geodetic_to_enu(point, vehicle_fix)?,
        heading_deg,
    ))
}

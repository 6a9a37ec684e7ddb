//! crackscan: infrastructure-guided road crack localization and length estimation.
//!
//! A roadside unit (RSU) sends a crack's GPS position to a passing vehicle. The
//! vehicle projects that position into its front camera, crops a fixed-size window
//! around it, segments the crack inside the window, reconstructs the mask on the
//! road plane and reports the crack length back to the RSU.
//!
//! Modules, bottom-up:
//!
//! - [`geo`], [`camera`]: WGS84/ENU/vehicle frames and the pinhole model.
//! - [`crop`]: cropping window, resolution gate and best-frame selection.
//! - [`calibration`]: mounting-angle search against checkerboard boxes.
//! - [`crack`]: black-hat detector, ground reconstruction, edge corners, length.
//! - [`metrics`]: ODS/OIS/AP, training losses, density-aware augmentation plan.
//! - [`protocol`]: RSU/OBU state machines, wire codec and a lossy-channel simulator.
//! - [`pipeline`]: frame sync and the Stage II/III drivers used by the CLI.
//! - [`synth`]: forward renderer for synthetic scenes.

pub mod calibration;
pub mod camera;
pub mod crack;
pub mod crop;
pub mod geo;
pub mod metrics;
pub mod pipeline;
pub mod protocol;
pub mod synth;

pub use camera::{
    back_project_ground, project_pinhole, rotation_zyx, vehicle_to_camera, CameraIntrinsics,
    CameraModel, CameraVector, ExtrinsicAngles, PixelPoint, RotationOrder,
};
pub use crop::{compute_crop_window, CropWindow};
pub use geo::{geodetic_to_enu, EnuVector, GeoPoint, VehicleVector};

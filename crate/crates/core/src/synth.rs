//! Forward renderer for synthetic scenes.
//!
//! Everything here only projects world points into pixels; nothing calls the
//! back-projection path, so rendered scenes can serve as ground truth for it.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::calibration::{BoundingBox, CalibrationSample};
use crate::camera::{CameraModel, PixelPoint};
use crate::crack::{BinaryMask, GrayImage};
use crate::crop::CropWindow;
use crate::crop::FrameRecord;
use crate::geo::{enu_to_vehicle, geodetic_to_enu, vehicle_to_enu, EnuVector, GeoError, GeoPoint, VehicleVector};
use crate::pipeline::{CrackTask, PipelineError, SessionLog};

/// A straight crack painted on the road.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundCrack {
    pub center: GeoPoint,
    pub length_m: f64,
    /// Compass bearing of the crack axis.
    pub bearing_deg: f64,
    pub width_m: f64,
}

impl GroundCrack {
    fn axes(&self) -> (EnuVector, EnuVector) {
        let b = self.bearing_deg.to_radians();
        (
            EnuVector::new(b.sin(), b.cos(), 0.0),
            EnuVector::new(b.cos(), -b.sin(), 0.0),
        )
    }

    /// Endpoints as ENU offsets from the center.
    pub fn endpoints_enu(&self) -> (EnuVector, EnuVector) {
        let (d, _) = self.axes();
        let h = self.length_m / 2.0;
        (
            EnuVector::new(-h * d.east_m, -h * d.north_m, 0.0),
            EnuVector::new(h * d.east_m, h * d.north_m, 0.0),
        )
    }

    /// Dense ENU samples over the crack surface, relative to the center.
    pub fn samples(&self, step_m: f64) -> Vec<EnuVector> {
        let (d, n) = self.axes();
        let along = (self.length_m / step_m).ceil().max(1.0) as usize;
        let across = (self.width_m / step_m).ceil() as usize;
        let mut out = Vec::with_capacity((along + 1) * (across + 1));
        for i in 0..=along {
            let s = -self.length_m / 2.0 + self.length_m * i as f64 / along as f64;
            for j in 0..=across {
                let w = if across == 0 {
                    0.0
                } else {
                    -self.width_m / 2.0 + self.width_m * j as f64 / across as f64
                };
                out.push(EnuVector::new(
                    s * d.east_m + w * n.east_m,
                    s * d.north_m + w * n.north_m,
                    0.0,
                ));
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RenderStyle {
    pub background: u8,
    pub crack: u8,
    /// Uniform texture noise amplitude added to the background.
    pub noise: u8,
    pub seed: u64,
    /// Sampling pitch on the road surface.
    pub step_m: f64,
}

impl Default for RenderStyle {
    fn default() -> Self {
        Self {
            background: 160,
            crack: 40,
            noise: 12,
            seed: 0,
            step_m: 0.001,
        }
    }
}

/// Background texture with the given mean and uniform noise.
pub fn textured_background(w: u32, h: u32, style: &RenderStyle) -> GrayImage {
    let mut rng = ChaCha8Rng::seed_from_u64(style.seed);
    let n = style.noise as i32;
    let pixels = (0..w as usize * h as usize)
        .map(|_| {
            let jitter = if n > 0 { rng.random_range(-n..=n) } else { 0 };
            (style.background as i32 + jitter).clamp(0, 255) as u8
        })
        .collect();
    GrayImage::new(w, h, pixels).expect("sized buffer")
}

/// Renders `crack` as seen from a vehicle at `fix` facing `heading_deg`.
///
/// Returns the image and the full-frame truth mask (every pixel hit by a crack sample).
pub fn render_crack_frame(
    model: &CameraModel,
    fix: &GeoPoint,
    heading_deg: f64,
    crack: &GroundCrack,
    style: &RenderStyle,
) -> Result<(GrayImage, BinaryMask), GeoError> {
    let intr = &model.intrinsics;
    let mut img = textured_background(intr.i_w, intr.i_h, style);
    let mut truth = BinaryMask::empty(intr.i_w, intr.i_h);
    let c = geodetic_to_enu(&crack.center, fix)?;
    for s in crack.samples(style.step_m) {
        let enu = EnuVector::new(c.east_m + s.east_m, c.north_m + s.north_m, c.up_m + s.up_m);
        let p = enu_to_vehicle(enu, heading_deg);
        let Ok(px) = model.project_vehicle_point(p) else {
            continue;
        };
        if let Some((col, row)) = pixel_index(px, intr.i_w, intr.i_h) {
            img.set(col, row, style.crack);
            truth.set(col, row, true);
        }
    }
    Ok((img, truth))
}

fn pixel_index(px: PixelPoint, w: u32, h: u32) -> Option<(u32, u32)> {
    let (u, v) = (px.u.round(), px.v.round());
    (u >= 0.0 && v >= 0.0 && u < w as f64 && v < h as f64).then_some((u as u32, v as u32))
}

/// Draws a dark line of the given pixel thickness; returns the pixels it covered.
pub fn draw_line(img: &mut GrayImage, a: (f64, f64), b: (f64, f64), thickness: f64, value: u8) -> Vec<(u32, u32)> {
    let len = (b.0 - a.0).hypot(b.1 - a.1);
    let steps = (len * 2.0).ceil().max(1.0) as usize;
    let r = thickness / 2.0;
    let mut hit = Vec::new();
    for i in 0..=steps {
        let t = i as f64 / steps as f64;
        let (x, y) = (a.0 + t * (b.0 - a.0), a.1 + t * (b.1 - a.1));
        let (x0, x1) = ((x - r).round() as i64, (x + r).round() as i64);
        let (y0, y1) = ((y - r).round() as i64, (y + r).round() as i64);
        for row in y0..=y1 {
            for col in x0..=x1 {
                if col < 0 || row < 0 || col >= img.width as i64 || row >= img.height as i64 {
                    continue;
                }
                let (c, r_) = (col as u32, row as u32);
                if img.get(c, r_) != value {
                    img.set(c, r_, value);
                    hit.push((c, r_));
                }
            }
        }
    }
    hit
}

/// Image with one crack inside `roi` and dark clutter strokes strictly outside it.
#[derive(Debug, Clone)]
pub struct ClutterScene {
    pub image: GrayImage,
    /// Full-frame crack truth.
    pub truth: BinaryMask,
    pub roi: CropWindow,
}

pub fn clutter_scene(w: u32, h: u32, roi: CropWindow, clutter_strokes: usize, seed: u64) -> ClutterScene {
    let style = RenderStyle {
        seed,
        ..RenderStyle::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut image = textured_background(w, h, &style);
    let mut truth = BinaryMask::empty(w, h);

    // Crack: a jagged polyline across the middle of the ROI, kept 8 px from its border.
    let margin = 8.0;
    let (u0, v0) = (roi.u_min as f64 + margin, roi.v_min as f64 + margin);
    let (u1, v1) = (roi.u_max as f64 - margin, roi.v_max as f64 - margin);
    let mut prev = (u0 + rng.random_range(0.0..0.2) * (u1 - u0), rng.random_range(v0..v1));
    for k in 1..=6 {
        let next = (
            u0 + (u1 - u0) * (0.1 + 0.8 * k as f64 / 6.0),
            (prev.1 + rng.random_range(-40.0..40.0)).clamp(v0, v1),
        );
        for (c, r) in draw_line(&mut image, prev, next, 2.0, style.crack) {
            truth.set(c, r, true);
        }
        prev = next;
    }

    // Clutter: tar seams and shadows, only where the ROI (plus margin) is not.
    let inside = |x: f64, y: f64| {
        x >= roi.u_min as f64 - margin
            && x <= roi.u_max as f64 + margin
            && y >= roi.v_min as f64 - margin
            && y <= roi.v_max as f64 + margin
    };
    let mut placed = 0;
    while placed < clutter_strokes {
        let a = (rng.random_range(0.0..w as f64), rng.random_range(0.0..h as f64));
        let ang: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        let len = rng.random_range(40.0..200.0);
        let b = (a.0 + len * ang.cos(), a.1 + len * ang.sin());
        // Reject strokes whose thick band could touch the ROI.
        let touches = (0..=20).any(|i| {
            let t = i as f64 / 20.0;
            inside(a.0 + t * (b.0 - a.0), a.1 + t * (b.1 - a.1))
        });
        if touches {
            continue;
        }
        draw_line(&mut image, a, b, 3.0, 30);
        placed += 1;
    }
    ClutterScene { image, truth, roi }
}

/// Bounding box of a square ground target of side `side_m` as seen by `model`.
pub fn target_box(
    model: &CameraModel,
    fix: &GeoPoint,
    heading_deg: f64,
    target: &GeoPoint,
    side_m: f64,
) -> Option<BoundingBox> {
    let c = geodetic_to_enu(target, fix).ok()?;
    let h = side_m / 2.0;
    let mut lo = (f64::INFINITY, f64::INFINITY);
    let mut hi = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for (de, dn) in [(-h, -h), (h, -h), (h, h), (-h, h)] {
        let p = enu_to_vehicle(EnuVector::new(c.east_m + de, c.north_m + dn, c.up_m), heading_deg);
        let px = model.project_vehicle_point(p).ok()?;
        lo = (lo.0.min(px.u), lo.1.min(px.v));
        hi = (hi.0.max(px.u), hi.1.max(px.v));
    }
    Some(BoundingBox::new(
        (lo.0 + hi.0) / 2.0,
        (lo.1 + hi.1) / 2.0,
        hi.0 - lo.0,
        hi.1 - lo.1,
    ))
}

/// Checkerboard observations for calibration: `n` targets laid out ahead of a vehicle,
/// boxed under the true `model`.
///
/// Target bearings are stratified across the field of view, as when a rig is set up to
/// cover the whole sensor; rotation about the optical axis is unobservable from targets
/// bunched near the image center. Targets are redrawn if their box leaves the image or
/// if their crop would be clamped by the border, since a clamped crop cannot center
/// on the target even at the true angles.
pub fn calibration_scene(
    model: &CameraModel,
    origin: &GeoPoint,
    n: usize,
    crop_size: u32,
    seed: u64,
) -> Vec<CalibrationSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let intr = &model.intrinsics;
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let heading = rng.random_range(0.0..360.0);
        let fix = origin.offset_by(EnuVector::new(rng.random_range(-50.0..50.0), rng.random_range(-50.0..50.0), 0.0));
        let forward = rng.random_range(4.0..16.0);
        let half = crop_size as f64 / 2.0;
        let half_fov = (intr.cx - half).min(intr.i_w as f64 - intr.cx - half) / intr.fx;
        let k = out.len() as f64;
        let lo = -0.95 * half_fov + 1.9 * half_fov * k / n as f64;
        let slope = rng.random_range(lo..lo + 1.9 * half_fov / n as f64);
        let lateral = -forward * slope;
        let enu = vehicle_to_enu(VehicleVector::new(forward, lateral, 0.0), heading);
        let target = fix.offset_by(enu);
        let Some(b) = target_box(model, &fix, heading, &target, 0.6) else {
            continue;
        };
        let inside = b.center_u - b.width / 2.0 >= 0.0
            && b.center_v - b.height / 2.0 >= 0.0
            && b.center_u + b.width / 2.0 <= intr.i_w as f64
            && b.center_v + b.height / 2.0 <= intr.i_h as f64;
        let unclamped = b.center_u >= half
            && b.center_v >= half
            && b.center_u <= intr.i_w as f64 - half
            && b.center_v <= intr.i_h as f64 - half;
        if !(inside && unclamped) {
            continue;
        }
        out.push(CalibrationSample {
            image_id: format!("s{:03}", out.len()),
            vehicle_fix: fix,
            heading_deg: heading,
            target_fix: target,
            gt_box: b,
        });
    }
    out
}

/// Writes a session in which the vehicle drives straight at `crack` along its
/// heading, one frame per entry of `lens_distances_m` (crack distance ahead of the lens).
pub fn approach_session(
    dir: &Path,
    model: &CameraModel,
    crack: &GroundCrack,
    heading_deg: f64,
    lens_distances_m: &[f64],
    style: &RenderStyle,
) -> Result<SessionLog, PipelineError> {
    std::fs::create_dir_all(dir).map_err(|source| PipelineError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let mut frames = Vec::with_capacity(lens_distances_m.len());
    for (k, &d) in lens_distances_m.iter().enumerate() {
        let back = vehicle_to_enu(VehicleVector::new(-(d + model.t_vc.x_m), 0.0, 0.0), heading_deg);
        let fix = crack.center.offset_by(back);
        let frame_style = RenderStyle {
            seed: style.seed.wrapping_add(k as u64),
            ..*style
        };
        let (img, _) = render_crack_frame(model, &fix, heading_deg, crack, &frame_style)?;
        let frame_id = format!("f{k:03}");
        let image_path = PathBuf::from(format!("{frame_id}.png"));
        img.save(dir.join(&image_path))?;
        frames.push(FrameRecord {
            frame_id,
            timestamp: k as f64 * 0.1,
            vehicle_fix: fix,
            heading_deg,
            image_path,
            crack_distance_m: Some(d),
            pixels_per_meter: None,
        });
    }
    let log = SessionLog {
        dir: dir.to_path_buf(),
        model: model.clone(),
        crack: CrackTask {
            crack_id: 1,
            location: crack.center,
            roi_w: crate::crop::DEFAULT_CROP_SIZE,
            roi_h: crate::crop::DEFAULT_CROP_SIZE,
        },
        frames,
    };
    log.save()?;
    Ok(log)
}

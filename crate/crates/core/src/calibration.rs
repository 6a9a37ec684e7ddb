//! Mounting-angle calibration from a checkerboard with a surveyed center.
//!
//! For a candidate angle triple every sample's target position is projected into the
//! image and a square crop is placed around it. The crop is scored against the
//! detected checkerboard box by two terms:
//!
//! - OoG, the fraction of the box area that falls inside the crop;
//! - AoT, how close the box center sits to the crop center, measured along the ray
//!   from the crop center through the box center and normalized by the half-diagonal.
//!
//! The search maximizes the sum of `OoG + AoT` over all samples on a fixed angle grid.

use std::cmp::Ordering;
use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::camera::{project_pinhole, vehicle_to_camera, CameraModel, ExtrinsicAngles, PixelPoint};
use crate::crop::{compute_crop_window, CropError, CropWindow};
use crate::geo::{geo_to_vehicle, GeoError, GeoPoint};

pub const DEFAULT_BOUNDARY_EPS: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CalibrationError {
    #[error("ground-truth box has zero area")]
    DegenerateBox,
    #[error("alignment score needs a square crop, got {0}x{1}")]
    NonSquareCrop(u32, u32),
    #[error("no calibration samples")]
    NoSamples,
    #[error("invalid search: {0}")]
    InvalidSearch(String),
    #[error("every sample violates the alignment constraints at every grid point")]
    Infeasible,
    #[error(transparent)]
    Crop(#[from] CropError),
    #[error(transparent)]
    Geo(#[from] GeoError),
}

/// Axis-aligned pixel box given by its center and size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub center_u: f64,
    pub center_v: f64,
    pub width: f64,
    pub height: f64,
}

impl BoundingBox {
    pub fn new(center_u: f64, center_v: f64, width: f64, height: f64) -> Self {
        Self {
            center_u,
            center_v,
            width,
            height,
        }
    }

    pub fn center(&self) -> PixelPoint {
        PixelPoint::new(self.center_u, self.center_v)
    }

    pub fn area(&self) -> f64 {
        self.width * self.height
    }

    fn span_u(&self) -> (f64, f64) {
        (self.center_u - self.width / 2.0, self.center_u + self.width / 2.0)
    }

    fn span_v(&self) -> (f64, f64) {
        (self.center_v - self.height / 2.0, self.center_v + self.height / 2.0)
    }
}

fn overlap(a: (f64, f64), b: (f64, f64)) -> f64 {
    (a.1.min(b.1) - a.0.max(b.0)).max(0.0)
}

/// Fraction of the ground-truth box area covered by the crop.
pub fn oog(crop: &CropWindow, gt: &BoundingBox) -> Result<f64, CalibrationError> {
    let area = gt.area();
    if !(area > 0.0) {
        return Err(CalibrationError::DegenerateBox);
    }
    let iu = overlap((crop.u_min as f64, crop.u_max as f64), gt.span_u());
    let iv = overlap((crop.v_min as f64, crop.v_max as f64), gt.span_v());
    Ok((iu * iv / area).clamp(0.0, 1.0))
}

/// Where the ray from the crop center through the box center leaves the crop.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundaryPixel {
    pub x: f64,
    pub y: f64,
    /// Distance from the boundary pixel to the crop center.
    pub d_crop: f64,
    /// Distance from the boundary pixel to the box center.
    pub d_gt: f64,
    /// Gap between the inscribed half-width and `d_crop` (zero or negative).
    pub offset: f64,
}

/// Boundary pixel of a square crop of side `l_crop` along the line joining the centers.
///
/// `eps` only guards the slope division. Coincident centers have no direction, so
/// the diagonal `(eps, eps)` is used and the boundary pixel lands on a corner.
pub fn boundary_pixel(crop_center: PixelPoint, gt_center: PixelPoint, l_crop: f64, eps: f64) -> BoundaryPixel {
    let mut dx = gt_center.u - crop_center.u;
    let mut dy = gt_center.v - crop_center.v;
    if dx.abs() < eps && dy.abs() < eps {
        dx = if dx < 0.0 { -eps } else { eps };
        dy = if dy < 0.0 { -eps } else { eps };
    }
    let half = l_crop / 2.0;
    let s = (half / dx.abs().max(eps)).min(half / dy.abs().max(eps));
    let x = crop_center.u + s * dx;
    let y = crop_center.v + s * dy;
    let d_crop = (x - crop_center.u).hypot(y - crop_center.v);
    let d_gt = (x - gt_center.u).hypot(y - gt_center.v);
    BoundaryPixel {
        x,
        y,
        d_crop,
        d_gt,
        offset: half - d_crop,
    }
}

/// Alignment score, `(d_gt + offset) / R` with `R` the crop half-diagonal.
///
/// Peaks at `1/sqrt(2)` when the centers coincide and reaches 0 at an edge midpoint.
pub fn aot(crop: &CropWindow, gt: &BoundingBox) -> Result<f64, CalibrationError> {
    aot_with_eps(crop, gt, DEFAULT_BOUNDARY_EPS)
}

pub fn aot_with_eps(crop: &CropWindow, gt: &BoundingBox, eps: f64) -> Result<f64, CalibrationError> {
    if crop.b_w != crop.b_h {
        return Err(CalibrationError::NonSquareCrop(crop.b_w, crop.b_h));
    }
    let l = crop.b_w as f64;
    let b = boundary_pixel(crop.center(), gt.center(), l, eps);
    let radius = l * std::f64::consts::SQRT_2 / 2.0;
    Ok((b.d_gt + b.offset) / radius)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlignmentScore {
    pub oog: f64,
    pub aot: f64,
    pub total: f64,
}

/// Score of one crop against one box, or `None` when the box center lies more than
/// half a crop away from the crop center on either axis.
pub fn alignment_score(crop: &CropWindow, gt: &BoundingBox) -> Result<Option<AlignmentScore>, CalibrationError> {
    let c = crop.center();
    let half_u = crop.b_w as f64 / 2.0;
    let half_v = crop.b_h as f64 / 2.0;
    if (gt.center_u - c.u).abs() > half_u || (gt.center_v - c.v).abs() > half_v {
        return Ok(None);
    }
    let o = oog(crop, gt)?;
    let a = aot(crop, gt)?;
    Ok(Some(AlignmentScore {
        oog: o,
        aot: a,
        total: o + a,
    }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationSample {
    pub image_id: String,
    pub vehicle_fix: GeoPoint,
    pub heading_deg: f64,
    /// Surveyed checkerboard center.
    pub target_fix: GeoPoint,
    pub gt_box: BoundingBox,
}

/// Inclusive angle range on a grid `min, min + step, ..` up to `max`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AngleRange {
    pub min_deg: f64,
    pub max_deg: f64,
}

impl AngleRange {
    pub fn symmetric(half_width_deg: f64) -> Self {
        Self {
            min_deg: -half_width_deg,
            max_deg: half_width_deg,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    pub yaw: AngleRange,
    pub pitch: AngleRange,
    pub roll: AngleRange,
    pub step_deg: f64,
    /// Crop side used during calibration.
    pub crop_size: u32,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            yaw: AngleRange::symmetric(10.0),
            pitch: AngleRange::symmetric(10.0),
            roll: AngleRange::symmetric(10.0),
            step_deg: 1.0,
            crop_size: crate::crop::DEFAULT_CROP_SIZE,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleScore {
    pub image_id: String,
    /// `None` if the sample violated the constraints or the target was behind the camera.
    pub score: Option<AlignmentScore>,
    pub crop: Option<CropWindow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub angles: ExtrinsicAngles,
    pub objective: f64,
    pub evaluations: usize,
    pub samples: Vec<SampleScore>,
}

/// Lattice index of each angle on the search grid.
type GridPoint = [i64; 3];

struct Grid {
    min: [f64; 3],
    count: [i64; 3],
    step: f64,
}

impl Grid {
    fn new(cfg: &SearchConfig) -> Result<Self, CalibrationError> {
        if !(cfg.step_deg > 0.0 && cfg.step_deg.is_finite()) {
            return Err(CalibrationError::InvalidSearch(format!("step {} must be positive", cfg.step_deg)));
        }
        let mut min = [0.0; 3];
        let mut count = [0; 3];
        for (i, r) in [cfg.yaw, cfg.pitch, cfg.roll].iter().enumerate() {
            if !(r.max_deg >= r.min_deg) || r.min_deg < -180.0 || r.max_deg >= 180.0 {
                return Err(CalibrationError::InvalidSearch(format!(
                    "range [{}, {}] must be ordered and inside [-180, 180)",
                    r.min_deg, r.max_deg
                )));
            }
            min[i] = r.min_deg;
            count[i] = ((r.max_deg - r.min_deg) / cfg.step_deg + 1e-9).floor() as i64 + 1;
        }
        Ok(Self {
            min,
            count,
            step: cfg.step_deg,
        })
    }

    fn angles(&self, p: GridPoint) -> ExtrinsicAngles {
        let a = |i: usize| self.min[i] + p[i] as f64 * self.step;
        ExtrinsicAngles::new(a(0), a(1), a(2))
    }

    fn nearest(&self, deg: f64, axis: usize) -> i64 {
        (((deg - self.min[axis]) / self.step).round() as i64).clamp(0, self.count[axis] - 1)
    }
}

/// Precomputed per-sample geometry: the target position relative to the lens.
struct Prepared<'a> {
    sample: &'a CalibrationSample,
    p_rel: crate::geo::VehicleVector,
}

struct Objective<'a> {
    samples: Vec<Prepared<'a>>,
    template: &'a CameraModel,
    crop_size: u32,
    cache: HashMap<GridPoint, f64>,
    grid: Grid,
}

impl<'a> Objective<'a> {
    fn score_samples(&self, angles: ExtrinsicAngles) -> Result<Vec<SampleScore>, CalibrationError> {
        let model = self.template.with_angles(angles);
        let k = &model.intrinsics;
        self.samples
            .iter()
            .map(|s| {
                let Ok(px) = project_pinhole(vehicle_to_camera(s.p_rel, &model), k) else {
                    return Ok(SampleScore {
                        image_id: s.sample.image_id.clone(),
                        score: None,
                        crop: None,
                    });
                };
                let crop = compute_crop_window(px, self.crop_size, self.crop_size, k.i_w, k.i_h)?;
                Ok(SampleScore {
                    image_id: s.sample.image_id.clone(),
                    score: alignment_score(&crop, &s.sample.gt_box)?,
                    crop: Some(crop),
                })
            })
            .collect()
    }

    fn value(&mut self, p: GridPoint) -> Result<f64, CalibrationError> {
        if let Some(v) = self.cache.get(&p) {
            return Ok(*v);
        }
        let total = self
            .score_samples(self.grid.angles(p))?
            .iter()
            .filter_map(|s| s.score.map(|a| a.total))
            .sum();
        self.cache.insert(p, total);
        Ok(total)
    }

    /// True if `a` beats `b`: higher objective, then smaller total rotation, then
    /// lexicographically smaller angles.
    fn better(&mut self, a: GridPoint, b: GridPoint) -> Result<bool, CalibrationError> {
        let (va, vb) = (self.value(a)?, self.value(b)?);
        Ok(match va.total_cmp(&vb) {
            Ordering::Greater => true,
            Ordering::Less => false,
            Ordering::Equal => {
                let (aa, ab) = (self.grid.angles(a), self.grid.angles(b));
                match aa.l1().total_cmp(&ab.l1()) {
                    Ordering::Less => true,
                    Ordering::Greater => false,
                    Ordering::Equal => a < b,
                }
            }
        })
    }

    fn best_of(&mut self, points: impl IntoIterator<Item = GridPoint>) -> Result<Option<GridPoint>, CalibrationError> {
        let mut best: Option<GridPoint> = None;
        for p in points {
            best = match best {
                Some(b) if !self.better(p, b)? => Some(b),
                _ => Some(p),
            };
        }
        Ok(best)
    }

    /// Interval halving along one axis with the other two held fixed.
    ///
    /// The bracket shrinks to the half whose quarter point scores higher; on a tie
    /// the middle half is kept. Stops once the bracket spans at most two grid steps.
    fn halve_axis(&mut self, mut current: GridPoint, axis: usize, mut lo: i64, mut hi: i64) -> Result<GridPoint, CalibrationError> {
        while hi - lo > 2 {
            let q1 = lo + (hi - lo) / 4;
            let q3 = hi - (hi - lo) / 4;
            let mut p1 = current;
            p1[axis] = q1;
            let mut p3 = current;
            p3[axis] = q3;
            let (v1, v3) = (self.value(p1)?, self.value(p3)?);
            let mid = lo + (hi - lo) / 2;
            match v1.total_cmp(&v3) {
                Ordering::Greater => hi = mid,
                Ordering::Less => lo = mid,
                Ordering::Equal => {
                    lo = q1;
                    hi = q3;
                }
            }
        }
        let candidates: Vec<GridPoint> = (lo..=hi)
            .map(|i| {
                let mut p = current;
                p[axis] = i;
                p
            })
            .collect();
        if let Some(b) = self.best_of(candidates)? {
            current = b;
        }
        Ok(current)
    }

    /// Exhaustive search over the box `center +- radius`, clipped to the grid.
    fn refine(&mut self, center: GridPoint, radius: i64) -> Result<GridPoint, CalibrationError> {
        let lo: Vec<i64> = (0..3).map(|i| (center[i] - radius).max(0)).collect();
        let hi: Vec<i64> = (0..3).map(|i| (center[i] + radius).min(self.grid.count[i] - 1)).collect();
        let mut points = Vec::new();
        for a in lo[0]..=hi[0] {
            for b in lo[1]..=hi[1] {
                for c in lo[2]..=hi[2] {
                    points.push([a, b, c]);
                }
            }
        }
        Ok(self.best_of(points)?.unwrap_or(center))
    }

    fn all_points(&self) -> Vec<GridPoint> {
        let n = self.grid.count;
        let mut points = Vec::with_capacity((n[0] * n[1] * n[2]) as usize);
        for a in 0..n[0] {
            for b in 0..n[1] {
                for c in 0..n[2] {
                    points.push([a, b, c]);
                }
            }
        }
        points
    }
}

/// Search radius, in grid steps, of the exhaustive refinement around the coarse optimum.
const REFINE_RADIUS: i64 = 2;
const MAX_REFINE_ROUNDS: usize = 32;

/// Mounting angles maximizing the summed `OoG + AoT` over `samples`.
///
/// Two passes of per-axis interval halving locate the peak coarsely; an exhaustive
/// grid scan around it then settles the answer, re-centering while the best point
/// sits on the edge of the scanned box. Returned angles always lie on the grid.
pub fn calibrate_extrinsics(
    samples: &[CalibrationSample],
    model_template: &CameraModel,
    search: &SearchConfig,
) -> Result<CalibrationReport, CalibrationError> {
    if samples.is_empty() {
        return Err(CalibrationError::NoSamples);
    }
    let grid = Grid::new(search)?;
    let prepared = samples
        .iter()
        .map(|s| {
            let p_v = geo_to_vehicle(&s.target_fix, &s.vehicle_fix, s.heading_deg)?;
            Ok(Prepared {
                sample: s,
                p_rel: p_v - model_template.t_vc,
            })
        })
        .collect::<Result<Vec<_>, GeoError>>()?;
    let mut obj = Objective {
        samples: prepared,
        template: model_template,
        crop_size: search.crop_size,
        cache: HashMap::new(),
        grid,
    };

    let start = [
        obj.grid.nearest(0.0, 0),
        obj.grid.nearest(0.0, 1),
        obj.grid.nearest(0.0, 2),
    ];
    let mut current = start;
    for _pass in 0..2 {
        for axis in 0..3 {
            current = obj.halve_axis(current, axis, 0, obj.grid.count[axis] - 1)?;
        }
    }
    for _ in 0..MAX_REFINE_ROUNDS {
        let next = obj.refine(current, REFINE_RADIUS)?;
        if next == current {
            break;
        }
        current = next;
    }

    if obj.value(current)? <= 0.0 {
        // The coarse search can stall on a zero plateau; confirm over the full grid.
        let all = obj.all_points();
        current = obj.best_of(all)?.expect("grid is non-empty");
        if obj.value(current)? <= 0.0 {
            return Err(CalibrationError::Infeasible);
        }
    }

    let angles = obj.grid.angles(current);
    Ok(CalibrationReport {
        angles,
        objective: obj.value(current)?,
        evaluations: obj.cache.len(),
        samples: obj.score_samples(angles)?,
    })
}

/// Summed objective at arbitrary angles; used for reporting and grid sweeps.
pub fn objective_at(
    samples: &[CalibrationSample],
    model_template: &CameraModel,
    angles: ExtrinsicAngles,
    crop_size: u32,
) -> Result<f64, CalibrationError> {
    let model = model_template.with_angles(angles);
    let k = &model.intrinsics;
    let mut total = 0.0;
    for s in samples {
        let p_rel = geo_to_vehicle(&s.target_fix, &s.vehicle_fix, s.heading_deg)? - model.t_vc;
        let Ok(px) = project_pinhole(vehicle_to_camera(p_rel, &model), k) else {
            continue;
        };
        let crop = compute_crop_window(px, crop_size, crop_size, k.i_w, k.i_h)?;
        if let Some(score) = alignment_score(&crop, &s.gt_box)? {
            total += score.total;
        }
    }
    Ok(total)
}

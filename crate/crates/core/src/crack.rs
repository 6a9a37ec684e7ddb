//! Crack masks, their reconstruction on the road plane, and length estimation.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::camera::{back_project_ground, CameraError, CameraModel, PixelPoint};
use crate::crop::CropWindow;
use crate::geo::VehicleVector;

#[derive(Debug, Error)]
pub enum CrackError {
    #[error("kernel size {0} must be odd and at least 3")]
    BadKernel(u32),
    #[error("kernel {kernel} larger than image {width}x{height}")]
    KernelTooLarge { kernel: u32, width: u32, height: u32 },
    #[error("no crack points")]
    EmptyPoints,
    #[error("need corners in quadrants 2 and 4, corr = {corr:?}")]
    InsufficientExtent { corr: [u8; 4] },
    #[error("buffer of {len} values does not match {width}x{height}")]
    SizeMismatch { len: usize, width: u32, height: u32 },
    #[error("crop {0:?} exceeds the image")]
    CropOutOfBounds(CropWindow),
    #[error("image io: {0}")]
    Image(#[from] image::ImageError),
}

/// 8-bit grayscale raster, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    pub width: u32,
    pub height: u32,
    pub pixels: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: u32, height: u32, pixels: Vec<u8>) -> Result<Self, CrackError> {
        if pixels.len() != width as usize * height as usize {
            return Err(CrackError::SizeMismatch {
                len: pixels.len(),
                width,
                height,
            });
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn filled(width: u32, height: u32, value: u8) -> Self {
        Self {
            width,
            height,
            pixels: vec![value; width as usize * height as usize],
        }
    }

    #[inline]
    pub fn get(&self, col: u32, row: u32) -> u8 {
        self.pixels[row as usize * self.width as usize + col as usize]
    }

    #[inline]
    pub fn set(&mut self, col: u32, row: u32, value: u8) {
        let w = self.width as usize;
        self.pixels[row as usize * w + col as usize] = value;
    }

    pub fn crop(&self, window: &CropWindow) -> Result<GrayImage, CrackError> {
        if !window.is_inside_image(self.width, self.height) {
            return Err(CrackError::CropOutOfBounds(*window));
        }
        let mut out = Vec::with_capacity(window.b_w as usize * window.b_h as usize);
        for row in window.v_min..window.v_max {
            let start = row as usize * self.width as usize + window.u_min as usize;
            out.extend_from_slice(&self.pixels[start..start + window.b_w as usize]);
        }
        GrayImage::new(window.b_w, window.b_h, out)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CrackError> {
        let img = image::open(path)?.into_luma8();
        let (w, h) = img.dimensions();
        GrayImage::new(w, h, img.into_raw())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CrackError> {
        image::GrayImage::from_raw(self.width, self.height, self.pixels.clone())
            .expect("dimensions checked on construction")
            .save(path)?;
        Ok(())
    }
}

/// Per-pixel crack flags for a crop, plus where the crop sits in the full frame.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinaryMask {
    pub width: u32,
    pub height: u32,
    pub bits: Vec<bool>,
    /// `(u_min, v_min)` of the crop in the full frame.
    pub crop_origin: (u32, u32),
}

impl BinaryMask {
    pub fn new(width: u32, height: u32, bits: Vec<bool>, crop_origin: (u32, u32)) -> Result<Self, CrackError> {
        if bits.len() != width as usize * height as usize {
            return Err(CrackError::SizeMismatch {
                len: bits.len(),
                width,
                height,
            });
        }
        Ok(Self {
            width,
            height,
            bits,
            crop_origin,
        })
    }

    pub fn empty(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            bits: vec![false; width as usize * height as usize],
            crop_origin: (0, 0),
        }
    }

    #[inline]
    pub fn get(&self, col: u32, row: u32) -> bool {
        self.bits[row as usize * self.width as usize + col as usize]
    }

    pub fn set(&mut self, col: u32, row: u32, on: bool) {
        let w = self.width as usize;
        self.bits[row as usize * w + col as usize] = on;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    /// Share of set pixels.
    pub fn fraction(&self) -> f64 {
        if self.bits.is_empty() {
            0.0
        } else {
            self.count() as f64 / self.bits.len() as f64
        }
    }

    /// Full-frame pixel coordinates of set bits, row-major.
    pub fn frame_pixels(&self) -> impl Iterator<Item = PixelPoint> + '_ {
        let (u0, v0) = self.crop_origin;
        let w = self.width as usize;
        self.bits.iter().enumerate().filter(|(_, b)| **b).map(move |(i, _)| {
            PixelPoint::new((u0 as usize + i % w) as f64, (v0 as usize + i / w) as f64)
        })
    }

    /// Sub-mask covering `window`, which is given in this mask's own coordinates.
    pub fn crop(&self, window: &CropWindow) -> Result<BinaryMask, CrackError> {
        if !window.is_inside_image(self.width, self.height) {
            return Err(CrackError::CropOutOfBounds(*window));
        }
        let mut bits = Vec::with_capacity(window.b_w as usize * window.b_h as usize);
        for row in window.v_min..window.v_max {
            let start = row as usize * self.width as usize + window.u_min as usize;
            bits.extend_from_slice(&self.bits[start..start + window.b_w as usize]);
        }
        BinaryMask::new(
            window.b_w,
            window.b_h,
            bits,
            (self.crop_origin.0 + window.u_min, self.crop_origin.1 + window.v_min),
        )
    }

    /// Binarizes a grayscale raster: a pixel is crack when `value > threshold * 255`.
    pub fn from_gray(img: &GrayImage, threshold: f64, crop_origin: (u32, u32)) -> Self {
        let cut = threshold * 255.0;
        Self {
            width: img.width,
            height: img.height,
            bits: img.pixels.iter().map(|&p| p as f64 > cut).collect(),
            crop_origin,
        }
    }

    pub fn to_gray(&self) -> GrayImage {
        GrayImage {
            width: self.width,
            height: self.height,
            pixels: self.bits.iter().map(|&b| if b { 255 } else { 0 }).collect(),
        }
    }

    /// Loads a mask image produced by any detector; see [`BinaryMask::from_gray`].
    pub fn load(path: impl AsRef<Path>, threshold: f64, crop_origin: (u32, u32)) -> Result<Self, CrackError> {
        Ok(Self::from_gray(&GrayImage::load(path)?, threshold, crop_origin))
    }
}

/// Default binarization level for probabilistic mask images, as a fraction of full scale.
pub const DEFAULT_MASK_THRESHOLD: f64 = 0.5;

#[derive(Clone, Copy)]
enum Extremum {
    Max,
    Min,
}

/// Square-window max or min filter. Out-of-image neighbors are ignored.
fn rank_filter(img: &GrayImage, kernel: u32, which: Extremum) -> GrayImage {
    let (w, h) = (img.width as usize, img.height as usize);
    let r = (kernel / 2) as usize;
    let pick = |a: u8, b: u8| match which {
        Extremum::Max => a.max(b),
        Extremum::Min => a.min(b),
    };
    let mut rows = vec![0u8; w * h];
    for y in 0..h {
        let line = &img.pixels[y * w..(y + 1) * w];
        for x in 0..w {
            let lo = x.saturating_sub(r);
            let hi = (x + r).min(w - 1);
            rows[y * w + x] = line[lo..=hi].iter().copied().reduce(pick).unwrap();
        }
    }
    let mut out = vec![0u8; w * h];
    for y in 0..h {
        let lo = y.saturating_sub(r);
        let hi = (y + r).min(h - 1);
        for x in 0..w {
            out[y * w + x] = (lo..=hi).map(|yy| rows[yy * w + x]).reduce(pick).unwrap();
        }
    }
    GrayImage {
        width: img.width,
        height: img.height,
        pixels: out,
    }
}

pub fn dilate(img: &GrayImage, kernel: u32) -> GrayImage {
    rank_filter(img, kernel, Extremum::Max)
}

pub fn erode(img: &GrayImage, kernel: u32) -> GrayImage {
    rank_filter(img, kernel, Extremum::Min)
}

/// Grayscale closing (dilation then erosion) with a `kernel x kernel` square.
pub fn close(img: &GrayImage, kernel: u32) -> GrayImage {
    erode(&dilate(img, kernel), kernel)
}

/// Dark-on-bright line detector: `close(img) - img > threshold`.
pub fn blackhat_mask(img: &GrayImage, kernel_size: u32, threshold: u8) -> Result<BinaryMask, CrackError> {
    if kernel_size < 3 || kernel_size % 2 == 0 {
        return Err(CrackError::BadKernel(kernel_size));
    }
    if kernel_size > img.width || kernel_size > img.height {
        return Err(CrackError::KernelTooLarge {
            kernel: kernel_size,
            width: img.width,
            height: img.height,
        });
    }
    let closed = close(img, kernel_size);
    let bits = closed
        .pixels
        .iter()
        .zip(&img.pixels)
        .map(|(&c, &o)| c.saturating_sub(o) > threshold)
        .collect();
    BinaryMask::new(img.width, img.height, bits, (0, 0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundPoints {
    pub points: Vec<VehicleVector>,
    /// Set pixels whose rays miss the road.
    pub skipped: usize,
}

/// Reconstructs every set mask pixel on the road plane, in row-major order.
pub fn mask_to_ground(mask: &BinaryMask, model: &CameraModel) -> GroundPoints {
    let mut points = Vec::new();
    let mut skipped = 0;
    for px in mask.frame_pixels() {
        match back_project_ground(px, model) {
            Ok(p) => points.push(p),
            Err(CameraError::NoGroundIntersection(_)) => skipped += 1,
            Err(_) => skipped += 1,
        }
    }
    GroundPoints { points, skipped }
}

/// Quadrant (1..=4) of an offset from the centroid; `None` for the centroid itself.
///
/// Half-open partition so every other point lands in exactly one quadrant.
pub fn quadrant(dx: f64, dy: f64) -> Option<usize> {
    if dx >= 0.0 && dy > 0.0 {
        Some(1)
    } else if dx < 0.0 && dy >= 0.0 {
        Some(2)
    } else if dx <= 0.0 && dy < 0.0 {
        Some(3)
    } else if dx > 0.0 && dy <= 0.0 {
        Some(4)
    } else {
        None
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrackEdges {
    pub center: VehicleVector,
    /// Farthest point from the center per quadrant, index `q - 1`.
    pub corners: [Option<VehicleVector>; 4],
    /// `corr[q - 1] == 1` iff quadrant `q` holds a corner.
    pub corr: [u8; 4],
}

impl CrackEdges {
    pub fn corner(&self, q: usize) -> Option<VehicleVector> {
        self.corners[q - 1]
    }
}

/// Per-quadrant farthest points around the centroid, on the vehicle x/y plane.
///
/// Equal distances keep the earlier point.
pub fn select_edge_corners(points: &[VehicleVector]) -> Result<CrackEdges, CrackError> {
    if points.is_empty() {
        return Err(CrackError::EmptyPoints);
    }
    let n = points.len() as f64;
    let center = VehicleVector::new(
        points.iter().map(|p| p.x_m).sum::<f64>() / n,
        points.iter().map(|p| p.y_m).sum::<f64>() / n,
        points.iter().map(|p| p.z_m).sum::<f64>() / n,
    );
    let mut best: [Option<(f64, VehicleVector)>; 4] = [None; 4];
    for p in points {
        let Some(q) = quadrant(p.x_m - center.x_m, p.y_m - center.y_m) else {
            continue;
        };
        let d = p.distance(&center);
        match best[q - 1] {
            Some((bd, _)) if d <= bd => {}
            _ => best[q - 1] = Some((d, *p)),
        }
    }
    let corners = best.map(|b| b.map(|(_, p)| p));
    let corr = corners.map(|c| u8::from(c.is_some()));
    Ok(CrackEdges {
        center,
        corners,
        corr,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LengthEstimate {
    pub length_m: f64,
    pub endpoints: (VehicleVector, VehicleVector),
    pub frame_id: String,
}

/// Distance between the quadrant 2 and quadrant 4 corners.
pub fn estimate_length(edges: &CrackEdges, frame_id: &str) -> Result<LengthEstimate, CrackError> {
    match (edges.corner(2), edges.corner(4)) {
        (Some(a), Some(b)) => Ok(LengthEstimate {
            length_m: a.distance(&b),
            endpoints: (a, b),
            frame_id: frame_id.to_string(),
        }),
        _ => Err(CrackError::InsufficientExtent { corr: edges.corr }),
    }
}

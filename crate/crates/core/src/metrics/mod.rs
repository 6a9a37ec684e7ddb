//! Segmentation evaluation: precision/recall/F1 with exact pixel matching, ODS and
//! OIS F1 over a threshold sweep, and average precision.

pub mod augment;
pub mod loss;

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crack::BinaryMask;

pub use augment::{density_augmentation_plan, AugmentationPlan, DensityBands, DensityCategory};
pub use loss::{combined_loss, combined_total_loss, dice_loss, weighted_bce, LogitMap, LossWeights};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("no images")]
    NoImages,
    #[error("empty threshold list")]
    NoThresholds,
    #[error("invalid value: {0}")]
    InvalidValue(String),
    #[error("image io: {0}")]
    Image(#[from] image::ImageError),
}

/// Post-sigmoid crack probabilities, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreMap {
    pub width: u32,
    pub height: u32,
    pub scores: Vec<f64>,
}

impl ScoreMap {
    pub fn new(width: u32, height: u32, scores: Vec<f64>) -> Result<Self, MetricsError> {
        if scores.len() != width as usize * height as usize {
            return Err(MetricsError::ShapeMismatch(format!(
                "{} scores for {width}x{height}",
                scores.len()
            )));
        }
        if let Some(s) = scores.iter().find(|s| !(0.0..=1.0).contains(*s)) {
            return Err(MetricsError::InvalidValue(format!("score {s} outside [0, 1]")));
        }
        Ok(Self {
            width,
            height,
            scores,
        })
    }

    /// Reads an 8- or 16-bit grayscale image, scaled to `[0, 1]`.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, MetricsError> {
        let img = image::open(path)?.into_luma16();
        let (w, h) = img.dimensions();
        let scores = img.into_raw().into_iter().map(|v| v as f64 / 65535.0).collect();
        Self::new(w, h, scores)
    }

    pub fn from_mask(mask: &BinaryMask) -> Self {
        Self {
            width: mask.width,
            height: mask.height,
            scores: mask.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl Confusion {
    pub fn add(self, o: Confusion) -> Confusion {
        Confusion {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
        }
    }

    pub fn prf(&self) -> Prf {
        let ratio = |num: u64, den: u64| if den == 0 { 0.0 } else { num as f64 / den as f64 };
        let precision = ratio(self.tp, self.tp + self.fp);
        let recall = ratio(self.tp, self.tp + self.fn_);
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Prf {
            precision,
            recall,
            f1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn check_shape(pred: &ScoreMap, gt: &BinaryMask) -> Result<(), MetricsError> {
    if pred.width != gt.width || pred.height != gt.height {
        return Err(MetricsError::ShapeMismatch(format!(
            "prediction {}x{} vs ground truth {}x{}",
            pred.width, pred.height, gt.width, gt.height
        )));
    }
    Ok(())
}

fn check_pairs(preds: &[ScoreMap], gts: &[BinaryMask]) -> Result<(), MetricsError> {
    if preds.len() != gts.len() {
        return Err(MetricsError::ShapeMismatch(format!(
            "{} predictions vs {} ground truths",
            preds.len(),
            gts.len()
        )));
    }
    preds.iter().zip(gts).try_for_each(|(p, g)| check_shape(p, g))
}

/// Confusion counts with the prediction binarized at `score > t`.
pub fn confusion(pred: &ScoreMap, gt: &BinaryMask, t: f64) -> Result<Confusion, MetricsError> {
    check_shape(pred, gt)?;
    let mut c = Confusion::default();
    for (&s, &g) in pred.scores.iter().zip(&gt.bits) {
        match (s > t, g) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => {}
        }
    }
    Ok(c)
}

/// Dataset-level precision, recall and F1 with counts pooled over all images.
pub fn prf_at_threshold(preds: &[ScoreMap], gts: &[BinaryMask], t: f64) -> Result<Prf, MetricsError> {
    check_pairs(preds, gts)?;
    let mut total = Confusion::default();
    for (p, g) in preds.iter().zip(gts) {
        total = total.add(confusion(p, g, t)?);
    }
    Ok(total.prf())
}

/// `0.01, 0.02, .., 0.99`.
pub fn default_thresholds() -> Vec<f64> {
    (1..=99).map(|i| i as f64 / 100.0).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsBundle {
    pub ods_f1: f64,
    pub ods_threshold: f64,
    pub ois_f1: f64,
    pub precision_at_ods: f64,
    pub recall_at_ods: f64,
    pub ap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub bundle: MetricsBundle,
    pub sweep: Vec<SweepRow>,
    /// Best F1 of each image over the sweep.
    pub per_image_best_f1: Vec<f64>,
}

/// ODS, OIS and AP over a threshold sweep.
pub fn ods_ois_ap(preds: &[ScoreMap], gts: &[BinaryMask], thresholds: &[f64]) -> Result<MetricsBundle, MetricsError> {
    Ok(evaluate(preds, gts, thresholds)?.bundle)
}

/// Full evaluation, including the sweep table for F1-threshold curves.
///
/// ODS takes the first threshold reaching the best dataset F1. AP integrates the
/// precision envelope (best precision at equal or higher recall) over recall with the
/// trapezoid rule, extending the envelope flat down to recall 0.
pub fn evaluate(preds: &[ScoreMap], gts: &[BinaryMask], thresholds: &[f64]) -> Result<Evaluation, MetricsError> {
    if preds.is_empty() {
        return Err(MetricsError::NoImages);
    }
    if thresholds.is_empty() {
        return Err(MetricsError::NoThresholds);
    }
    check_pairs(preds, gts)?;

    let mut per_image_best = vec![0.0f64; preds.len()];
    let mut sweep = Vec::with_capacity(thresholds.len());
    for &t in thresholds {
        let mut total = Confusion::default();
        for (i, (p, g)) in preds.iter().zip(gts).enumerate() {
            let c = confusion(p, g, t)?;
            per_image_best[i] = per_image_best[i].max(c.prf().f1);
            total = total.add(c);
        }
        let prf = total.prf();
        sweep.push(SweepRow {
            threshold: t,
            precision: prf.precision,
            recall: prf.recall,
            f1: prf.f1,
        });
    }

    let ods = sweep
        .iter()
        .copied()
        .reduce(|best, row| if row.f1 > best.f1 { row } else { best })
        .expect("non-empty sweep");
    let ois = per_image_best.iter().sum::<f64>() / per_image_best.len() as f64;

    Ok(Evaluation {
        bundle: MetricsBundle {
            ods_f1: ods.f1,
            ods_threshold: ods.threshold,
            ois_f1: ois,
            precision_at_ods: ods.precision,
            recall_at_ods: ods.recall,
            ap: average_precision(&sweep),
        },
        sweep,
        per_image_best_f1: per_image_best,
    })
}

/// Area under the monotone precision envelope of a sweep.
pub fn average_precision(sweep: &[SweepRow]) -> f64 {
    let mut pts: Vec<(f64, f64)> = sweep.iter().map(|r| (r.recall, r.precision)).collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    for i in (0..pts.len().saturating_sub(1)).rev() {
        pts[i].1 = pts[i].1.max(pts[i + 1].1);
    }
    let Some(&(_, p0)) = pts.first() else {
        return 0.0;
    };
    let mut area = 0.0;
    let mut prev = (0.0, p0);
    for &(r, p) in &pts {
        area += (r - prev.0) * (p + prev.1) / 2.0;
        prev = (r, p);
    }
    area.clamp(0.0, 1.0)
}

//! Class-weighted BCE, Dice, and their multi-scale combination for crack segmentation.

use serde::{Deserialize, Serialize};

use super::MetricsError;
use crate::crack::BinaryMask;

/// Raw network outputs before the sigmoid, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogitMap {
    pub width: u32,
    pub height: u32,
    pub logits: Vec<f64>,
}

impl LogitMap {
    pub fn new(width: u32, height: u32, logits: Vec<f64>) -> Result<Self, MetricsError> {
        if logits.len() != width as usize * height as usize {
            return Err(MetricsError::ShapeMismatch(format!(
                "{} logits for {width}x{height}",
                logits.len()
            )));
        }
        if logits.iter().any(|l| !l.is_finite()) {
            return Err(MetricsError::InvalidValue("non-finite logit".into()));
        }
        Ok(Self {
            width,
            height,
            logits,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub omega_pos: f64,
    pub omega_neg: f64,
    pub lambda_bce: f64,
    pub lambda_dice: f64,
    pub dice_eps: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            omega_pos: 5.0,
            omega_neg: 1.0,
            lambda_bce: 0.7,
            lambda_dice: 0.3,
            dice_eps: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), MetricsError> {
        let all = [self.omega_pos, self.omega_neg, self.lambda_bce, self.lambda_dice, self.dice_eps];
        if all.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
            return Err(MetricsError::InvalidValue("loss weights must be finite and non-negative".into()));
        }
        if !(self.lambda_bce + self.lambda_dice > 0.0) {
            return Err(MetricsError::InvalidValue("lambda_bce + lambda_dice must be positive".into()));
        }
        Ok(())
    }
}

fn check(logits: &LogitMap, gt: &BinaryMask) -> Result<(), MetricsError> {
    if logits.width != gt.width || logits.height != gt.height {
        return Err(MetricsError::ShapeMismatch(format!(
            "logits {}x{} vs ground truth {}x{}",
            logits.width, logits.height, gt.width, gt.height
        )));
    }
    Ok(())
}

/// `ln(1 + e^x)` without overflow.
#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Mean of `w_i * BCE(sigmoid(logit_i), y_i)` with `w_i` chosen by the label.
///
/// Uses `-ln sigmoid(x) = softplus(-x)` and `-ln(1 - sigmoid(x)) = softplus(x)`.
pub fn weighted_bce(logits: &LogitMap, gt: &BinaryMask, w: &LossWeights) -> Result<f64, MetricsError> {
    check(logits, gt)?;
    let n = logits.logits.len();
    if n == 0 {
        return Ok(0.0);
    }
    let sum: f64 = logits
        .logits
        .iter()
        .zip(&gt.bits)
        .map(|(&x, &y)| {
            if y {
                w.omega_pos * softplus(-x)
            } else {
                w.omega_neg * softplus(x)
            }
        })
        .sum();
    Ok(sum / n as f64)
}

/// `1 - (2 sum(p y) + eps) / (sum(p) + sum(y) + eps)` with `p = sigmoid(logit)`.
pub fn dice_loss(logits: &LogitMap, gt: &BinaryMask, eps: f64) -> Result<f64, MetricsError> {
    check(logits, gt)?;
    if !(eps > 0.0) {
        return Err(MetricsError::InvalidValue(format!("dice eps {eps} must be positive")));
    }
    let (mut inter, mut sum_p, mut sum_y) = (0.0, 0.0, 0.0);
    for (&x, &y) in logits.logits.iter().zip(&gt.bits) {
        let p = sigmoid(x);
        sum_p += p;
        if y {
            inter += p;
            sum_y += 1.0;
        }
    }
    Ok(1.0 - (2.0 * inter + eps) / (sum_p + sum_y + eps))
}

pub fn combined_loss(logits: &LogitMap, gt: &BinaryMask, w: &LossWeights) -> Result<f64, MetricsError> {
    w.validate()?;
    Ok(w.lambda_bce * weighted_bce(logits, gt, w)? + w.lambda_dice * dice_loss(logits, gt, w.dice_eps)?)
}

/// Combined loss on the final output plus every (already upsampled) decoder output.
pub fn combined_total_loss(
    final_logits: &LogitMap,
    intermediates: &[LogitMap],
    gt: &BinaryMask,
    w: &LossWeights,
) -> Result<f64, MetricsError> {
    let mut total = combined_loss(final_logits, gt, w)?;
    for m in intermediates {
        total += combined_loss(m, gt, w)?;
    }
    Ok(total)
}

//! Density-aware augmentation planning: bucket training masks by crack-pixel share and
//! double the under-represented buckets.

use serde::{Deserialize, Serialize};

use crate::crack::BinaryMask;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DensityCategory {
    None,
    Minimal,
    Moderate,
    Dense,
}

impl DensityCategory {
    pub const ALL: [DensityCategory; 4] = [Self::None, Self::Minimal, Self::Moderate, Self::Dense];

    pub fn index(self) -> usize {
        self as usize
    }
}

/// Upper bounds (inclusive) on crack-pixel fraction for the minimal and moderate bands.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DensityBands {
    pub minimal_max: f64,
    pub moderate_max: f64,
}

impl Default for DensityBands {
    fn default() -> Self {
        Self {
            minimal_max: 0.005,
            moderate_max: 0.02,
        }
    }
}

impl DensityBands {
    pub fn categorize(&self, fraction: f64) -> DensityCategory {
        if fraction <= 0.0 {
            DensityCategory::None
        } else if fraction <= self.minimal_max {
            DensityCategory::Minimal
        } else if fraction <= self.moderate_max {
            DensityCategory::Moderate
        } else {
            DensityCategory::Dense
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentationPlan {
    pub categories: Vec<DensityCategory>,
    /// Image count per category, indexed by [`DensityCategory::index`].
    pub counts: [usize; 4],
    /// Replication factor per category (1 or 2).
    pub factors: [u32; 4],
}

impl AugmentationPlan {
    pub fn factor_for(&self, c: DensityCategory) -> u32 {
        self.factors[c.index()]
    }

    pub fn underrepresented(&self) -> Vec<DensityCategory> {
        DensityCategory::ALL
            .into_iter()
            .filter(|c| self.factors[c.index()] > 1)
            .collect()
    }
}

/// Categorizes each mask and marks populated categories whose count is strictly below
/// the median count of populated categories.
pub fn density_augmentation_plan(masks: &[BinaryMask], bands: &DensityBands) -> AugmentationPlan {
    let categories: Vec<_> = masks.iter().map(|m| bands.categorize(m.fraction())).collect();
    let mut counts = [0usize; 4];
    for c in &categories {
        counts[c.index()] += 1;
    }
    let mut populated: Vec<usize> = counts.iter().copied().filter(|&n| n > 0).collect();
    populated.sort_unstable();
    let median = match populated.len() {
        0 => 0.0,
        n if n % 2 == 1 => populated[n / 2] as f64,
        n => (populated[n / 2 - 1] + populated[n / 2]) as f64 / 2.0,
    };
    let factors = counts.map(|n| if n > 0 && (n as f64) < median { 2 } else { 1 });
    AugmentationPlan {
        categories,
        counts,
        factors,
    }
}

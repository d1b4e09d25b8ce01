//! Effective sample sizes, intra-category weights and inter-category margins.
//!
//! For a category `c` with region values `v_{c,i}` (taken from the previous
//! epoch's histogram snapshot):
//!
//! ```text
//! S_c     = sum_i v_{c,i}^alpha
//! W_{c,i} = S_c / v_{c,i}^alpha
//! M_{m,n} = gamma * ln(min(1, S_n / S_m))
//! ```

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::histogram::AdaptiveHistogram;

fn check_alpha(alpha: f64) -> Result<f64> {
    if alpha > 0.0 && alpha <= 1.0 {
        Ok(alpha)
    } else {
        invalid(format!("alpha must lie in (0, 1], got {alpha}"))
    }
}

/// `sum_i v_i^alpha` over a snapshot, with `0^alpha = 0`.
pub fn effective_size(snapshot: &AdaptiveHistogram, alpha: f64) -> Result<f64> {
    let alpha = check_alpha(alpha)?;
    Ok(snapshot
        .values()
        .into_iter()
        .filter(|&v| v > 0.0)
        .map(|v| v.powf(alpha))
        .sum())
}

/// Immutable per-epoch statistics for all categories.
#[derive(Debug, Clone, PartialEq)]
pub struct CategoryStats {
    snapshots: Vec<AdaptiveHistogram>,
    effective_sizes: Vec<f64>,
    // Density used for regions that were empty in the snapshot.
    floors: Vec<f64>,
    alpha: f64,
}

impl CategoryStats {
    pub fn new(snapshots: Vec<AdaptiveHistogram>, alpha: f64) -> Result<Self> {
        let alpha = check_alpha(alpha)?;
        if snapshots.is_empty() {
            return invalid("at least one category is required");
        }
        let effective_sizes = snapshots
            .iter()
            .map(|s| effective_size(s, alpha))
            .collect::<Result<Vec<_>>>()?;
        let floors = snapshots
            .iter()
            .map(|s| s.min_positive_value().unwrap_or(1.0))
            .collect();
        Ok(Self {
            snapshots,
            effective_sizes,
            floors,
            alpha,
        })
    }

    pub fn category_count(&self) -> usize {
        self.snapshots.len()
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn effective_sizes(&self) -> &[f64] {
        &self.effective_sizes
    }

    pub fn snapshots(&self) -> &[AdaptiveHistogram] {
        &self.snapshots
    }

    /// Intra-category weight of an example of `category` with gradient norm `g`.
    ///
    /// Regions that were empty in the snapshot use the smallest occupied
    /// region value, so they receive the largest weight seen in the category.
    /// A category with no statistics yet gets the neutral weight 1.
    pub fn example_weight(&self, category: usize, g: f64) -> Result<f64> {
        let Some(snapshot) = self.snapshots.get(category) else {
            return invalid(format!(
                "category {category} out of range for {} categories",
                self.category_count()
            ));
        };
        let density = snapshot.density_at(g)?;
        let size = self.effective_sizes[category];
        if size == 0.0 {
            return Ok(1.0);
        }
        let density = if density > 0.0 { density } else { self.floors[category] };
        Ok(size / density.powf(self.alpha))
    }

    /// Margin matrix `M[m][n] = gamma * ln(min(1, S_n / S_m))`.
    ///
    /// Entries involving a category without statistics (`S = 0`) are zero.
    pub fn margin_matrix(&self, gamma: f64) -> Result<MarginMatrix> {
        if !(gamma.is_finite() && gamma > 0.0) {
            return invalid(format!("gamma must be positive, got {gamma}"));
        }
        let s = &self.effective_sizes;
        let entries = s
            .iter()
            .map(|&s_m| {
                s.iter()
                    .map(|&s_n| {
                        if s_m > 0.0 && s_n > 0.0 && s_n < s_m {
                            gamma * (s_n / s_m).ln()
                        } else {
                            0.0
                        }
                    })
                    .collect()
            })
            .collect();
        Ok(MarginMatrix { entries, gamma })
    }

    /// JSON log record for one epoch.
    pub fn record(&self, epoch: usize, margins: &MarginMatrix) -> StatsRecord {
        StatsRecord {
            epoch,
            effective_sizes: self.effective_sizes.clone(),
            margin_matrix: margins.entries.clone(),
        }
    }
}

/// Square matrix of non-positive logit margins, row = true class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginMatrix {
    entries: Vec<Vec<f64>>,
    gamma: f64,
}

impl MarginMatrix {
    /// All-zero margins (cold start, or inter-category balance disabled).
    pub fn zeros(category_count: usize) -> Self {
        Self {
            entries: vec![vec![0.0; category_count]; category_count],
            gamma: 0.0,
        }
    }

    pub fn category_count(&self) -> usize {
        self.entries.len()
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    /// Margins applied to every logit for an example whose true class is `label`.
    pub fn row(&self, label: usize) -> &[f64] {
        &self.entries[label]
    }

    pub fn get(&self, m: usize, n: usize) -> f64 {
        self.entries[m][n]
    }

    pub fn entries(&self) -> &[Vec<f64>] {
        &self.entries
    }

    pub fn max_abs(&self) -> f64 {
        self.entries
            .iter()
            .flatten()
            .fold(0.0, |acc, &x| acc.max(x.abs()))
    }
}

/// `{epoch, effective_sizes[], margin_matrix[][]}`
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsRecord {
    pub epoch: usize,
    pub effective_sizes: Vec<f64>,
    pub margin_matrix: Vec<Vec<f64>>,
}

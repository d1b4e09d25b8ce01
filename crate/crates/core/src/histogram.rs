//! Gradient-norm histograms with variable-width unit regions.
//!
//! A histogram partitions `[0, 1]` into `N` unit regions of width `d_i`
//! (summing to 1). Every accumulated gradient norm adds `1 / (N * d_i)` to
//! the value of its region, so values are density-normalised: with uniform
//! widths the increment is exactly one and values are plain counts.
//!
//! At the end of an epoch the histogram either keeps its uniform widths and
//! only resets its values (URA), or reassigns widths so that densely
//! populated regions become narrower (AURA):
//!
//! ```text
//! w_i = 1 / ln(shift + v_i),    d_i = w_i / sum_j w_j
//! ```
//!
//! The shift (default `e`) keeps every raw width finite and positive, and
//! equals 1 for an empty region.
//!
//! Values are stored as integer per-region counts; `v_i` is derived as
//! `count_i / (N * d_i)`. This keeps merges exact regardless of widths.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Default additive shift inside the width-reassignment logarithm.
pub const DEFAULT_WIDTH_SHIFT: f64 = std::f64::consts::E;

const WIDTH_SUM_TOLERANCE: f64 = 1e-9;

/// Check that `g` is a valid gradient norm.
pub fn check_gradient_norm(g: f64) -> Result<f64> {
    if (0.0..=1.0).contains(&g) {
        Ok(g)
    } else {
        invalid(format!("gradient norm {g} outside [0, 1]"))
    }
}

/// Per-category gradient-norm density estimate over `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "HistogramRepr", into = "HistogramRepr")]
pub struct AdaptiveHistogram {
    widths: Vec<f64>,
    counts: Vec<u64>,
    // N + 1 entries, first 0 and last exactly 1.
    boundaries: Vec<f64>,
}

impl AdaptiveHistogram {
    /// A histogram with `region_count` equal-width regions and no mass.
    pub fn new(region_count: usize) -> Result<Self> {
        if region_count < 2 {
            return invalid(format!("region count must be at least 2, got {region_count}"));
        }
        let width = 1.0 / region_count as f64;
        Self::with_widths(vec![width; region_count])
    }

    /// An empty histogram over explicit region widths.
    ///
    /// Widths must be positive, finite and sum to one within `1e-9`.
    pub fn with_widths(widths: Vec<f64>) -> Result<Self> {
        let counts = vec![0; widths.len()];
        Self::from_parts(widths, counts)
    }

    fn from_parts(widths: Vec<f64>, counts: Vec<u64>) -> Result<Self> {
        if widths.len() < 2 {
            return invalid(format!("region count must be at least 2, got {}", widths.len()));
        }
        if widths.len() != counts.len() {
            return invalid("widths and counts differ in length");
        }
        if let Some(w) = widths.iter().find(|w| !(w.is_finite() && **w > 0.0)) {
            return invalid(format!("region width {w} is not positive"));
        }
        let total: f64 = widths.iter().sum();
        if (total - 1.0).abs() > WIDTH_SUM_TOLERANCE {
            return invalid(format!("region widths sum to {total}, expected 1"));
        }
        let boundaries = boundaries_from(&widths);
        Ok(Self {
            widths,
            counts,
            boundaries,
        })
    }

    pub fn region_count(&self) -> usize {
        self.widths.len()
    }

    pub fn widths(&self) -> &[f64] {
        &self.widths
    }

    pub fn boundaries(&self) -> &[f64] {
        &self.boundaries
    }

    /// Number of examples accumulated into each region.
    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    /// Total number of accumulated examples.
    pub fn total_count(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.iter().all(|&c| c == 0)
    }

    /// Density-normalised value `v_i` of region `i`.
    pub fn value(&self, region: usize) -> f64 {
        self.counts[region] as f64 * self.increment(region)
    }

    /// All region values `v_i`.
    pub fn values(&self) -> Vec<f64> {
        (0..self.region_count()).map(|i| self.value(i)).collect()
    }

    /// Amount one accumulation adds to region `i`: `1 / (N * d_i)`.
    pub fn increment(&self, region: usize) -> f64 {
        1.0 / (self.region_count() as f64 * self.widths[region])
    }

    /// Index `i` with `b_i <= g < b_{i+1}`; the top region is closed.
    pub fn locate_region(&self, g: f64) -> Result<usize> {
        let g = check_gradient_norm(g)?;
        let n = self.region_count();
        // Interior boundaries b_1..b_{N-1}.
        Ok(self.boundaries[1..n].partition_point(|&b| b <= g))
    }

    /// Record one gradient norm.
    pub fn accumulate(&mut self, g: f64) -> Result<usize> {
        let region = self.locate_region(g)?;
        self.counts[region] += 1;
        Ok(region)
    }

    /// Value of the region containing `g`.
    pub fn density_at(&self, g: f64) -> Result<f64> {
        Ok(self.value(self.locate_region(g)?))
    }

    /// Smallest strictly positive region value, if any region is occupied.
    pub fn min_positive_value(&self) -> Option<f64> {
        (0..self.region_count())
            .filter(|&i| self.counts[i] > 0)
            .map(|i| self.value(i))
            .min_by(f64::total_cmp)
    }

    /// Element-wise sum of two histograms sharing the same regions.
    pub fn merge(&self, other: &Self) -> Result<Self> {
        let mut merged = self.clone();
        merged.merge_from(other)?;
        Ok(merged)
    }

    /// In-place variant of [`merge`](Self::merge).
    pub fn merge_from(&mut self, other: &Self) -> Result<()> {
        if self.widths != other.widths {
            return invalid("cannot merge histograms with different region widths");
        }
        for (c, o) in self.counts.iter_mut().zip(&other.counts) {
            *c += o;
        }
        Ok(())
    }

    /// Same regions, all values zero (URA epoch end).
    pub fn reset_values(&self) -> Self {
        let mut h = self.clone();
        h.counts.iter_mut().for_each(|c| *c = 0);
        h
    }

    /// Width reassignment with the default shift `e` (AURA epoch end).
    pub fn reassign_widths(&self) -> Self {
        self.reassign_widths_with(DEFAULT_WIDTH_SHIFT)
            .expect("default shift is valid")
    }

    /// Reassigned widths `w_i / sum w` with `w_i = 1 / ln(shift + v_i)`,
    /// values reset. `self` is left untouched and serves as the snapshot.
    pub fn reassign_widths_with(&self, shift: f64) -> Result<Self> {
        if !(shift.is_finite() && shift > 1.0) {
            return invalid(format!("width shift must be finite and > 1, got {shift}"));
        }
        let raw: Vec<f64> = (0..self.region_count())
            .map(|i| 1.0 / (shift + self.value(i)).ln())
            .collect();
        let total: f64 = raw.iter().sum();
        let widths = raw.into_iter().map(|w| w / total).collect();
        Self::with_widths(widths)
    }
}

fn boundaries_from(widths: &[f64]) -> Vec<f64> {
    let mut boundaries = Vec::with_capacity(widths.len() + 1);
    let mut acc = 0.0;
    boundaries.push(acc);
    for w in &widths[..widths.len() - 1] {
        acc += w;
        boundaries.push(acc);
    }
    boundaries.push(1.0);
    boundaries
}

/// JSON form `{region_count, widths[], values[]}`.
#[derive(Serialize, Deserialize)]
struct HistogramRepr {
    region_count: usize,
    widths: Vec<f64>,
    values: Vec<f64>,
}

impl From<AdaptiveHistogram> for HistogramRepr {
    fn from(h: AdaptiveHistogram) -> Self {
        Self {
            region_count: h.region_count(),
            values: h.values(),
            widths: h.widths,
        }
    }
}

impl TryFrom<HistogramRepr> for AdaptiveHistogram {
    type Error = Error;

    fn try_from(repr: HistogramRepr) -> Result<Self> {
        if repr.widths.len() != repr.region_count || repr.values.len() != repr.region_count {
            return invalid("histogram arrays do not match region_count");
        }
        let n = repr.region_count as f64;
        let counts = repr
            .widths
            .iter()
            .zip(&repr.values)
            .map(|(&d, &v)| {
                let c = v * n * d;
                let rounded = c.round();
                if c < -0.5 || (c - rounded).abs() > 1e-6 * rounded.max(1.0) {
                    invalid(format!("value {v} is not a whole number of accumulations"))
                } else {
                    Ok(rounded as u64)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_parts(repr.widths, counts)
    }
}

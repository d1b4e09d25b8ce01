//! Margin-adjusted, reweighted softmax cross-entropy.
//!
//! For an example with true class `m`, logits `z`, margin row `M[m]` and
//! intra-category weight `W`:
//!
//! ```text
//! p~_n = exp(z_n + M[m][n]) / sum_k exp(z_k + M[m][k])
//! L    = -W * log p~_m
//! dL/dz_n = W * (p~_n - [n == m])
//! ```
//!
//! `M[m][m]` is always zero, so the numerator carries no margin. Weights and
//! margins are constants with respect to the logits.
//!
//! The difficulty signal fed to the histograms is `g = 1 - p~_m`, the
//! magnitude of the unweighted true-class logit gradient.

use serde::{Deserialize, Serialize};

use crate::category_stats::{CategoryStats, MarginMatrix};
use crate::error::{invalid, Result};
use crate::histogram::DEFAULT_WIDTH_SHIFT;

/// Hyperparameters and ablation switches of the loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Effectiveness factor in `(0, 1]`.
    pub alpha: f64,
    /// Margin scale, positive.
    pub gamma: f64,
    /// Unit regions per category histogram.
    pub region_count: usize,
    /// Reweight examples by inverse gradient-norm density within their category.
    pub intra_balance: bool,
    /// Apply effective-size logit margins across categories.
    pub inter_balance: bool,
    /// Reassign region widths every epoch (AURA) instead of keeping them uniform (URA).
    pub adaptive_widths: bool,
    /// Rescale intra-category weights to mean 1 within each batch.
    pub normalize_batch_weights: bool,
    /// Additive shift inside the width-reassignment logarithm.
    pub width_shift: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 0.9,
            gamma: 0.8,
            region_count: 30,
            intra_balance: true,
            inter_balance: true,
            adaptive_widths: true,
            normalize_batch_weights: false,
            width_shift: DEFAULT_WIDTH_SHIFT,
        }
    }
}

impl LossConfig {
    /// Plain softmax cross-entropy: both balance strategies disabled.
    pub fn plain() -> Self {
        Self {
            intra_balance: false,
            inter_balance: false,
            adaptive_widths: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return invalid(format!("alpha must lie in (0, 1], got {}", self.alpha));
        }
        if !(self.gamma.is_finite() && self.gamma > 0.0) {
            return invalid(format!("gamma must be positive, got {}", self.gamma));
        }
        if self.region_count < 2 {
            return invalid(format!("region_count must be at least 2, got {}", self.region_count));
        }
        if !(self.width_shift.is_finite() && self.width_shift > 1.0) {
            return invalid(format!("width_shift must be > 1, got {}", self.width_shift));
        }
        Ok(())
    }
}

fn check_inputs(z: &[f64], label: usize, margin_row: &[f64]) -> Result<()> {
    if z.is_empty() {
        return invalid("empty logit vector");
    }
    if z.iter().any(|x| !x.is_finite()) {
        return invalid("non-finite logit");
    }
    if margin_row.len() != z.len() {
        return invalid(format!(
            "margin row has {} entries for {} logits",
            margin_row.len(),
            z.len()
        ));
    }
    if margin_row.iter().any(|x| !x.is_finite()) {
        return invalid("non-finite margin");
    }
    if label >= z.len() {
        return invalid(format!("label {label} out of range for {} classes", z.len()));
    }
    if margin_row[label] != 0.0 {
        return invalid(format!("margin on the true class must be 0, got {}", margin_row[label]));
    }
    Ok(())
}

fn check_weight(weight: f64) -> Result<()> {
    if weight.is_finite() && weight > 0.0 {
        Ok(())
    } else {
        invalid(format!("example weight must be positive, got {weight}"))
    }
}

/// Max-shifted exponentials of `z + margin_row` and their sum.
fn shifted_exps(z: &[f64], margin_row: &[f64]) -> (Vec<f64>, f64, f64) {
    let max = z
        .iter()
        .zip(margin_row)
        .map(|(a, b)| a + b)
        .fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z
        .iter()
        .zip(margin_row)
        .map(|(a, b)| (a + b - max).exp())
        .collect();
    let sum = exps.iter().sum();
    (exps, sum, max)
}

/// Softmax of the margin-adjusted logits.
pub fn margin_softmax(z: &[f64], margin_row: &[f64]) -> Result<Vec<f64>> {
    if z.iter().chain(margin_row).any(|x| !x.is_finite()) || z.len() != margin_row.len() {
        return invalid("logits and margins must be finite and of equal length");
    }
    let (exps, sum, _) = shifted_exps(z, margin_row);
    Ok(exps.into_iter().map(|e| e / sum).collect())
}

/// `-weight * log p~_label`, evaluated as a log-sum-exp so it never overflows.
pub fn forward(z: &[f64], label: usize, weight: f64, margin_row: &[f64]) -> Result<f64> {
    check_inputs(z, label, margin_row)?;
    check_weight(weight)?;
    let (_, sum, max) = shifted_exps(z, margin_row);
    let log_partition = max + sum.ln();
    Ok(weight * (log_partition - z[label]))
}

/// `weight * (p~ - onehot(label))`.
pub fn backward(z: &[f64], label: usize, weight: f64, margin_row: &[f64]) -> Result<Vec<f64>> {
    check_inputs(z, label, margin_row)?;
    check_weight(weight)?;
    let (exps, sum, _) = shifted_exps(z, margin_row);
    Ok(grad_from(&exps, sum, label, weight))
}

fn grad_from(exps: &[f64], sum: f64, label: usize, weight: f64) -> Vec<f64> {
    exps.iter()
        .enumerate()
        .map(|(n, e)| {
            let p = e / sum;
            weight * if n == label { p - 1.0 } else { p }
        })
        .collect()
}

fn norm_from(exps: &[f64], sum: f64, label: usize) -> f64 {
    // 1 - p~_m as the mass on the other classes; stays accurate when p~_m -> 1.
    let rest: f64 = exps
        .iter()
        .enumerate()
        .filter(|&(n, _)| n != label)
        .map(|(_, e)| e)
        .sum();
    (rest / sum).clamp(0.0, 1.0)
}

/// Difficulty `g = 1 - p~_label` in `[0, 1]`.
pub fn gradient_norm(z: &[f64], label: usize, margin_row: &[f64]) -> Result<f64> {
    check_inputs(z, label, margin_row)?;
    let (exps, sum, _) = shifted_exps(z, margin_row);
    Ok(norm_from(&exps, sum, label))
}

/// Loss, gradients and difficulty for one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchLoss {
    /// Mean of the per-example losses.
    pub loss: f64,
    /// Gradient of `loss` (the batch mean) with respect to each example's logits.
    pub gradients: Vec<Vec<f64>>,
    /// Gradient norm of each example, computed with the same margins as the loss.
    pub gradient_norms: Vec<f64>,
    /// Intra-category weight applied to each example.
    pub weights: Vec<f64>,
}

/// Mean GHM-CWAP loss over a batch.
///
/// `stats` and `margins` come from the previous epoch; `None` means cold
/// start (unit weights, zero margins). The config flags can disable either
/// term independently.
pub fn batch_loss(
    logits: &[Vec<f64>],
    labels: &[usize],
    stats: Option<&CategoryStats>,
    margins: Option<&MarginMatrix>,
    config: &LossConfig,
) -> Result<BatchLoss> {
    if logits.is_empty() {
        return invalid("empty batch");
    }
    if logits.len() != labels.len() {
        return invalid("logits and labels differ in length");
    }
    let classes = logits[0].len();
    if logits.iter().any(|z| z.len() != classes) {
        return invalid("inconsistent class count across batch");
    }
    let margins = margins.filter(|_| config.inter_balance);
    if let Some(m) = margins {
        if m.category_count() != classes {
            return invalid("margin matrix does not match class count");
        }
    }
    let stats = stats.filter(|_| config.intra_balance);
    let zero_row = vec![0.0; classes];

    let batch = logits.len();
    let mut parts = Vec::with_capacity(batch);
    for (z, &label) in logits.iter().zip(labels) {
        let row = margins.map_or(zero_row.as_slice(), |m| m.row(label));
        check_inputs(z, label, row)?;
        let (exps, sum, max) = shifted_exps(z, row);
        let g = norm_from(&exps, sum, label);
        let weight = match stats {
            Some(s) => s.example_weight(label, g)?,
            None => 1.0,
        };
        let unweighted = max + sum.ln() - z[label];
        parts.push((exps, sum, g, weight, unweighted));
    }

    if config.normalize_batch_weights && stats.is_some() {
        let mean = parts.iter().map(|p| p.3).sum::<f64>() / batch as f64;
        for p in &mut parts {
            p.3 /= mean;
        }
    }

    let scale = 1.0 / batch as f64;
    let mut loss = 0.0;
    let mut gradients = Vec::with_capacity(batch);
    let mut gradient_norms = Vec::with_capacity(batch);
    let mut weights = Vec::with_capacity(batch);
    for ((exps, sum, g, weight, unweighted), &label) in parts.into_iter().zip(labels) {
        loss += weight * unweighted;
        gradients.push(grad_from(&exps, sum, label, weight * scale));
        gradient_norms.push(g);
        weights.push(weight);
    }
    Ok(BatchLoss {
        loss: loss * scale,
        gradients,
        gradient_norms,
        weights,
    })
}

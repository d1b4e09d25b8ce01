//! Reference losses for comparison: softmax CE, focal loss and
//! class-balanced weighting.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

fn log_softmax(z: &[f64]) -> Result<Vec<f64>> {
    if z.is_empty() || z.iter().any(|x| !x.is_finite()) {
        return invalid("logits must be finite and non-empty");
    }
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + z.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    Ok(z.iter().map(|x| x - lse).collect())
}

fn check_label(z: &[f64], label: usize) -> Result<()> {
    if label < z.len() {
        Ok(())
    } else {
        invalid(format!("label {label} out of range for {} classes", z.len()))
    }
}

/// Plain softmax cross-entropy and its logit gradient.
pub fn softmax_cross_entropy(z: &[f64], label: usize) -> Result<(f64, Vec<f64>)> {
    weighted_cross_entropy(z, label, 1.0)
}

/// Cross-entropy scaled by a fixed per-example (usually per-class) weight.
pub fn weighted_cross_entropy(z: &[f64], label: usize, weight: f64) -> Result<(f64, Vec<f64>)> {
    let logp = log_softmax(z)?;
    check_label(z, label)?;
    if !(weight.is_finite() && weight > 0.0) {
        return invalid(format!("weight must be positive, got {weight}"));
    }
    let grad = logp
        .iter()
        .enumerate()
        .map(|(n, lp)| weight * (lp.exp() - if n == label { 1.0 } else { 0.0 }))
        .collect();
    Ok((-weight * logp[label], grad))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FocalConfig {
    /// Focal exponent; 0 recovers cross-entropy.
    pub focusing: f64,
}

impl Default for FocalConfig {
    fn default() -> Self {
        Self { focusing: 2.0 }
    }
}

/// Focal loss `-(1 - p)^f log p` on the true-class probability `p`, with
/// its closed-form logit gradient.
///
/// With `q = 1 - p`, `dL/dp = f q^(f-1) log p - q^f / p` and
/// `dp/dz_n = p ([n == m] - p_n)`, so
/// `dL/dz_n = (f p q^(f-1) log p - q^f) ([n == m] - p_n)`.
pub fn focal_forward_backward(z: &[f64], label: usize, cfg: &FocalConfig) -> Result<(f64, Vec<f64>)> {
    let f = cfg.focusing;
    if !(f.is_finite() && f >= 0.0) {
        return invalid(format!("focusing must be non-negative, got {f}"));
    }
    let logp = log_softmax(z)?;
    check_label(z, label)?;
    let log_pm = logp[label];
    let pm = log_pm.exp();
    let q: f64 = logp
        .iter()
        .enumerate()
        .filter(|&(n, _)| n != label)
        .map(|(_, lp)| lp.exp())
        .sum();
    let modulator = if f == 0.0 { 1.0 } else { q.powf(f) };
    let loss = -modulator * log_pm;
    let slope = if f == 0.0 || q == 0.0 {
        0.0
    } else {
        f * pm * q.powf(f - 1.0) * log_pm
    };
    let coeff = slope - modulator;
    let grad = logp
        .iter()
        .enumerate()
        .map(|(n, lp)| coeff * (if n == label { 1.0 } else { 0.0 } - lp.exp()))
        .collect();
    Ok((loss, grad))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EffectiveNumberConfig {
    /// Overlap hyperparameter in `[0, 1)`.
    pub beta: f64,
}

impl Default for EffectiveNumberConfig {
    fn default() -> Self {
        Self { beta: 0.999 }
    }
}

fn check_counts(class_counts: &[usize]) -> Result<()> {
    if class_counts.is_empty() {
        return invalid("no classes");
    }
    if class_counts.contains(&0) {
        return invalid("every class needs at least one example");
    }
    Ok(())
}

fn mean_normalized(raw: Vec<f64>) -> Vec<f64> {
    let mean = raw.iter().sum::<f64>() / raw.len() as f64;
    raw.into_iter().map(|w| w / mean).collect()
}

/// Per-class weights `(1 - beta) / (1 - beta^n_c)`, rescaled to mean 1.
pub fn effective_number_weights(class_counts: &[usize], cfg: &EffectiveNumberConfig) -> Result<Vec<f64>> {
    check_counts(class_counts)?;
    let beta = cfg.beta;
    if !(0.0..1.0).contains(&beta) {
        return invalid(format!("beta must lie in [0, 1), got {beta}"));
    }
    let raw = class_counts
        .iter()
        .map(|&n| (1.0 - beta) / (1.0 - beta.powf(n as f64)))
        .collect();
    Ok(mean_normalized(raw))
}

/// Per-class weights proportional to `1 / n_c`, rescaled to mean 1.
pub fn inverse_frequency_weights(class_counts: &[usize]) -> Result<Vec<f64>> {
    check_counts(class_counts)?;
    Ok(mean_normalized(class_counts.iter().map(|&n| 1.0 / n as f64).collect()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn focal_zero_is_cross_entropy() {
        let z = [0.2, -1.0, 3.1, 0.0];
        for label in 0..4 {
            let (fl, fg) = focal_forward_backward(&z, label, &FocalConfig { focusing: 0.0 }).unwrap();
            let (cl, cg) = softmax_cross_entropy(&z, label).unwrap();
            assert!((fl - cl).abs() < 1e-15);
            for (a, b) in fg.iter().zip(&cg) {
                assert!((a - b).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn focal_downweights_easy_examples() {
        let cfg = FocalConfig::default();
        let easy = [6.0, 0.0, 0.0];
        let (fl, _) = focal_forward_backward(&easy, 0, &cfg).unwrap();
        let (cl, _) = softmax_cross_entropy(&easy, 0).unwrap();
        assert!(fl < cl * 1e-4);
        let hard = [-2.0, 0.0, 0.0];
        let (fl, _) = focal_forward_backward(&hard, 0, &cfg).unwrap();
        let (cl, _) = softmax_cross_entropy(&hard, 0).unwrap();
        assert!(fl > 0.5 * cl);
    }

    #[test]
    fn focal_saturated_is_finite() {
        let (l, g) = focal_forward_backward(&[900.0, 0.0], 0, &FocalConfig { focusing: 0.5 }).unwrap();
        assert_eq!(l, 0.0);
        assert!(g.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn focal_errors() {
        assert!(focal_forward_backward(&[0.0, f64::NAN], 0, &FocalConfig::default()).is_err());
        assert!(focal_forward_backward(&[0.0, 0.0], 0, &FocalConfig { focusing: -1.0 }).is_err());
        assert!(focal_forward_backward(&[0.0, 0.0], 3, &FocalConfig::default()).is_err());
    }

    #[test]
    fn effective_number_examples() {
        let w = effective_number_weights(&[100, 10, 3], &EffectiveNumberConfig { beta: 0.0 }).unwrap();
        assert!(w.iter().all(|&x| (x - 1.0).abs() < 1e-15));

        let w = effective_number_weights(&[40; 5], &EffectiveNumberConfig { beta: 0.99 }).unwrap();
        assert!(w.iter().all(|&x| (x - 1.0).abs() < 1e-12));

        let w = effective_number_weights(&[100, 10], &EffectiveNumberConfig { beta: 0.99 }).unwrap();
        assert!((w[1] / w[0] - 6.630_217_700_134_635).abs() < 1e-9);
        assert!(((w[0] + w[1]) / 2.0 - 1.0).abs() < 1e-12);

        assert!(effective_number_weights(&[10, 0], &EffectiveNumberConfig::default()).is_err());
        assert!(effective_number_weights(&[10, 1], &EffectiveNumberConfig { beta: 1.0 }).is_err());
    }

    #[test]
    fn inverse_frequency() {
        let w = inverse_frequency_weights(&[100, 10]).unwrap();
        assert!((w[1] / w[0] - 10.0).abs() < 1e-12);
        assert!(inverse_frequency_weights(&[]).is_err());
    }

    #[test]
    fn weighted_ce_scales() {
        let z = [1.0, 2.0];
        let (l1, g1) = softmax_cross_entropy(&z, 0).unwrap();
        let (l2, g2) = weighted_cross_entropy(&z, 0, 2.5).unwrap();
        assert!((l2 - 2.5 * l1).abs() < 1e-14);
        assert!((g2[1] - 2.5 * g1[1]).abs() < 1e-14);
        assert!(weighted_cross_entropy(&z, 0, 0.0).is_err());
    }
}

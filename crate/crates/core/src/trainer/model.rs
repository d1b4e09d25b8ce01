//! Linear and one-hidden-layer (ReLU) softmax classifiers with flat
//! parameter storage.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Architecture {
    Linear,
    Mlp { hidden_dim: usize },
}

/// Parameters live in one flat vector:
///
/// - linear: `W [C x d]`, `b [C]`
/// - mlp:    `W1 [h x d]`, `b1 [h]`, `W2 [C x h]`, `b2 [C]`
///
/// Matrices are row-major with one row per output unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    architecture: Architecture,
    feature_dim: usize,
    class_count: usize,
    params: Vec<f64>,
}

/// Intermediate activations kept for the backward pass.
#[derive(Debug, Clone, Default)]
pub struct Activations {
    hidden: Vec<f64>,
}

fn param_count(arch: Architecture, d: usize, c: usize) -> usize {
    match arch {
        Architecture::Linear => c * d + c,
        Architecture::Mlp { hidden_dim: h } => h * d + h + c * h + c,
    }
}

fn affine(weights: &[f64], bias: &[f64], x: &[f64]) -> Vec<f64> {
    weights
        .chunks_exact(x.len())
        .zip(bias)
        .map(|(row, b)| row.iter().zip(x).fold(*b, |acc, (w, v)| acc + w * v))
        .collect()
}

impl Model {
    /// Fresh model. Linear models start at zero; MLP weights are drawn from
    /// He-scaled normals seeded by `seed`, biases start at zero.
    pub fn new(architecture: Architecture, feature_dim: usize, class_count: usize, seed: u64) -> Result<Self> {
        if feature_dim == 0 || class_count < 2 {
            return invalid("model needs feature_dim >= 1 and class_count >= 2");
        }
        let mut params = vec![0.0; param_count(architecture, feature_dim, class_count)];
        if let Architecture::Mlp { hidden_dim: h } = architecture {
            if h == 0 {
                return invalid("hidden_dim must be positive");
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let first = Normal::new(0.0, (2.0 / feature_dim as f64).sqrt()).expect("finite std");
            let second = Normal::new(0.0, (2.0 / h as f64).sqrt()).expect("finite std");
            let (w1, rest) = params.split_at_mut(h * feature_dim);
            w1.iter_mut().for_each(|w| *w = first.sample(&mut rng));
            let w2 = &mut rest[h..h + class_count * h];
            w2.iter_mut().for_each(|w| *w = second.sample(&mut rng));
        }
        Ok(Self {
            architecture,
            feature_dim,
            class_count,
            params,
        })
    }

    pub fn from_parameters(
        architecture: Architecture,
        feature_dim: usize,
        class_count: usize,
        params: Vec<f64>,
    ) -> Result<Self> {
        let expected = param_count(architecture, feature_dim, class_count);
        if params.len() != expected {
            return invalid(format!("expected {expected} parameters, got {}", params.len()));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return invalid("non-finite parameter");
        }
        Ok(Self {
            architecture,
            feature_dim,
            class_count,
            params,
        })
    }

    pub fn architecture(&self) -> Architecture {
        self.architecture
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        self.forward(x).0
    }

    /// Logits plus the activations needed by [`accumulate_gradient`](Self::accumulate_gradient).
    pub fn forward(&self, x: &[f64]) -> (Vec<f64>, Activations) {
        let (d, c) = (self.feature_dim, self.class_count);
        debug_assert_eq!(x.len(), d);
        match self.architecture {
            Architecture::Linear => {
                let (w, b) = self.params.split_at(c * d);
                (affine(w, b, x), Activations::default())
            }
            Architecture::Mlp { hidden_dim: h } => {
                let (w1, rest) = self.params.split_at(h * d);
                let (b1, rest) = rest.split_at(h);
                let (w2, b2) = rest.split_at(c * h);
                let hidden: Vec<f64> = affine(w1, b1, x).into_iter().map(|a| a.max(0.0)).collect();
                (affine(w2, b2, &hidden), Activations { hidden })
            }
        }
    }

    /// Add `d loss / d params` for one example to `grad`, given `d loss / d logits`.
    pub fn accumulate_gradient(&self, x: &[f64], acts: &Activations, dlogits: &[f64], grad: &mut [f64]) {
        let (d, c) = (self.feature_dim, self.class_count);
        match self.architecture {
            Architecture::Linear => {
                let (gw, gb) = grad.split_at_mut(c * d);
                for (k, &dz) in dlogits.iter().enumerate() {
                    for (g, v) in gw[k * d..(k + 1) * d].iter_mut().zip(x) {
                        *g += dz * v;
                    }
                    gb[k] += dz;
                }
            }
            Architecture::Mlp { hidden_dim: h } => {
                let w2 = &self.params[h * d + h..h * d + h + c * h];
                let (gw1, rest) = grad.split_at_mut(h * d);
                let (gb1, rest) = rest.split_at_mut(h);
                let (gw2, gb2) = rest.split_at_mut(c * h);
                let mut dhidden = vec![0.0; h];
                for (k, &dz) in dlogits.iter().enumerate() {
                    let row = &w2[k * h..(k + 1) * h];
                    for j in 0..h {
                        gw2[k * h + j] += dz * acts.hidden[j];
                        dhidden[j] += dz * row[j];
                    }
                    gb2[k] += dz;
                }
                for j in 0..h {
                    if acts.hidden[j] <= 0.0 {
                        continue;
                    }
                    let dj = dhidden[j];
                    for (g, v) in gw1[j * d..(j + 1) * d].iter_mut().zip(x) {
                        *g += dj * v;
                    }
                    gb1[j] += dj;
                }
            }
        }
    }

    /// Arg-max class; ties resolve to the lowest index.
    pub fn predict(&self, x: &[f64]) -> usize {
        argmax(&self.logits(x))
    }
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

//! TOML experiment configuration.
//!
//! ```toml
//! seeds = [0, 1, 2]
//!
//! [dataset]
//! source = "synth"
//! class_count = 2
//! max_class_size = 1000
//! imbalance_factor = 100.0
//!
//! [model]
//! kind = "linear"
//!
//! [train]
//! epochs = 30
//!
//! [train.loss]
//! kind = "ghm-cwap"
//! alpha = 0.9
//! ```

use std::path::{Path, PathBuf};

use ghm_cwap::baselines::{EffectiveNumberConfig, FocalConfig};
use ghm_cwap::data::{isotropic_covs, ring_means, DatasetSpec};
use ghm_cwap::trainer::{Architecture, GridSpec, LossKind, TrainConfig};
use ghm_cwap::LossConfig;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

/// Offset between the seed of a synthetic training set and its test set.
pub const TEST_SEED_OFFSET: u64 = 1 << 32;

/// Distance between neighbouring class means in the default ring layout.
pub const DEFAULT_MEAN_SPACING: f64 = 4.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    pub dataset: DatasetSource,
    #[serde(default = "default_model")]
    pub model: Architecture,
    #[serde(default)]
    pub train: TrainConfig,
    /// Emit a decision-boundary grid for two-dimensional data.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub boundary: Option<GridSpec>,
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

fn default_model() -> Architecture {
    Architecture::Linear
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "kebab-case")]
pub enum DatasetSource {
    Synth(SynthSource),
    Csv(CsvSource),
}

/// Gaussian classes with a long-tailed training profile and a balanced
/// test set drawn from the same distributions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSource {
    pub class_count: usize,
    pub max_class_size: usize,
    pub imbalance_factor: f64,
    #[serde(default = "default_feature_dim")]
    pub feature_dim: usize,
    #[serde(default)]
    pub seed: u64,
    /// Explicit class means; defaults to a ring layout.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub means: Option<Vec<Vec<f64>>>,
    /// Ring radius; defaults to neighbouring means `DEFAULT_MEAN_SPACING` apart.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ring_radius: Option<f64>,
    #[serde(default = "default_covariance_scale")]
    pub covariance_scale: f64,
    /// Examples per class in the balanced test set (default `max_class_size`).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_class_size: Option<usize>,
}

fn default_feature_dim() -> usize {
    2
}

fn default_covariance_scale() -> f64 {
    1.0
}

/// Pre-featurized CSV data (`f0..f{d-1},label`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvSource {
    pub path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_count: Option<usize>,
    /// Subsample the training file to this imbalance factor.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub imbalance_factor: Option<f64>,
}

impl SynthSource {
    pub fn spec(&self, seed: u64) -> DatasetSpec {
        DatasetSpec {
            class_count: self.class_count,
            max_class_size: self.max_class_size,
            imbalance_factor: self.imbalance_factor,
            feature_dim: self.feature_dim,
            seed,
        }
    }

    pub fn class_means(&self) -> Vec<Vec<f64>> {
        match &self.means {
            Some(m) => m.clone(),
            None => {
                let radius = self.ring_radius.unwrap_or_else(|| {
                    DEFAULT_MEAN_SPACING / (2.0 * (std::f64::consts::PI / self.class_count as f64).sin())
                });
                ring_means(self.class_count, self.feature_dim, radius)
            }
        }
    }

    pub fn class_covs(&self) -> Vec<Vec<Vec<f64>>> {
        isotropic_covs(self.class_count, self.feature_dim, self.covariance_scale)
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> CliResult<Self> {
        let de = toml::Deserializer::parse(text).map_err(|e| CliError::Config(e.to_string()))?;
        let config: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            CliError::Config(format!("at `{path}`: {}", e.into_inner().message().trim()))
        })?;
        config.validate()?;
        Ok(config)
    }

    /// Load a config file; relative CSV paths are resolved against its directory.
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(CliError::io(path))?;
        let mut config = Self::from_toml_str(&text)
            .map_err(|e| CliError::Config(format!("{}: {}", path.display(), e.to_string().trim_start_matches("config error: "))))?;
        if let DatasetSource::Csv(csv) = &mut config.dataset {
            let base = path.parent().unwrap_or(Path::new(""));
            csv.path = base.join(&csv.path);
            if let Some(t) = &mut csv.test_path {
                *t = base.join(&*t);
            }
        }
        Ok(config)
    }

    pub fn to_toml_string(&self) -> CliResult<String> {
        toml::to_string(self).map_err(|e| CliError::Config(format!("cannot serialize config: {e}")))
    }

    pub fn validate(&self) -> CliResult<()> {
        let fail = |msg: String| Err(CliError::Config(msg));
        if self.seeds.is_empty() {
            return fail("`seeds` must list at least one seed".into());
        }
        self.train.validate().map_err(|e| CliError::Config(format!("train: {e}")))?;
        if let Architecture::Mlp { hidden_dim: 0 } = self.model {
            return fail("model.hidden_dim must be positive".into());
        }
        match &self.dataset {
            DatasetSource::Synth(s) => {
                s.spec(0)
                    .class_sizes()
                    .map_err(|e| CliError::Config(format!("dataset: {e}")))?;
                if s.feature_dim == 0 {
                    return fail("dataset.feature_dim must be positive".into());
                }
                if let Some(m) = &s.means {
                    if m.len() != s.class_count || m.iter().any(|v| v.len() != s.feature_dim) {
                        return fail("dataset.means needs class_count rows of feature_dim values".into());
                    }
                }
                if !(s.covariance_scale.is_finite() && s.covariance_scale > 0.0) {
                    return fail("dataset.covariance_scale must be positive".into());
                }
                if s.test_class_size == Some(0) {
                    return fail("dataset.test_class_size must be positive".into());
                }
                if self.boundary.is_some() && s.feature_dim != 2 {
                    return fail("boundary grids need feature_dim = 2".into());
                }
            }
            DatasetSource::Csv(c) => {
                if let Some(f) = c.imbalance_factor {
                    if !(f.is_finite() && f >= 1.0) {
                        return fail("dataset.imbalance_factor must be >= 1".into());
                    }
                }
            }
        }
        Ok(())
    }

    /// Apply command-line overrides, then re-validate.
    pub fn apply(&mut self, o: &Overrides) -> CliResult<()> {
        if let Some(v) = o.epochs {
            self.train.epochs = v;
        }
        if let Some(v) = o.learning_rate {
            self.train.learning_rate = v;
        }
        if let Some(v) = o.batch_size {
            self.train.batch_size = v;
        }
        if let Some(v) = o.threads {
            self.train.threads = v;
        }
        if let Some(v) = &o.seeds {
            self.seeds = v.clone();
        }
        if let Some(name) = &o.loss {
            self.train.loss = parse_loss(name)?;
        }
        if let Some(f) = o.imbalance_factor {
            match &mut self.dataset {
                DatasetSource::Synth(s) => s.imbalance_factor = f,
                DatasetSource::Csv(c) => c.imbalance_factor = Some(f),
            }
        }
        if let Some(dir) = &o.output_dir {
            self.output_dir = Some(dir.clone());
        }
        self.validate()
    }
}

/// Command-line replacements for config fields.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub epochs: Option<usize>,
    pub learning_rate: Option<f64>,
    pub batch_size: Option<usize>,
    pub threads: Option<usize>,
    pub seeds: Option<Vec<u64>>,
    pub loss: Option<String>,
    pub imbalance_factor: Option<f64>,
    pub output_dir: Option<PathBuf>,
}

/// A loss with default hyperparameters, by name.
pub fn parse_loss(name: &str) -> CliResult<LossKind> {
    Ok(match name {
        "softmax" => LossKind::Softmax,
        "focal" => LossKind::Focal(FocalConfig::default()),
        "class-balanced" => LossKind::ClassBalanced,
        "effective-number" => LossKind::EffectiveNumber(EffectiveNumberConfig::default()),
        "ghm-cwap" => LossKind::GhmCwap(LossConfig::default()),
        other => {
            return Err(CliError::Config(format!(
                "unknown loss `{other}` (expected softmax, focal, class-balanced, effective-number or ghm-cwap)"
            )))
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
[dataset]
source = "synth"
class_count = 2
max_class_size = 100
imbalance_factor = 10.0
"#;

    #[test]
    fn defaults_fill_in() {
        let c = ExperimentConfig::from_toml_str(MINIMAL).unwrap();
        assert_eq!(c.seeds, vec![0]);
        assert_eq!(c.model, Architecture::Linear);
        assert_eq!(c.train, TrainConfig::default());
        let DatasetSource::Synth(s) = &c.dataset else { panic!() };
        assert_eq!(s.class_means(), vec![vec![-2.0, 0.0], vec![2.0, 0.0]]);
    }

    #[test]
    fn default_ring_spacing() {
        let mut text = MINIMAL.replace("class_count = 2", "class_count = 10");
        text.push('\n');
        let c = ExperimentConfig::from_toml_str(&text).unwrap();
        let DatasetSource::Synth(s) = &c.dataset else { panic!() };
        let m = s.class_means();
        let d = ((m[0][0] - m[1][0]).powi(2) + (m[0][1] - m[1][1]).powi(2)).sqrt();
        assert!((d - DEFAULT_MEAN_SPACING).abs() < 1e-9);
    }

    #[test]
    fn toml_round_trip() {
        let text = format!(
            "{MINIMAL}\n[train]\nepochs = 3\n[train.loss]\nkind = \"ghm-cwap\"\nalpha = 0.5\n[model]\nkind = \"mlp\"\nhidden_dim = 4\n"
        );
        let c = ExperimentConfig::from_toml_str(&text).unwrap();
        let back = ExperimentConfig::from_toml_str(&c.to_toml_string().unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn errors_name_the_field() {
        let text = format!("{MINIMAL}\n[train]\nepochs = \"many\"\n");
        let err = ExperimentConfig::from_toml_str(&text).unwrap_err().to_string();
        assert!(err.contains("train.epochs"), "{err}");

        let text = format!("{MINIMAL}\n[train.loss]\nkind = \"ghm-cwap\"\nalpah = 0.5\n");
        let err = ExperimentConfig::from_toml_str(&text).unwrap_err().to_string();
        assert!(err.contains("train.loss") && err.contains("alpah"), "{err}");
    }

    #[test]
    fn invalid_values_are_config_errors() {
        let text = format!("{MINIMAL}\n[train.loss]\nkind = \"ghm-cwap\"\nalpha = 2.0\n");
        assert!(matches!(ExperimentConfig::from_toml_str(&text), Err(CliError::Config(_))));
        let text = MINIMAL.replace("10.0", "0.5");
        assert!(matches!(ExperimentConfig::from_toml_str(&text), Err(CliError::Config(_))));
        let text = format!("seeds = []\n{MINIMAL}");
        assert!(matches!(ExperimentConfig::from_toml_str(&text), Err(CliError::Config(_))));
    }

    #[test]
    fn overrides_apply() {
        let mut c = ExperimentConfig::from_toml_str(MINIMAL).unwrap();
        c.apply(&Overrides {
            epochs: Some(7),
            seeds: Some(vec![4, 5]),
            loss: Some("focal".into()),
            imbalance_factor: Some(50.0),
            ..Overrides::default()
        })
        .unwrap();
        assert_eq!(c.train.epochs, 7);
        assert_eq!(c.seeds, vec![4, 5]);
        assert_eq!(c.train.loss, LossKind::Focal(FocalConfig::default()));
        let DatasetSource::Synth(s) = &c.dataset else { panic!() };
        assert_eq!(s.imbalance_factor, 50.0);
        assert!(c.apply(&Overrides { loss: Some("nope".into()), ..Overrides::default() }).is_err());
        assert!(c.apply(&Overrides { epochs: Some(0), ..Overrides::default() }).is_err());
    }
}

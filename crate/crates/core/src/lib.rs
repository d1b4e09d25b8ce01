//! Category-wise gradient harmonizing for long-tailed classification.
//!
//! The crate is organised bottom-up:
//!
//! - [`histogram`]: per-category gradient-norm densities over `[0, 1]` with
//!   fixed (URA) or adaptively reassigned (AURA) unit-region widths.
//! - [`category_stats`]: effective sample sizes, intra-category example
//!   weights and the inter-category margin matrix.
//! - [`loss`]: the margin-adjusted, reweighted softmax cross-entropy with a
//!   closed-form backward pass and the gradient-norm difficulty signal.
//! - [`baselines`]: softmax CE, focal loss and class-balanced weights.
//! - [`data`]: long-tailed dataset construction and class grouping.
//! - [`trainer`]: SGD training of linear / one-hidden-layer classifiers with
//!   epoch-lagged statistics.

pub mod baselines;
pub mod category_stats;
pub mod data;
pub mod error;
pub mod histogram;
pub mod loss;
pub mod trainer;

pub use category_stats::{CategoryStats, MarginMatrix, StatsRecord};
pub use data::{DatasetSpec, Group, LabeledDataset};
pub use error::{Error, Result};
pub use histogram::AdaptiveHistogram;
pub use loss::LossConfig;

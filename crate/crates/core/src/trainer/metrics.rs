//! Top-1 accuracy metrics and decision-boundary grids.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use super::model::Model;
use crate::data::{Group, LabeledDataset, GROUP_RULE};
use crate::error::{invalid, Result};

/// Top-1 accuracy overall, per class and per frequency group.
///
/// Accuracies are fractions in `[0, 1]`. Group accuracy pools the examples
/// of every class in the group. Classes without examples report `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub examples: usize,
    pub overall_accuracy: f64,
    pub per_class_accuracy: Vec<Option<f64>>,
    pub group_accuracy: BTreeMap<Group, f64>,
    pub group_examples: BTreeMap<Group, usize>,
    pub group_rule: String,
}

impl EvalMetrics {
    pub fn class_accuracy(&self, class: usize) -> Option<f64> {
        self.per_class_accuracy.get(class).copied().flatten()
    }

    /// Unweighted mean of per-class accuracies (balanced accuracy).
    pub fn mean_class_accuracy(&self) -> f64 {
        let present: Vec<f64> = self.per_class_accuracy.iter().flatten().copied().collect();
        present.iter().sum::<f64>() / present.len().max(1) as f64
    }
}

pub fn evaluate(model: &Model, dataset: &LabeledDataset) -> Result<EvalMetrics> {
    if dataset.is_empty() {
        return invalid("cannot evaluate on an empty dataset");
    }
    if dataset.feature_dim() != model.feature_dim() || dataset.class_count() != model.class_count() {
        return invalid(format!(
            "model expects {} features / {} classes, dataset has {} / {}",
            model.feature_dim(),
            model.class_count(),
            dataset.feature_dim(),
            dataset.class_count()
        ));
    }
    let c = dataset.class_count();
    let mut correct = vec![0usize; c];
    let mut total = vec![0usize; c];
    for (x, &y) in dataset.features().iter().zip(dataset.labels()) {
        total[y] += 1;
        if model.predict(x) == y {
            correct[y] += 1;
        }
    }
    let hits: usize = correct.iter().sum();
    let per_class_accuracy = correct
        .iter()
        .zip(&total)
        .map(|(&k, &n)| (n > 0).then(|| k as f64 / n as f64))
        .collect();
    let mut group_hits: BTreeMap<Group, (usize, usize)> = BTreeMap::new();
    for (class, &group) in dataset.groups().iter().enumerate() {
        let entry = group_hits.entry(group).or_default();
        entry.0 += correct[class];
        entry.1 += total[class];
    }
    let group_examples = group_hits.iter().map(|(&g, &(_, n))| (g, n)).collect();
    let group_accuracy = group_hits
        .into_iter()
        .filter(|(_, (_, n))| *n > 0)
        .map(|(g, (k, n))| (g, k as f64 / n as f64))
        .collect();
    Ok(EvalMetrics {
        examples: dataset.len(),
        overall_accuracy: hits as f64 / dataset.len() as f64,
        per_class_accuracy,
        group_accuracy,
        group_examples,
        group_rule: GROUP_RULE.to_string(),
    })
}

/// Regular grid over an axis-aligned box in the plane.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
    pub nx: usize,
    pub ny: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            x_min: -6.0,
            x_max: 6.0,
            y_min: -6.0,
            y_max: 6.0,
            nx: 121,
            ny: 121,
        }
    }
}

impl GridSpec {
    fn axis(lo: f64, hi: f64, n: usize) -> Vec<f64> {
        if n == 1 {
            return vec![lo];
        }
        (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
    }
}

/// Predicted labels on a grid; `labels[row][col]` is the prediction at
/// `(xs[col], ys[row])`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundaryGrid {
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
    pub labels: Vec<Vec<usize>>,
}

impl BoundaryGrid {
    /// Emit `x,y,label` rows.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["x", "y", "label"])?;
        for (row, y) in self.labels.iter().zip(&self.ys) {
            for (label, x) in row.iter().zip(&self.xs) {
                w.write_record([x.to_string(), y.to_string(), label.to_string()])?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Midpoints between horizontally adjacent cells with different labels
    /// in row `row`.
    pub fn crossings(&self, row: usize) -> Vec<f64> {
        let labels = &self.labels[row];
        (1..labels.len())
            .filter(|&i| labels[i] != labels[i - 1])
            .map(|i| 0.5 * (self.xs[i - 1] + self.xs[i]))
            .collect()
    }
}

/// Evaluate a two-feature model on a regular grid.
pub fn decision_boundary_dump(model: &Model, grid: &GridSpec) -> Result<BoundaryGrid> {
    if model.feature_dim() != 2 {
        return invalid(format!(
            "decision boundaries need 2 features, model has {}",
            model.feature_dim()
        ));
    }
    if grid.nx == 0 || grid.ny == 0 || !(grid.x_max >= grid.x_min && grid.y_max >= grid.y_min) {
        return invalid("grid needs nx, ny >= 1 and max >= min");
    }
    let xs = GridSpec::axis(grid.x_min, grid.x_max, grid.nx);
    let ys = GridSpec::axis(grid.y_min, grid.y_max, grid.ny);
    let labels = ys
        .iter()
        .map(|&y| xs.iter().map(|&x| model.predict(&[x, y])).collect())
        .collect();
    Ok(BoundaryGrid { xs, ys, labels })
}

//! Long-tailed dataset construction.
//!
//! Class `c` of a long-tailed profile holds
//! `round(n_max * IF^(-c / (C - 1)))` examples (at least one), so class 0 is
//! the head and class `C - 1` the tail.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Parameters of a synthetic long-tailed dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub class_count: usize,
    pub max_class_size: usize,
    pub imbalance_factor: f64,
    pub feature_dim: usize,
    pub seed: u64,
}

impl DatasetSpec {
    pub fn class_sizes(&self) -> Result<Vec<usize>> {
        longtailed_sizes(self.class_count, self.max_class_size, self.imbalance_factor)
    }
}

/// Exponentially decaying class sizes from `n_max` down to about `n_max / IF`.
pub fn longtailed_sizes(class_count: usize, max_class_size: usize, imbalance_factor: f64) -> Result<Vec<usize>> {
    if class_count < 2 {
        return invalid(format!("class count must be at least 2, got {class_count}"));
    }
    if max_class_size == 0 {
        return invalid("max class size must be positive");
    }
    if !(imbalance_factor.is_finite() && imbalance_factor >= 1.0) {
        return invalid(format!("imbalance factor must be >= 1, got {imbalance_factor}"));
    }
    let last = (class_count - 1) as f64;
    Ok((0..class_count)
        .map(|c| {
            let n = max_class_size as f64 * imbalance_factor.powf(-(c as f64) / last);
            (n.round() as usize).max(1)
        })
        .collect())
}

/// Frequency group of a class, ordered from most to least frequent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Group {
    Many,
    Medium,
    Few,
    Rare,
}

impl Group {
    pub const ALL: [Group; 4] = [Group::Many, Group::Medium, Group::Few, Group::Rare];

    pub fn name(self) -> &'static str {
        match self {
            Group::Many => "Many",
            Group::Medium => "Medium",
            Group::Few => "Few",
            Group::Rare => "Rare",
        }
    }
}

/// Description of the grouping rule, logged with every experiment.
pub const GROUP_RULE: &str =
    "rank quartiles of descending class size, ties broken by class index";

/// Split classes into contiguous rank quartiles by descending size.
///
/// With fewer than four classes the available labels are
/// `[Many, Rare]` (2) or `[Many, Medium, Rare]` (3).
pub fn assign_groups(class_sizes: &[usize]) -> Vec<Group> {
    let c = class_sizes.len();
    let mut order: Vec<usize> = (0..c).collect();
    order.sort_by(|&a, &b| class_sizes[b].cmp(&class_sizes[a]).then(a.cmp(&b)));
    let labels: &[Group] = match c {
        0 | 1 => &[Group::Many],
        2 => &[Group::Many, Group::Rare],
        3 => &[Group::Many, Group::Medium, Group::Rare],
        _ => &Group::ALL,
    };
    let mut groups = vec![Group::Many; c];
    for (rank, &class) in order.iter().enumerate() {
        groups[class] = labels[rank * labels.len() / c];
    }
    groups
}

/// Labeled feature vectors with their class-size profile and grouping.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    features: Vec<Vec<f64>>,
    labels: Vec<usize>,
    class_sizes: Vec<usize>,
    groups: Vec<Group>,
}

impl LabeledDataset {
    pub fn new(features: Vec<Vec<f64>>, labels: Vec<usize>, class_count: usize) -> Result<Self> {
        if features.len() != labels.len() {
            return invalid("features and labels differ in length");
        }
        if class_count == 0 {
            return invalid("class count must be positive");
        }
        if let Some(first) = features.first() {
            let dim = first.len();
            if dim == 0 {
                return invalid("feature dimension must be positive");
            }
            if features.iter().any(|f| f.len() != dim) {
                return invalid("inconsistent feature dimension");
            }
            if features.iter().flatten().any(|x| !x.is_finite()) {
                return invalid("non-finite feature value");
            }
        }
        let mut class_sizes = vec![0; class_count];
        for &y in &labels {
            if y >= class_count {
                return invalid(format!("label {y} out of range for {class_count} classes"));
            }
            class_sizes[y] += 1;
        }
        let groups = assign_groups(&class_sizes);
        Ok(Self {
            features,
            labels,
            class_sizes,
            groups,
        })
    }

    /// Replace the class grouping, e.g. to evaluate a balanced test set
    /// with the groups of the long-tailed training set.
    pub fn with_groups(mut self, groups: Vec<Group>) -> Result<Self> {
        if groups.len() != self.class_count() {
            return invalid("group assignment does not cover every class");
        }
        self.groups = groups;
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn class_count(&self) -> usize {
        self.class_sizes.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.first().map_or(0, Vec::len)
    }

    pub fn features(&self) -> &[Vec<f64>] {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_sizes(&self) -> &[usize] {
        &self.class_sizes
    }

    pub fn groups(&self) -> &[Group] {
        &self.groups
    }

    pub fn sizes_report(&self) -> SizesReport {
        SizesReport {
            class_sizes: self.class_sizes.clone(),
            groups: self.groups.clone(),
            group_rule: GROUP_RULE.to_string(),
        }
    }

    /// Mean feature vector of each class.
    pub fn class_means(&self) -> Vec<Vec<f64>> {
        let dim = self.feature_dim();
        let mut sums = vec![vec![0.0; dim]; self.class_count()];
        for (x, &y) in self.features.iter().zip(&self.labels) {
            for (s, v) in sums[y].iter_mut().zip(x) {
                *s += v;
            }
        }
        sums.into_iter()
            .zip(&self.class_sizes)
            .map(|(s, &n)| s.into_iter().map(|v| v / n.max(1) as f64).collect())
            .collect()
    }

    /// Write `f0..f{d-1},label` CSV with a header row.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header: Vec<String> = (0..self.feature_dim()).map(|i| format!("f{i}")).collect();
        header.push("label".into());
        w.write_record(&header)?;
        for (x, y) in self.features.iter().zip(&self.labels) {
            let mut row: Vec<String> = x.iter().map(|v| v.to_string()).collect();
            row.push(y.to_string());
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }

    /// Read the CSV format written by [`write_csv`](Self::write_csv).
    ///
    /// Without an explicit `class_count`, it is one more than the largest label.
    pub fn read_csv<R: Read>(reader: R, class_count: Option<usize>) -> Result<Self> {
        let mut r = csv::Reader::from_reader(reader);
        let headers = r.headers()?.clone();
        let dim = headers.len().saturating_sub(1);
        let expected = (0..dim).map(|i| format!("f{i}")).chain(["label".to_string()]);
        if dim == 0 || !headers.iter().eq(expected) {
            return invalid(format!(
                "CSV header must be f0..f{{d-1}},label, got {:?}",
                headers.iter().collect::<Vec<_>>()
            ));
        }
        let mut features = Vec::new();
        let mut labels = Vec::new();
        for (line, record) in r.records().enumerate() {
            let record = record?;
            let parse_err =
                |field: &str| Error::InvalidArgument(format!("row {}: cannot parse {field:?}", line + 1));
            let x = record
                .iter()
                .take(dim)
                .map(|s| s.trim().parse::<f64>().map_err(|_| parse_err(s)))
                .collect::<Result<Vec<_>>>()?;
            let label_field = &record[dim];
            let y = label_field
                .trim()
                .parse::<usize>()
                .map_err(|_| parse_err(label_field))?;
            features.push(x);
            labels.push(y);
        }
        let class_count = match class_count {
            Some(c) => c,
            None => labels.iter().max().map_or(0, |m| m + 1),
        };
        Self::new(features, labels, class_count)
    }

    pub fn load_csv(path: &Path, class_count: Option<usize>) -> Result<Self> {
        Self::read_csv(std::fs::File::open(path)?, class_count)
    }
}

/// `{class_sizes[], groups[], group_rule}` emitted next to datasets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SizesReport {
    pub class_sizes: Vec<usize>,
    pub groups: Vec<Group>,
    pub group_rule: String,
}

/// Lower-triangular `L` with `L L^T = cov`, or an error if `cov` is not
/// symmetric positive definite.
fn cholesky(cov: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let n = cov.len();
    if cov.iter().any(|row| row.len() != n) {
        return invalid("covariance must be square");
    }
    for i in 0..n {
        for j in 0..i {
            if (cov[i][j] - cov[j][i]).abs() > 1e-12 * (1.0 + cov[i][j].abs()) {
                return invalid("covariance must be symmetric");
            }
        }
    }
    let mut l = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..=i {
            let dot: f64 = (0..j).map(|k| l[i][k] * l[j][k]).sum();
            if i == j {
                let d = cov[i][i] - dot;
                if !(d > 0.0 && d.is_finite()) {
                    return invalid("covariance is not positive definite");
                }
                l[i][j] = d.sqrt();
            } else {
                l[i][j] = (cov[i][j] - dot) / l[j][j];
            }
        }
    }
    Ok(l)
}

/// Class-conditional Gaussian samples with long-tailed class sizes.
///
/// Rows are emitted class by class; the output is a pure function of the
/// spec (including its seed), means and covariances.
pub fn synth_gaussian(spec: &DatasetSpec, class_means: &[Vec<f64>], class_covs: &[Vec<Vec<f64>>]) -> Result<LabeledDataset> {
    let sizes = spec.class_sizes()?;
    let dim = spec.feature_dim;
    if dim == 0 {
        return invalid("feature dimension must be positive");
    }
    if class_means.len() != spec.class_count || class_covs.len() != spec.class_count {
        return invalid("need one mean and one covariance per class");
    }
    if class_means.iter().any(|m| m.len() != dim) {
        return invalid("class mean dimension does not match feature_dim");
    }
    let factors = class_covs
        .iter()
        .map(|c| {
            if c.len() != dim {
                return invalid("covariance dimension does not match feature_dim");
            }
            cholesky(c)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let total: usize = sizes.iter().sum();
    let mut features = Vec::with_capacity(total);
    let mut labels = Vec::with_capacity(total);
    for (class, &n) in sizes.iter().enumerate() {
        let mean = &class_means[class];
        let l = &factors[class];
        for _ in 0..n {
            let z: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            let x = (0..dim)
                .map(|i| mean[i] + (0..=i).map(|k| l[i][k] * z[k]).sum::<f64>())
                .collect();
            features.push(x);
            labels.push(class);
        }
    }
    LabeledDataset::new(features, labels, spec.class_count)
}

/// Class means evenly spaced on a circle of `radius` in the first two
/// coordinates, starting at `(-radius, 0)`; remaining coordinates are zero.
pub fn ring_means(class_count: usize, feature_dim: usize, radius: f64) -> Vec<Vec<f64>> {
    (0..class_count)
        .map(|c| {
            let angle = std::f64::consts::PI
                + 2.0 * std::f64::consts::PI * c as f64 / class_count as f64;
            let mut m = vec![0.0; feature_dim];
            m[0] = radius * angle.cos();
            if feature_dim > 1 {
                m[1] = radius * angle.sin();
            }
            // cos(pi) etc. leave ~1e-16 residue; snap it away.
            m.iter_mut().for_each(|v| {
                if v.abs() < 1e-12 {
                    *v = 0.0
                }
            });
            m
        })
        .collect()
}

/// `scale * I` for every class.
pub fn isotropic_covs(class_count: usize, feature_dim: usize, scale: f64) -> Vec<Vec<Vec<f64>>> {
    let cov: Vec<Vec<f64>> = (0..feature_dim)
        .map(|i| (0..feature_dim).map(|j| if i == j { scale } else { 0.0 }).collect())
        .collect();
    vec![cov; class_count]
}

/// Randomly remove examples so class sizes follow the long-tailed profile
/// with `n_max` equal to the largest source class.
///
/// Retained rows keep their original relative order.
pub fn subsample_longtailed(dataset: &LabeledDataset, imbalance_factor: f64, seed: u64) -> Result<LabeledDataset> {
    let source = dataset.class_sizes();
    let n_max = source.iter().copied().max().unwrap_or(0);
    let target = longtailed_sizes(dataset.class_count(), n_max, imbalance_factor)?;
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &y) in dataset.labels().iter().enumerate() {
        by_class.entry(y).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep = Vec::new();
    for (class, &want) in target.iter().enumerate() {
        let mut idx = by_class.remove(&class).unwrap_or_default();
        if idx.len() < want {
            return invalid(format!(
                "class {class} has {} examples, {want} required",
                idx.len()
            ));
        }
        idx.shuffle(&mut rng);
        idx.truncate(want);
        keep.extend(idx);
    }
    keep.sort_unstable();
    let features = keep.iter().map(|&i| dataset.features()[i].clone()).collect();
    let labels = keep.iter().map(|&i| dataset.labels()[i]).collect();
    LabeledDataset::new(features, labels, dataset.class_count())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(c: usize, n: usize, imbalance: f64, seed: u64) -> DatasetSpec {
        DatasetSpec {
            class_count: c,
            max_class_size: n,
            imbalance_factor: imbalance,
            feature_dim: 2,
            seed,
        }
    }

    #[test]
    fn sizes_examples() {
        assert_eq!(longtailed_sizes(5, 300, 1.0).unwrap(), vec![300; 5]);
        assert_eq!(longtailed_sizes(2, 1000, 100.0).unwrap(), vec![1000, 10]);
        let s = longtailed_sizes(10, 5000, 100.0).unwrap();
        assert_eq!(s[0], 5000);
        assert_eq!(s[9], 50);
        assert!(s.windows(2).all(|w| w[0] >= w[1]));
        assert_eq!(longtailed_sizes(3, 5, 1000.0).unwrap(), vec![5, 1, 1]);
    }

    #[test]
    fn sizes_ratio_within_five_percent() {
        for imbalance in [10.0, 100.0, 500.0] {
            let s = longtailed_sizes(10, 5000, imbalance).unwrap();
            let ratio = s[0] as f64 / s[9] as f64;
            assert!((ratio / imbalance - 1.0).abs() < 0.05, "{imbalance}: {ratio}");
        }
    }

    #[test]
    fn sizes_errors() {
        assert!(longtailed_sizes(1, 10, 2.0).is_err());
        assert!(longtailed_sizes(3, 0, 2.0).is_err());
        assert!(longtailed_sizes(3, 10, 0.5).is_err());
        assert!(longtailed_sizes(3, 10, f64::NAN).is_err());
    }

    #[test]
    fn groups_examples() {
        let g = assign_groups(&[80, 70, 60, 50, 40, 30, 20, 10]);
        use Group::*;
        assert_eq!(g, vec![Many, Many, Medium, Medium, Few, Few, Rare, Rare]);
        assert_eq!(assign_groups(&[10, 100]), vec![Rare, Many]);
        assert_eq!(assign_groups(&[5; 4]), vec![Many, Medium, Few, Rare]);
        assert_eq!(assign_groups(&[5, 9, 1]), vec![Medium, Many, Rare]);
        let g = assign_groups(&[9, 8, 7, 6, 5]);
        assert_eq!(g, vec![Many, Many, Medium, Few, Rare]);
    }

    #[test]
    fn synth_is_deterministic() {
        let s = spec(3, 200, 10.0, 42);
        let means = ring_means(3, 2, 2.0);
        let covs = isotropic_covs(3, 2, 1.0);
        let a = synth_gaussian(&s, &means, &covs).unwrap();
        let b = synth_gaussian(&s, &means, &covs).unwrap();
        assert_eq!(a, b);
        let c = synth_gaussian(&spec(3, 200, 10.0, 43), &means, &covs).unwrap();
        assert_ne!(a, c);
        assert_eq!(a.class_sizes(), &[200, 63, 20]);
    }

    #[test]
    fn synth_balanced_counts() {
        let d = synth_gaussian(&spec(4, 50, 1.0, 1), &ring_means(4, 2, 3.0), &isotropic_covs(4, 2, 1.0)).unwrap();
        assert_eq!(d.class_sizes(), &[50; 4]);
    }

    #[test]
    fn synth_class_means_within_three_sigma() {
        let means = vec![vec![-2.0, 0.0], vec![2.0, 0.0]];
        let d = synth_gaussian(&spec(2, 1000, 100.0, 7), &means, &isotropic_covs(2, 2, 1.0)).unwrap();
        for (class, emp) in d.class_means().iter().enumerate() {
            let n = d.class_sizes()[class] as f64;
            for (e, m) in emp.iter().zip(&means[class]) {
                assert!((e - m).abs() < 3.0 / n.sqrt(), "class {class}: {e} vs {m}");
            }
        }
    }

    #[test]
    fn synth_correlated_cov() {
        let cov = vec![vec![2.0, 0.9], vec![0.9, 1.0]];
        let s = DatasetSpec { max_class_size: 20_000, ..spec(2, 1, 1.0, 3) };
        let d = synth_gaussian(&s, &[vec![0.0, 0.0], vec![0.0, 0.0]], &[cov.clone(), cov]).unwrap();
        let n = d.len() as f64;
        let cxy: f64 = d.features().iter().map(|x| x[0] * x[1]).sum::<f64>() / n;
        let cxx: f64 = d.features().iter().map(|x| x[0] * x[0]).sum::<f64>() / n;
        assert!((cxy - 0.9).abs() < 0.05);
        assert!((cxx - 2.0).abs() < 0.1);
    }

    #[test]
    fn synth_rejects_bad_covariance() {
        let bad = vec![vec![vec![1.0, 2.0], vec![2.0, 1.0]]; 2];
        assert!(synth_gaussian(&spec(2, 10, 1.0, 0), &ring_means(2, 2, 1.0), &bad).is_err());
        let asym = vec![vec![vec![1.0, 0.5], vec![0.0, 1.0]]; 2];
        assert!(synth_gaussian(&spec(2, 10, 1.0, 0), &ring_means(2, 2, 1.0), &asym).is_err());
        assert!(synth_gaussian(&spec(2, 10, 1.0, 0), &ring_means(3, 2, 1.0), &isotropic_covs(3, 2, 1.0)).is_err());
    }

    #[test]
    fn ring_layout() {
        let m = ring_means(2, 2, 2.0);
        assert_eq!(m, vec![vec![-2.0, 0.0], vec![2.0, 0.0]]);
        let m = ring_means(4, 3, 1.0);
        assert_eq!(m[1], vec![0.0, -1.0, 0.0]);
    }

    #[test]
    fn subsample_examples() {
        let balanced = synth_gaussian(&spec(2, 1000, 1.0, 5), &ring_means(2, 2, 2.0), &isotropic_covs(2, 2, 1.0)).unwrap();
        let same = subsample_longtailed(&balanced, 1.0, 9).unwrap();
        assert_eq!(same, balanced);
        let lt = subsample_longtailed(&balanced, 100.0, 9).unwrap();
        assert_eq!(lt.class_sizes(), &[1000, 10]);
        assert_eq!(lt, subsample_longtailed(&balanced, 100.0, 9).unwrap());
        assert_ne!(lt, subsample_longtailed(&balanced, 100.0, 10).unwrap());
        // tail rows come from the source
        for (x, &y) in lt.features().iter().zip(lt.labels()) {
            assert!(balanced.features().iter().zip(balanced.labels()).any(|(s, &sy)| s == x && sy == y));
        }
        let short = subsample_longtailed(&lt, 1.0, 0);
        assert!(short.is_err());
    }

    #[test]
    fn csv_round_trip() {
        let d = synth_gaussian(&spec(3, 40, 4.0, 11), &ring_means(3, 2, 2.0), &isotropic_covs(3, 2, 0.5)).unwrap();
        let mut buf = Vec::new();
        d.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("f0,f1,label\n"));
        let back = LabeledDataset::read_csv(buf.as_slice(), None).unwrap();
        assert_eq!(back, d);
    }

    #[test]
    fn csv_errors() {
        assert!(LabeledDataset::read_csv("a,b\n1,2\n".as_bytes(), None).is_err());
        assert!(LabeledDataset::read_csv("f0,label\nx,1\n".as_bytes(), None).is_err());
        assert!(LabeledDataset::read_csv("f0,label\n0.5,-1\n".as_bytes(), None).is_err());
        assert!(LabeledDataset::read_csv("f0,label\n0.5,4\n".as_bytes(), Some(2)).is_err());
    }

    #[test]
    fn dataset_validation() {
        assert!(LabeledDataset::new(vec![vec![0.0]], vec![], 2).is_err());
        assert!(LabeledDataset::new(vec![vec![0.0], vec![0.0, 1.0]], vec![0, 1], 2).is_err());
        assert!(LabeledDataset::new(vec![vec![f64::NAN]], vec![0], 2).is_err());
        let d = LabeledDataset::new(vec![vec![0.0], vec![1.0]], vec![0, 1], 2).unwrap();
        assert!(d.clone().with_groups(vec![Group::Many]).is_err());
        let d = d.with_groups(vec![Group::Rare, Group::Many]).unwrap();
        assert_eq!(d.groups(), &[Group::Rare, Group::Many]);
    }
}

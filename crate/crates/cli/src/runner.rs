//! Running configured experiments and writing their outputs.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use ghm_cwap::data::{assign_groups, subsample_longtailed, synth_gaussian, SizesReport};
use ghm_cwap::trainer::{
    decision_boundary_dump, train_with, BoundaryGrid, EvalMetrics, LossKind, MetricsLog, Model,
};
use ghm_cwap::{Group, LabeledDataset, LossConfig};
use serde::{Deserialize, Serialize};

use crate::config::{DatasetSource, ExperimentConfig, TEST_SEED_OFFSET};
use crate::error::{CliError, CliResult};

/// Training set plus the set used for evaluation.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub train: LabeledDataset,
    /// Held-out data grouped by training class sizes; `None` evaluates on `train`.
    pub test: Option<LabeledDataset>,
}

/// Materialise the dataset for one run seed.
///
/// Synthetic data uses seed `dataset.seed + run_seed` for training and adds
/// [`TEST_SEED_OFFSET`] for the balanced test set.
pub fn prepare_data(source: &DatasetSource, run_seed: u64) -> CliResult<PreparedData> {
    match source {
        DatasetSource::Synth(s) => {
            let seed = s.seed.wrapping_add(run_seed);
            let (means, covs) = (s.class_means(), s.class_covs());
            let train = synth_gaussian(&s.spec(seed), &means, &covs)?;
            let mut test_spec = s.spec(seed.wrapping_add(TEST_SEED_OFFSET));
            test_spec.imbalance_factor = 1.0;
            test_spec.max_class_size = s.test_class_size.unwrap_or(s.max_class_size);
            let test = synth_gaussian(&test_spec, &means, &covs)?.with_groups(train.groups().to_vec())?;
            Ok(PreparedData { train, test: Some(test) })
        }
        DatasetSource::Csv(c) => {
            let full = LabeledDataset::load_csv(&c.path, c.class_count).map_err(CliError::file(&c.path))?;
            let train = match c.imbalance_factor {
                Some(f) => subsample_longtailed(&full, f, run_seed)?,
                None => full,
            };
            let test = match &c.test_path {
                Some(p) => {
                    let t = LabeledDataset::load_csv(p, Some(train.class_count())).map_err(CliError::file(p))?;
                    Some(t.with_groups(assign_groups(train.class_sizes()))?)
                }
                None => None,
            };
            Ok(PreparedData { train, test })
        }
    }
}

/// Everything produced by training one seed.
#[derive(Debug, Clone)]
pub struct RunResult {
    pub seed: u64,
    pub label: String,
    pub model: Model,
    pub log: MetricsLog,
    pub eval: EvalMetrics,
    pub sizes: SizesReport,
    pub boundary: Option<BoundaryGrid>,
}

/// Train one seed: model init and shuffling use `train.seed + seed`.
pub fn run_seed(config: &ExperimentConfig, seed: u64) -> CliResult<RunResult> {
    let data = prepare_data(&config.dataset, seed)?;
    run_on(config, seed, &data)
}

/// Train one seed on already prepared data.
pub fn run_on(config: &ExperimentConfig, seed: u64, data: &PreparedData) -> CliResult<RunResult> {
    let mut train_config = config.train.clone();
    train_config.seed = config.train.seed.wrapping_add(seed);
    let model = Model::new(
        config.model,
        data.train.feature_dim(),
        data.train.class_count(),
        train_config.seed,
    )?;
    let outcome = train_with(model, &data.train, &train_config, data.test.as_ref(), &mut ())?;
    let eval = outcome
        .log
        .final_eval()
        .cloned()
        .expect("the final epoch is always evaluated");
    let boundary = match &config.boundary {
        Some(grid) => Some(decision_boundary_dump(&outcome.model, grid)?),
        None => None,
    };
    Ok(RunResult {
        seed,
        label: config.train.loss.label(),
        model: outcome.model,
        log: outcome.log,
        eval,
        sizes: data.train.sizes_report(),
        boundary,
    })
}

/// Run every seed of `config`, up to `jobs` at a time; results keep seed order.
pub fn run_all(config: &ExperimentConfig, jobs: usize) -> CliResult<Vec<RunResult>> {
    let tasks: Vec<(&ExperimentConfig, u64)> = config.seeds.iter().map(|&s| (config, s)).collect();
    run_tasks(&tasks, jobs)
}

fn run_tasks(tasks: &[(&ExperimentConfig, u64)], jobs: usize) -> CliResult<Vec<RunResult>> {
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<CliResult<RunResult>>>> = Mutex::new((0..tasks.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..jobs.clamp(1, tasks.len().max(1)) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(&(config, seed)) = tasks.get(i) else { break };
                let result = run_seed(config, seed);
                slots.lock().expect("result lock poisoned")[i] = Some(result);
            });
        }
    });
    slots
        .into_inner()
        .expect("result lock poisoned")
        .into_iter()
        .map(|r| r.expect("every task ran"))
        .collect()
}

fn create(path: &Path) -> CliResult<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).map_err(CliError::io(path))?))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| CliError::file(path)(e.into()))?;
    w.write_all(b"\n").map_err(CliError::io(path))?;
    w.flush().map_err(CliError::io(path))
}

/// Save the config as `config.toml` in `dir`.
pub fn echo_config(dir: &Path, config: &ExperimentConfig) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(CliError::io(dir))?;
    let path = dir.join("config.toml");
    std::fs::write(&path, config.to_toml_string()?).map_err(CliError::io(&path))
}

/// Write `metrics.jsonl`, `model.json`, `sizes.json`, `summary.csv` and,
/// when present, `boundary.csv` into `dir`.
pub fn write_run(dir: &Path, run: &RunResult) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(CliError::io(dir))?;
    let path = dir.join("metrics.jsonl");
    run.log.write_jsonl(create(&path)?).map_err(CliError::file(&path))?;
    write_json(&dir.join("model.json"), &run.model)?;
    write_json(&dir.join("sizes.json"), &run.sizes)?;
    write_summary(&dir.join("summary.csv"), std::slice::from_ref(run))?;
    if let Some(grid) = &run.boundary {
        let path = dir.join("boundary.csv");
        grid.write_csv(create(&path)?).map_err(CliError::file(&path))?;
    }
    Ok(())
}

fn group_cell(eval: &EvalMetrics, group: Group) -> String {
    eval.group_accuracy
        .get(&group)
        .map(|a| a.to_string())
        .unwrap_or_default()
}

/// One row per run: final accuracies per group and overall.
pub fn write_summary(path: &Path, runs: &[RunResult]) -> CliResult<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    let to_err = |e: csv::Error| CliError::file(path)(e.into());
    let mut header = vec!["label".to_string(), "seed".into(), "epochs".into()];
    header.extend(Group::ALL.iter().map(|g| g.name().to_lowercase()));
    header.extend(["overall".into(), "mean_class".into(), "final_train_loss".into()]);
    w.write_record(&header).map_err(to_err)?;
    for run in runs {
        let mut row = vec![run.label.clone(), run.seed.to_string(), run.log.epochs.len().to_string()];
        row.extend(Group::ALL.iter().map(|&g| group_cell(&run.eval, g)));
        row.push(run.eval.overall_accuracy.to_string());
        row.push(run.eval.mean_class_accuracy().to_string());
        row.push(run.log.epochs.last().map(|r| r.train_loss.to_string()).unwrap_or_default());
        w.write_record(&row).map_err(to_err)?;
    }
    w.flush().map_err(CliError::io(path))
}

/// Sample mean and standard deviation over seeds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    /// Sample standard deviation (`n - 1` denominator); 0 for a single run.
    pub std: f64,
    pub n: usize,
}

impl Stat {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Self { mean, std, n }
    }

    pub fn std_error(&self) -> f64 {
        self.std / (self.n as f64).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub label: String,
    pub groups: BTreeMap<Group, Stat>,
    pub overall: Stat,
    /// Overall accuracy per seed, in seed order.
    pub overall_by_seed: Vec<f64>,
}

impl ComparisonRow {
    pub fn from_runs(label: String, runs: &[RunResult]) -> Self {
        let mut groups = BTreeMap::new();
        for g in Group::ALL {
            let values: Vec<f64> = runs.iter().filter_map(|r| r.eval.group_accuracy.get(&g).copied()).collect();
            if !values.is_empty() {
                groups.insert(g, Stat::of(&values));
            }
        }
        let overall_by_seed: Vec<f64> = runs.iter().map(|r| r.eval.overall_accuracy).collect();
        Self {
            label,
            groups,
            overall: Stat::of(&overall_by_seed),
            overall_by_seed,
        }
    }
}

/// The ablation rows Softmax, R, A^URA, R+A^URA and R+A^AURA built from `base`.
///
/// GHM-CWAP hyperparameters are taken from `base` when its loss is
/// GHM-CWAP, otherwise defaults are used.
pub fn ablation(base: &ExperimentConfig) -> Vec<ExperimentConfig> {
    let loss = match &base.train.loss {
        LossKind::GhmCwap(c) => c.clone(),
        _ => LossConfig::default(),
    };
    let variant = |intra: bool, inter: bool, adaptive: bool| {
        LossKind::GhmCwap(LossConfig {
            intra_balance: intra,
            inter_balance: inter,
            adaptive_widths: adaptive,
            ..loss.clone()
        })
    };
    [
        LossKind::Softmax,
        variant(true, false, false),
        variant(false, true, false),
        variant(true, true, false),
        variant(true, true, true),
    ]
    .into_iter()
    .map(|kind| {
        let mut c = base.clone();
        c.train.loss = kind;
        c
    })
    .collect()
}

/// Run every config over its seeds and summarise each as one row.
///
/// All configs must share the dataset block and seed list.
pub fn compare(configs: &[ExperimentConfig], jobs: usize) -> CliResult<(Vec<ComparisonRow>, Vec<Vec<RunResult>>)> {
    let Some(first) = configs.first() else {
        return Err(CliError::Config("compare needs at least two configs".into()));
    };
    if configs.len() < 2 {
        return Err(CliError::Config("compare needs at least two configs".into()));
    }
    for (i, c) in configs.iter().enumerate().skip(1) {
        if c.dataset != first.dataset {
            return Err(CliError::Config(format!("config {i} uses a different dataset than config 0")));
        }
        if c.seeds != first.seeds {
            return Err(CliError::Config(format!("config {i} uses different seeds than config 0")));
        }
    }
    let tasks: Vec<(&ExperimentConfig, u64)> = configs
        .iter()
        .flat_map(|c| c.seeds.iter().map(move |&s| (c, s)))
        .collect();
    let mut results = run_tasks(&tasks, jobs)?.into_iter();
    let mut rows = Vec::with_capacity(configs.len());
    let mut runs = Vec::with_capacity(configs.len());
    for c in configs {
        let chunk: Vec<RunResult> = results.by_ref().take(c.seeds.len()).collect();
        rows.push(ComparisonRow::from_runs(c.train.loss.label(), &chunk));
        runs.push(chunk);
    }
    Ok((rows, runs))
}

/// `label,runs,{group}_mean,{group}_std...,overall_mean,overall_std`.
pub fn write_comparison<W: Write>(writer: W, rows: &[ComparisonRow]) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["label".to_string(), "runs".into()];
    for g in Group::ALL {
        let name = g.name().to_lowercase();
        header.push(format!("{name}_mean"));
        header.push(format!("{name}_std"));
    }
    header.extend(["overall_mean".into(), "overall_std".into()]);
    w.write_record(&header)?;
    for row in rows {
        let mut cells = vec![row.label.clone(), row.overall.n.to_string()];
        for g in Group::ALL {
            match row.groups.get(&g) {
                Some(s) => cells.extend([s.mean.to_string(), s.std.to_string()]),
                None => cells.extend([String::new(), String::new()]),
            }
        }
        cells.extend([row.overall.mean.to_string(), row.overall.std.to_string()]);
        w.write_record(&cells)?;
    }
    w.flush()?;
    Ok(())
}

/// Directory name for a loss label, e.g. `R+A^AURA` becomes `r-a-aura`.
pub fn slug(label: &str) -> String {
    let mut out = String::new();
    for ch in label.chars() {
        if ch.is_ascii_alphanumeric() {
            out.push(ch.to_ascii_lowercase());
        } else if !out.ends_with('-') && !out.is_empty() {
            out.push('-');
        }
    }
    out.trim_end_matches('-').to_string()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config(seeds: &str) -> ExperimentConfig {
        ExperimentConfig::from_toml_str(&format!(
            "seeds = {seeds}\n[dataset]\nsource = \"synth\"\nclass_count = 4\nmax_class_size = 60\nimbalance_factor = 10.0\ntest_class_size = 20\n[train]\nepochs = 3\nbatch_size = 16\n"
        ))
        .unwrap()
    }

    #[test]
    fn stat_values() {
        let s = Stat::of(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(s.mean, 2.5);
        assert!((s.std - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert!((s.std_error() - s.std / 2.0).abs() < 1e-15);
        assert_eq!(Stat::of(&[7.0]).std, 0.0);
    }

    #[test]
    fn slugs() {
        assert_eq!(slug("R+A^AURA"), "r-a-aura");
        assert_eq!(slug("softmax"), "softmax");
        assert_eq!(slug("ghm-cwap(off)"), "ghm-cwap-off");
    }

    #[test]
    fn synthetic_test_set_is_balanced_and_grouped_by_training_sizes() {
        let c = config("[0]");
        let data = prepare_data(&c.dataset, 3).unwrap();
        assert_eq!(data.train.class_sizes(), &[60, 28, 13, 6]);
        let test = data.test.unwrap();
        assert_eq!(test.class_sizes(), &[20; 4]);
        assert_eq!(test.groups(), data.train.groups());
        assert_ne!(prepare_data(&c.dataset, 4).unwrap().train, data.train);
    }

    #[test]
    fn parallel_runs_match_sequential() {
        let c = config("[0, 1, 2]");
        let par = run_all(&c, 3).unwrap();
        let seq = run_all(&c, 1).unwrap();
        for (a, b) in par.iter().zip(&seq) {
            assert_eq!(a.seed, b.seed);
            assert_eq!(a.log, b.log);
        }
    }

    #[test]
    fn ablation_rows() {
        let labels: Vec<String> = ablation(&config("[0]")).iter().map(|c| c.train.loss.label()).collect();
        assert_eq!(labels, ["softmax", "R", "A^URA", "R+A^URA", "R+A^AURA"]);
    }

    #[test]
    fn compare_rejects_mismatches() {
        let a = config("[0]");
        let mut b = a.clone();
        let DatasetSource::Synth(s) = &mut b.dataset else { panic!() };
        s.imbalance_factor = 20.0;
        assert!(matches!(compare(&[a.clone(), b], 1), Err(CliError::Config(_))));
        assert!(compare(&[a.clone(), config("[1]")], 1).is_err());
        assert!(compare(&[a], 1).is_err());
    }

    #[test]
    fn identical_configs_give_identical_rows() {
        let a = config("[0, 1]");
        let (rows, _) = compare(&[a.clone(), a], 2).unwrap();
        assert_eq!(rows[0], rows[1]);
        let mut buf = Vec::new();
        write_comparison(&mut buf, &rows).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("label,runs,many_mean,many_std,medium_mean"));
        assert_eq!(text.lines().count(), 3);
    }
}

//! Command-line interface: `synth`, `train`, `eval` and `compare`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use ghm_cwap::data::{assign_groups, SizesReport};
use ghm_cwap::trainer::{decision_boundary_dump, evaluate, GridSpec, Model};
use ghm_cwap::LabeledDataset;

use crate::config::{ExperimentConfig, Overrides};
use crate::error::{CliError, CliResult};
use crate::runner::{self, prepare_data};

#[derive(Debug, Parser)]
#[command(name = "ghm-cwap", version, about = "Long-tailed classification experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the training and test CSVs plus class sizes for one seed.
    Synth {
        #[command(flatten)]
        common: Common,
        /// Run seed to materialise (default: the first configured seed).
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train every configured seed and write metrics, models and summaries.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate a saved model on a CSV dataset and print metrics as JSON.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// `sizes.json` of the training set, for frequency groups.
        #[arg(long)]
        sizes: Option<PathBuf>,
        /// Also write a decision-boundary grid (two-dimensional models only).
        #[arg(long)]
        boundary: Option<PathBuf>,
        /// Write metrics here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run several configs (or the ablation rows of one) and tabulate accuracy.
    Compare {
        #[command(flatten)]
        common: Common,
        /// Additional configs to compare against the first.
        #[arg(long = "with", value_name = "CONFIG")]
        others: Vec<PathBuf>,
        /// Expand the config into Softmax, R, A^URA, R+A^URA and R+A^AURA rows.
        #[arg(long)]
        ablation: bool,
    },
}

#[derive(Debug, Args)]
pub struct Common {
    /// Experiment config (TOML).
    #[arg(long, short)]
    pub config: PathBuf,
    /// Output directory (overrides `output_dir`).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Root for outputs when neither `--out` nor `output_dir` is set.
    #[arg(long, env = "GHM_CWAP_OUT", default_value = "runs")]
    pub out_root: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long = "lr")]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Worker threads inside each training run.
    #[arg(long)]
    pub threads: Option<usize>,
    /// Comma-separated run seeds.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    /// softmax, focal, class-balanced, effective-number or ghm-cwap.
    #[arg(long)]
    pub loss: Option<String>,
    #[arg(long)]
    pub imbalance_factor: Option<f64>,
    /// Runs executed concurrently.
    #[arg(long, default_value_t = default_jobs())]
    pub jobs: usize,
}

fn default_jobs() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

impl Common {
    fn overrides(&self) -> Overrides {
        Overrides {
            epochs: self.epochs,
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            threads: self.threads,
            seeds: self.seeds.clone(),
            loss: self.loss.clone(),
            imbalance_factor: self.imbalance_factor,
            output_dir: self.out.clone(),
        }
    }

    fn load(&self, path: &Path) -> CliResult<ExperimentConfig> {
        let mut config = ExperimentConfig::load(path)?;
        config.apply(&self.overrides())?;
        Ok(config)
    }

    fn output_dir(&self, config: &ExperimentConfig) -> PathBuf {
        config.output_dir.clone().unwrap_or_else(|| {
            let stem = self.config.file_stem().unwrap_or_default();
            self.out_root.join(stem)
        })
    }
}

pub fn execute(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Synth { common, seed } => synth(&common, seed),
        Command::Train { common } => train(&common),
        Command::Eval {
            model,
            data,
            sizes,
            boundary,
            out,
        } => eval(&model, &data, sizes.as_deref(), boundary.as_deref(), out.as_deref()),
        Command::Compare {
            common,
            others,
            ablation,
        } => compare(&common, &others, ablation),
    }
}

fn synth(common: &Common, seed: Option<u64>) -> CliResult<()> {
    let config = common.load(&common.config)?;
    let seed = seed.unwrap_or(config.seeds[0]);
    let dir = common.output_dir(&config);
    let data = prepare_data(&config.dataset, seed)?;
    runner::echo_config(&dir, &config)?;
    let path = dir.join("train.csv");
    data.train.save_csv(&path).map_err(CliError::file(&path))?;
    if let Some(test) = &data.test {
        let path = dir.join("test.csv");
        test.save_csv(&path).map_err(CliError::file(&path))?;
    }
    let path = dir.join("sizes.json");
    let text = serde_json::to_string_pretty(&data.train.sizes_report()).expect("sizes serialize");
    std::fs::write(&path, text + "\n").map_err(CliError::io(&path))?;
    println!("wrote {} training rows to {}", data.train.len(), dir.display());
    Ok(())
}

fn train(common: &Common) -> CliResult<()> {
    let config = common.load(&common.config)?;
    let dir = common.output_dir(&config);
    let runs = runner::run_all(&config, common.jobs)?;
    runner::echo_config(&dir, &config)?;
    for run in &runs {
        runner::write_run(&dir.join(format!("seed-{}", run.seed)), run)?;
    }
    runner::write_summary(&dir.join("summary.csv"), &runs)?;
    for run in &runs {
        println!(
            "{} seed {}: overall accuracy {:.4}",
            run.label, run.seed, run.eval.overall_accuracy
        );
    }
    Ok(())
}

fn eval(
    model_path: &Path,
    data_path: &Path,
    sizes: Option<&Path>,
    boundary: Option<&Path>,
    out: Option<&Path>,
) -> CliResult<()> {
    let file = File::open(model_path).map_err(CliError::io(model_path))?;
    let model: Model = serde_json::from_reader(BufReader::new(file)).map_err(|e| CliError::file(model_path)(e.into()))?;
    let mut data =
        LabeledDataset::load_csv(data_path, Some(model.class_count())).map_err(CliError::file(data_path))?;
    if let Some(path) = sizes {
        let file = File::open(path).map_err(CliError::io(path))?;
        let report: SizesReport =
            serde_json::from_reader(BufReader::new(file)).map_err(|e| CliError::file(path)(e.into()))?;
        if report.class_sizes.len() != model.class_count() {
            return Err(CliError::Config(format!(
                "{} lists {} classes, model has {}",
                path.display(),
                report.class_sizes.len(),
                model.class_count()
            )));
        }
        data = data.with_groups(assign_groups(&report.class_sizes))?;
    }
    let metrics = evaluate(&model, &data)?;
    let text = serde_json::to_string_pretty(&metrics).expect("metrics serialize") + "\n";
    match out {
        Some(path) => std::fs::write(path, text).map_err(CliError::io(path))?,
        None => print!("{text}"),
    }
    if let Some(path) = boundary {
        let grid = decision_boundary_dump(&model, &GridSpec::default())?;
        let file = File::create(path).map_err(CliError::io(path))?;
        grid.write_csv(BufWriter::new(file)).map_err(CliError::file(path))?;
    }
    Ok(())
}

fn compare(common: &Common, others: &[PathBuf], ablation: bool) -> CliResult<()> {
    let base = common.load(&common.config)?;
    let dir = common.output_dir(&base);
    let mut configs = if ablation { runner::ablation(&base) } else { vec![base.clone()] };
    for path in others {
        configs.push(common.load(path)?);
    }
    let (rows, runs) = runner::compare(&configs, common.jobs)?;
    runner::echo_config(&dir, &base)?;
    for (i, (config, variant_runs)) in configs.iter().zip(&runs).enumerate() {
        let sub = dir.join(format!("{i}-{}", runner::slug(&config.train.loss.label())));
        runner::echo_config(&sub, config)?;
        for run in variant_runs {
            runner::write_run(&sub.join(format!("seed-{}", run.seed)), run)?;
        }
    }
    let path = dir.join("comparison.csv");
    let file = File::create(&path).map_err(CliError::io(&path))?;
    runner::write_comparison(BufWriter::new(file), &rows).map_err(|e| CliError::file(&path)(e.into()))?;
    let mut stdout = std::io::stdout().lock();
    runner::write_comparison(&mut stdout, &rows).map_err(|e| CliError::file("<stdout>")(e.into()))?;
    stdout.flush().map_err(CliError::io("<stdout>"))
}

//! SGD training with epoch-lagged gradient-norm statistics.
//!
//! Epoch `t` uses weights and margins built from the histograms filled
//! during epoch `t - 1`; the first epoch runs with unit weights and zero
//! margins. At the end of each epoch the live histograms become immutable
//! snapshots and are replaced by reassigned (AURA) or reset (URA) copies.

mod metrics;
mod model;

use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use metrics::{decision_boundary_dump, evaluate, BoundaryGrid, EvalMetrics, GridSpec};
pub use model::{Activations, Architecture, Model};

use crate::baselines::{self, EffectiveNumberConfig, FocalConfig};
use crate::category_stats::{CategoryStats, MarginMatrix};
use crate::data::LabeledDataset;
use crate::error::{invalid, Error, Result};
use crate::histogram::AdaptiveHistogram;
use crate::loss::{self, LossConfig};

/// Which objective to optimise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LossKind {
    Softmax,
    Focal(FocalConfig),
    /// Cross-entropy with per-class weights proportional to `1 / n_c`.
    ClassBalanced,
    EffectiveNumber(EffectiveNumberConfig),
    GhmCwap(LossConfig),
}

impl Default for LossKind {
    fn default() -> Self {
        LossKind::GhmCwap(LossConfig::default())
    }
}

impl LossKind {
    /// Short row label, following the ablation naming for GHM-CWAP variants.
    pub fn label(&self) -> String {
        match self {
            LossKind::Softmax => "softmax".into(),
            LossKind::Focal(_) => "focal".into(),
            LossKind::ClassBalanced => "class-balanced".into(),
            LossKind::EffectiveNumber(_) => "effective-number".into(),
            LossKind::GhmCwap(c) => {
                let widths = if c.adaptive_widths { "A^AURA" } else { "A^URA" };
                match (c.intra_balance, c.inter_balance) {
                    (false, false) => "ghm-cwap(off)".into(),
                    (true, false) => "R".into(),
                    (false, true) => widths.into(),
                    (true, true) => format!("R+{widths}"),
                }
            }
        }
    }
}

/// Step decay: multiply the learning rate by `factor` every `every` epochs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepDecay {
    pub every: usize,
    pub factor: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr_decay: Option<StepDecay>,
    pub seed: u64,
    pub loss: LossKind,
    /// Evaluate every this many epochs (0: final epoch only).
    pub eval_every: usize,
    /// Worker threads per batch; 1 is the bit-reproducible mode.
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 64,
            learning_rate: 0.05,
            momentum: 0.9,
            weight_decay: 0.0,
            lr_decay: None,
            seed: 0,
            loss: LossKind::default(),
            eval_every: 0,
            threads: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.threads == 0 {
            return invalid("epochs, batch_size and threads must be positive");
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return invalid(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return invalid(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return invalid("weight_decay must be non-negative");
        }
        if let Some(d) = self.lr_decay {
            if d.every == 0 || !(d.factor > 0.0 && d.factor.is_finite()) {
                return invalid("lr_decay needs every >= 1 and a positive factor");
            }
        }
        match &self.loss {
            LossKind::GhmCwap(c) => c.validate(),
            LossKind::Focal(f) if !(f.focusing >= 0.0 && f.focusing.is_finite()) => {
                invalid("focusing must be non-negative")
            }
            LossKind::EffectiveNumber(e) if !(0.0..1.0).contains(&e.beta) => {
                invalid("beta must lie in [0, 1)")
            }
            _ => Ok(()),
        }
    }

    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        match self.lr_decay {
            Some(d) => self.learning_rate * d.factor.powi(((epoch - 1) / d.every) as i32),
            None => self.learning_rate,
        }
    }
}

/// Visiting order of the training set in `epoch` (1-based).
pub fn epoch_order(seed: u64, epoch: usize, len: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut rng);
    order
}

/// Per-category histograms and the statistics derived from the previous epoch.
#[derive(Debug, Clone)]
pub struct EpochState {
    pub live_histograms: Vec<AdaptiveHistogram>,
    pub snapshot_stats: Option<CategoryStats>,
    pub margins: Option<MarginMatrix>,
}

impl EpochState {
    pub fn new(category_count: usize, config: &LossConfig) -> Result<Self> {
        Ok(Self {
            live_histograms: vec![AdaptiveHistogram::new(config.region_count)?; category_count],
            snapshot_stats: None,
            margins: None,
        })
    }

    /// Freeze the live histograms into next epoch's statistics and start
    /// fresh live histograms.
    pub fn finish_epoch(&mut self, config: &LossConfig) -> Result<()> {
        let next = self
            .live_histograms
            .iter()
            .map(|h| {
                if config.adaptive_widths {
                    h.reassign_widths_with(config.width_shift)
                } else {
                    Ok(h.reset_values())
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let snapshots = std::mem::replace(&mut self.live_histograms, next);
        let stats = CategoryStats::new(snapshots, config.alpha)?;
        self.margins = Some(stats.margin_matrix(config.gamma)?);
        self.snapshot_stats = Some(stats);
        Ok(())
    }
}

/// Hooks into the training loop, used for logging and instrumentation.
pub trait TrainObserver {
    fn epoch_started(&mut self, _epoch: usize, _stats: Option<&CategoryStats>, _margins: Option<&MarginMatrix>) {}
    fn example_observed(&mut self, _epoch: usize, _index: usize, _label: usize, _gradient_norm: f64, _weight: f64) {}
    fn epoch_finished(&mut self, _record: &EpochRecord) {}
}

impl TrainObserver for () {}

/// One line of the JSON-lines metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub learning_rate: f64,
    pub train_loss: f64,
    pub mean_weight: f64,
    /// Digest of the snapshots whose statistics were used during this epoch.
    pub consumed_snapshot_digest: Option<String>,
    /// Digest of the snapshots frozen at the end of this epoch.
    pub produced_snapshot_digest: Option<String>,
    /// Effective sizes built at the end of this epoch (used by the next).
    pub effective_sizes: Option<Vec<f64>>,
    pub margin_matrix: Option<Vec<Vec<f64>>>,
    pub region_widths: Option<Vec<Vec<f64>>>,
    pub eval: Option<EvalMetrics>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsLog {
    pub epochs: Vec<EpochRecord>,
}

impl MetricsLog {
    pub fn final_eval(&self) -> Option<&EvalMetrics> {
        self.epochs.iter().rev().find_map(|r| r.eval.as_ref())
    }

    pub fn write_jsonl<W: Write>(&self, mut writer: W) -> Result<()> {
        for record in &self.epochs {
            serde_json::to_writer(&mut writer, record)?;
            writer.write_all(b"\n")?;
        }
        writer.flush()?;
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(reader: R) -> Result<Self> {
        let mut epochs = Vec::new();
        for line in reader.lines() {
            let line = line?;
            if !line.trim().is_empty() {
                epochs.push(serde_json::from_str(&line)?);
            }
        }
        Ok(Self { epochs })
    }
}

/// 64-bit FNV-1a over histogram widths and counts.
pub fn snapshot_digest(snapshots: &[AdaptiveHistogram]) -> String {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    let mut feed = |bytes: &[u8]| {
        for &b in bytes {
            hash ^= b as u64;
            hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
        }
    };
    for h in snapshots {
        feed(&(h.region_count() as u64).to_le_bytes());
        for w in h.widths() {
            feed(&w.to_bits().to_le_bytes());
        }
        for c in h.counts() {
            feed(&c.to_le_bytes());
        }
    }
    format!("{hash:016x}")
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub log: MetricsLog,
    pub state: Option<EpochState>,
}

/// Train with default hooks, evaluating on the training set.
pub fn train(model: Model, dataset: &LabeledDataset, config: &TrainConfig) -> Result<TrainOutcome> {
    train_with(model, dataset, config, None, &mut ())
}

struct StepOutput {
    loss: f64,
    dlogits: Vec<Vec<f64>>,
    norms: Vec<f64>,
    weights: Vec<f64>,
}

/// Precomputed per-class weights for the weighted baselines.
fn class_weights(kind: &LossKind, sizes: &[usize]) -> Result<Option<Vec<f64>>> {
    let non_empty: Vec<usize> = sizes.iter().map(|&n| n.max(1)).collect();
    match kind {
        LossKind::ClassBalanced => baselines::inverse_frequency_weights(&non_empty).map(Some),
        LossKind::EffectiveNumber(cfg) => baselines::effective_number_weights(&non_empty, cfg).map(Some),
        _ => Ok(None),
    }
}

fn compute_loss(
    kind: &LossKind,
    class_weights: Option<&[f64]>,
    state: Option<&EpochState>,
    logits: &[Vec<f64>],
    labels: &[usize],
) -> Result<StepOutput> {
    if let LossKind::GhmCwap(cfg) = kind {
        let state = state.expect("GHM-CWAP training keeps epoch state");
        let out = loss::batch_loss(
            logits,
            labels,
            state.snapshot_stats.as_ref(),
            state.margins.as_ref(),
            cfg,
        )?;
        return Ok(StepOutput {
            loss: out.loss,
            dlogits: out.gradients,
            norms: out.gradient_norms,
            weights: out.weights,
        });
    }
    let scale = 1.0 / logits.len() as f64;
    let mut total = 0.0;
    let mut dlogits = Vec::with_capacity(logits.len());
    let mut weights = Vec::with_capacity(logits.len());
    for (z, &y) in logits.iter().zip(labels) {
        let (l, g) = match kind {
            LossKind::Focal(cfg) => baselines::focal_forward_backward(z, y, cfg)?,
            _ => {
                let w = class_weights.map_or(1.0, |w| w[y]);
                weights.push(w);
                baselines::weighted_cross_entropy(z, y, w)?
            }
        };
        total += l;
        dlogits.push(g.into_iter().map(|v| v * scale).collect());
    }
    if weights.is_empty() {
        weights = vec![1.0; logits.len()];
    }
    let zero = vec![0.0; logits[0].len()];
    let norms = logits
        .iter()
        .zip(labels)
        .map(|(z, &y)| loss::gradient_norm(z, y, &zero))
        .collect::<Result<Vec<_>>>()?;
    Ok(StepOutput {
        loss: total * scale,
        dlogits,
        norms,
        weights,
    })
}

fn forward_range(model: &Model, data: &LabeledDataset, idx: &[usize]) -> Vec<(Vec<f64>, Activations)> {
    idx.iter().map(|&i| model.forward(&data.features()[i])).collect()
}

fn backward_range(
    model: &Model,
    data: &LabeledDataset,
    idx: &[usize],
    acts: &[(Vec<f64>, Activations)],
    dlogits: &[Vec<f64>],
) -> Vec<f64> {
    let mut grad = vec![0.0; model.params().len()];
    for ((&i, (_, a)), dz) in idx.iter().zip(acts).zip(dlogits) {
        model.accumulate_gradient(&data.features()[i], a, dz, &mut grad);
    }
    grad
}

fn shard_bounds(len: usize, shards: usize) -> Vec<(usize, usize)> {
    let shards = shards.min(len).max(1);
    (0..shards)
        .map(|s| (s * len / shards, (s + 1) * len / shards))
        .collect()
}

/// Train `model` on `dataset`, evaluating on `eval` (or the training set).
pub fn train_with(
    mut model: Model,
    dataset: &LabeledDataset,
    config: &TrainConfig,
    eval: Option<&LabeledDataset>,
    observer: &mut dyn TrainObserver,
) -> Result<TrainOutcome> {
    config.validate()?;
    if dataset.is_empty() {
        return invalid("training set is empty");
    }
    if dataset.feature_dim() != model.feature_dim() || dataset.class_count() != model.class_count() {
        return invalid("model and dataset dimensions differ");
    }
    let eval_set = eval.unwrap_or(dataset);
    let class_weights = class_weights(&config.loss, dataset.class_sizes())?;
    let ghm = match &config.loss {
        LossKind::GhmCwap(cfg) => Some(cfg),
        _ => None,
    };
    let mut state = match ghm {
        Some(cfg) => Some(EpochState::new(dataset.class_count(), cfg)?),
        None => None,
    };

    let mut velocity = vec![0.0; model.params().len()];
    let mut log = MetricsLog::default();
    for epoch in 1..=config.epochs {
        let lr = config.learning_rate_at(epoch);
        let consumed = state.as_ref().and_then(|s| {
            s.snapshot_stats
                .as_ref()
                .map(|st| snapshot_digest(st.snapshots()))
        });
        if let Some(s) = &state {
            observer.epoch_started(epoch, s.snapshot_stats.as_ref(), s.margins.as_ref());
        } else {
            observer.epoch_started(epoch, None, None);
        }

        let order = epoch_order(config.seed, epoch, dataset.len());
        let mut epoch_loss = 0.0;
        let mut weight_sum = 0.0;
        for (batch, idx) in order.chunks(config.batch_size).enumerate() {
            let shards = shard_bounds(idx.len(), config.threads);
            let acts: Vec<(Vec<f64>, Activations)> = if shards.len() > 1 {
                std::thread::scope(|scope| {
                    let handles: Vec<_> = shards
                        .iter()
                        .map(|&(a, b)| {
                            let model = &model;
                            scope.spawn(move || forward_range(model, dataset, &idx[a..b]))
                        })
                        .collect();
                    handles
                        .into_iter()
                        .flat_map(|h| h.join().expect("forward worker panicked"))
                        .collect()
                })
            } else {
                forward_range(&model, dataset, idx)
            };
            let logits: Vec<Vec<f64>> = acts.iter().map(|(z, _)| z.clone()).collect();
            if let Some(bad) = logits.iter().flatten().find(|v| !v.is_finite()) {
                return Err(Error::Diverged {
                    epoch,
                    batch,
                    loss: *bad,
                });
            }
            let labels: Vec<usize> = idx.iter().map(|&i| dataset.labels()[i]).collect();
            let step = compute_loss(
                &config.loss,
                class_weights.as_deref(),
                state.as_ref(),
                &logits,
                &labels,
            )?;
            if !step.loss.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    batch,
                    loss: step.loss,
                });
            }

            let grad = if shards.len() > 1 {
                let live = state.as_ref().map(|s| &s.live_histograms);
                let results: Vec<(Vec<f64>, Option<Vec<AdaptiveHistogram>>)> = std::thread::scope(|scope| {
                    let handles: Vec<_> = shards
                        .iter()
                        .map(|&(a, b)| {
                            let (model, acts, step, labels) = (&model, &acts, &step, &labels);
                            scope.spawn(move || {
                                let g = backward_range(model, dataset, &idx[a..b], &acts[a..b], &step.dlogits[a..b]);
                                let local = live.map(|hs| {
                                    let mut local: Vec<_> = hs.iter().map(|h| h.reset_values()).collect();
                                    for k in a..b {
                                        local[labels[k]]
                                            .accumulate(step.norms[k])
                                            .expect("gradient norms lie in [0, 1]");
                                    }
                                    local
                                });
                                (g, local)
                            })
                        })
                        .collect();
                    handles
                        .into_iter()
                        .map(|h| h.join().expect("backward worker panicked"))
                        .collect()
                });
                let mut total = vec![0.0; model.params().len()];
                for (g, local) in results {
                    for (t, v) in total.iter_mut().zip(g) {
                        *t += v;
                    }
                    if let (Some(s), Some(local)) = (state.as_mut(), local) {
                        for (live, shard) in s.live_histograms.iter_mut().zip(&local) {
                            live.merge_from(shard)?;
                        }
                    }
                }
                total
            } else {
                if let Some(s) = state.as_mut() {
                    for (&y, &g) in labels.iter().zip(&step.norms) {
                        s.live_histograms[y].accumulate(g)?;
                    }
                }
                backward_range(&model, dataset, idx, &acts, &step.dlogits)
            };
            for (k, &i) in idx.iter().enumerate() {
                observer.example_observed(epoch, i, labels[k], step.norms[k], step.weights[k]);
            }

            let params = model.params_mut();
            for ((p, v), g) in params.iter_mut().zip(velocity.iter_mut()).zip(&grad) {
                let g = g + config.weight_decay * *p;
                *v = config.momentum * *v + g;
                *p -= lr * *v;
            }
            epoch_loss += step.loss * idx.len() as f64;
            weight_sum += step.weights.iter().sum::<f64>();
        }

        let mut record = EpochRecord {
            epoch,
            learning_rate: lr,
            train_loss: epoch_loss / dataset.len() as f64,
            mean_weight: weight_sum / dataset.len() as f64,
            consumed_snapshot_digest: consumed,
            produced_snapshot_digest: None,
            effective_sizes: None,
            margin_matrix: None,
            region_widths: None,
            eval: None,
        };
        if let (Some(s), Some(cfg)) = (state.as_mut(), ghm) {
            s.finish_epoch(cfg)?;
            let stats = s.snapshot_stats.as_ref().expect("set by finish_epoch");
            record.produced_snapshot_digest = Some(snapshot_digest(stats.snapshots()));
            record.effective_sizes = Some(stats.effective_sizes().to_vec());
            record.margin_matrix = s.margins.as_ref().map(|m| m.entries().to_vec());
            record.region_widths = Some(s.live_histograms.iter().map(|h| h.widths().to_vec()).collect());
        }
        let due = config.eval_every > 0 && epoch % config.eval_every == 0;
        if due || epoch == config.epochs {
            record.eval = Some(evaluate(&model, eval_set)?);
        }
        observer.epoch_finished(&record);
        log.epochs.push(record);
    }
    Ok(TrainOutcome { model, log, state })
}

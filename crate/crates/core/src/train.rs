//! Mini-batch optimization: Adam with gradient clipping, seeded epoch
//! shuffling, early stopping on denormalized validation MSE, and the
//! coordinate-descent hyperparameter search (expert count first, then the
//! loss weights, then sequence lengths).
//!
//! Determinism contract: identical (config, dataset, seed) reproduce
//! bit-identical loss histories. Per-sample gradients may be computed in
//! parallel, but they are always reduced sequentially in sample order, so
//! thread count never changes a result.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{minmax_apply_series, minmax_fit, minmax_invert, FlowSeries, NormStats};
use crate::fusion::{make_dataset, DatasetSplits, FusionConfig, InputSample};
use crate::graph::Graph;
use crate::losses::{total_loss_on_graph, LossConfig};
use crate::model::forward_on_graph;
use crate::model::{forward_with, leaf_params, ForwardMode, ModelConfig, ModelParams};
use crate::par::map_ordered;
use crate::tensor::Tensor;

// ── Configuration ───────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    /// Zero is allowed and leaves parameters untouched (a useful identity
    /// check); negative rates are rejected.
    pub learning_rate: f64,
    pub max_epochs: usize,
    /// Epochs without a validation improvement before stopping.
    pub patience: usize,
    /// Seeds the per-epoch shuffle (and, by convention, the caller's
    /// parameter initialization).
    pub seed: u64,
    /// Global-norm gradient clip; the determinant term is unbounded below,
    /// so some restraint on step size is needed. Non-positive disables.
    pub clip_norm: f64,
    pub loss: LossConfig,
    /// Gate configuration trained against; `Full` unless deliberately
    /// training an ablated variant.
    pub mode: ForwardMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            learning_rate: 1e-3,
            max_epochs: 50,
            patience: 5,
            seed: 0,
            clip_norm: 5.0,
            loss: LossConfig {
                lambda_er: 0.0,
                lambda_eid: 0.0,
                n_top: 1,
                er_variant: crate::losses::ErVariant::LogMixture,
            },
            mode: ForwardMode::Full,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 1 {
            return Err(Error::config("batch size must be at least 1"));
        }
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return Err(Error::config(format!(
                "learning rate must be finite and non-negative, got {}",
                self.learning_rate
            )));
        }
        if self.patience < 1 {
            return Err(Error::config("patience must be at least 1"));
        }
        Ok(())
    }
}

// ── Gradient computation ────────────────────────────────────────────────

/// Scalar values of the loss terms at one point.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub mse: f64,
    pub l_er: f64,
    pub l_eid: f64,
    pub total: f64,
}

impl LossParts {
    fn scaled(self, c: f64) -> LossParts {
        LossParts {
            mse: self.mse * c,
            l_er: self.l_er * c,
            l_eid: self.l_eid * c,
            total: self.total * c,
        }
    }

    fn add(&mut self, other: LossParts) {
        self.mse += other.mse;
        self.l_er += other.l_er;
        self.l_eid += other.l_eid;
        self.total += other.total;
    }
}

/// Loss terms and d(total)/dθ for a single sample, parameter tensors
/// aligned with `params`. Parameters a gate ablation cuts out of the graph
/// get zero gradients.
pub fn sample_loss_grads(
    params: &ModelParams,
    sample: &InputSample,
    loss: &LossConfig,
    mode: ForwardMode,
) -> Result<(LossParts, Vec<Tensor>)> {
    let mut g = Graph::new();
    let pv = leaf_params(&mut g, params);
    let x = g.leaf(sample.x.clone());
    let trace = forward_on_graph(&mut g, params, &pv, x, &sample.external, mode)?;
    let y = g.leaf(sample.y.clone());
    let lv = total_loss_on_graph(&mut g, &trace, y, loss)?;
    let parts = LossParts {
        mse: g.item(lv.mse),
        l_er: g.item(lv.l_er),
        l_eid: g.item(lv.l_eid),
        total: g.item(lv.total),
    };
    let mut grads = g.backward(lv.total);
    let gvec = pv
        .vars
        .iter()
        .zip(params.tensors())
        .map(|(&v, t)| grads.take(v).unwrap_or_else(|| Tensor::zeros(t.shape().to_vec())))
        .collect();
    Ok((parts, gvec))
}

/// Mean loss terms and mean gradient over a batch. Per-sample work may run
/// on multiple threads; the reduction is sequential in sample order.
pub fn batch_loss_grads(
    params: &ModelParams,
    samples: &[&InputSample],
    loss: &LossConfig,
    mode: ForwardMode,
) -> Result<(LossParts, Vec<Tensor>)> {
    assert!(!samples.is_empty());
    let results = map_ordered(samples, |s| sample_loss_grads(params, s, loss, mode));
    let mut parts = LossParts::default();
    let mut acc: Vec<Tensor> =
        params.tensors().iter().map(|t| Tensor::zeros(t.shape().to_vec())).collect();
    for r in results {
        let (p, gs) = r?;
        parts.add(p);
        for (a, g) in acc.iter_mut().zip(&gs) {
            for (av, gv) in a.data_mut().iter_mut().zip(g.data()) {
                *av += gv;
            }
        }
    }
    let inv = 1.0 / samples.len() as f64;
    for a in &mut acc {
        for v in a.data_mut() {
            *v *= inv;
        }
    }
    Ok((parts.scaled(inv), acc))
}

/// Mean total loss over samples, value only (no backward pass); the
/// objective function handed to `finite_diff_check`.
pub fn batch_loss_value(
    params: &ModelParams,
    samples: &[&InputSample],
    loss: &LossConfig,
    mode: ForwardMode,
) -> Result<f64> {
    assert!(!samples.is_empty());
    let results = map_ordered(samples, |s| -> Result<f64> {
        let mut g = Graph::new();
        let pv = leaf_params(&mut g, params);
        let x = g.leaf(s.x.clone());
        let trace = forward_on_graph(&mut g, params, &pv, x, &s.external, mode)?;
        let y = g.leaf(s.y.clone());
        let lv = total_loss_on_graph(&mut g, &trace, y, loss)?;
        Ok(g.item(lv.total))
    });
    let mut sum = 0.0;
    for r in results {
        sum += r?;
    }
    Ok(sum / samples.len() as f64)
}

fn global_norm(grads: &[Tensor]) -> f64 {
    grads
        .iter()
        .flat_map(|t| t.data())
        .map(|&v| v * v)
        .sum::<f64>()
        .sqrt()
}

/// Scale `grads` in place so their global norm is at most `clip`.
fn clip_global_norm(grads: &mut [Tensor], clip: f64) -> f64 {
    let norm = global_norm(grads);
    if clip > 0.0 && norm > clip {
        let s = clip / norm;
        for g in grads {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }
    norm
}

// ── Adam ────────────────────────────────────────────────────────────────

/// Adaptive-moment gradient descent with the conventional decay defaults.
pub struct Adam {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn new(params: &ModelParams) -> Self {
        let zeros: Vec<Tensor> =
            params.tensors().iter().map(|t| Tensor::zeros(t.shape().to_vec())).collect();
        Adam { m: zeros.clone(), v: zeros, step: 0, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    pub fn apply(&mut self, params: &mut ModelParams, grads: &[Tensor], lr: f64) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for ti in 0..grads.len() {
            let t = params.tensors_mut()[ti].data_mut();
            let m = self.m[ti].data_mut();
            let v = self.v[ti].data_mut();
            let g = grads[ti].data();
            for j in 0..g.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                t[j] -= lr * (m[j] / bc1) / ((v[j] / bc2).sqrt() + self.eps);
            }
        }
    }
}

// ── Validation ──────────────────────────────────────────────────────────

/// Mean squared error of the model over `samples` on the denormalized
/// (original flow-count) scale.
pub fn validation_mse(
    params: &ModelParams,
    samples: &[InputSample],
    norm: &NormStats,
    mode: ForwardMode,
) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::data("validation set is empty"));
    }
    let results = map_ordered(samples, |s| -> Result<(f64, usize)> {
        let trace = forward_with(params, s, mode)?;
        let pred = minmax_invert(&trace.prediction, norm);
        let truth = minmax_invert(&s.y, norm);
        let sse = pred
            .data()
            .iter()
            .zip(truth.data())
            .map(|(p, t)| (p - t) * (p - t))
            .sum::<f64>();
        Ok((sse, pred.numel()))
    });
    let mut sse = 0.0;
    let mut n = 0usize;
    for r in results {
        let (s, c) = r?;
        sse += s;
        n += c;
    }
    Ok(sse / n as f64)
}

// ── The training loop ───────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct StepRecord {
    pub step: usize,
    pub mse: f64,
    pub l_er: f64,
    pub l_eid: f64,
    pub total: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_mse: f64,
    pub train_er: f64,
    pub train_eid: f64,
    pub train_total: f64,
    pub val_mse: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxEpochs,
    EarlyStop,
    /// A loss, gradient, or validation score went non-finite; the result
    /// carries the last finite best snapshot.
    Diverged,
}

#[derive(Debug)]
pub struct TrainResult {
    /// Parameters of the best validation epoch, already passed through f32
    /// so a checkpoint of them reloads bit-exactly.
    pub best: ModelParams,
    /// 0 means the untrained initialization was never beaten.
    pub best_epoch: usize,
    pub best_val_mse: f64,
    /// Adam moments and step count as of the best epoch, for continuation.
    pub best_adam: (Vec<Tensor>, Vec<Tensor>, u64),
    /// Number of the last epoch actually run (offset included on resume).
    pub epochs_completed: usize,
    pub history: Vec<EpochRecord>,
    pub steps: Vec<StepRecord>,
    pub stop: StopReason,
}

/// Progress carried over when continuing a saved run: epoch numbering
/// resumes after `epochs_completed` and the optimizer moments pick up
/// where they left off (freshly zeroed when `adam` is `None`).
#[derive(Clone, Debug, Default)]
pub struct ResumeState {
    pub epochs_completed: usize,
    pub best_epoch: usize,
    /// (m, v, step), tensors aligned with the parameter layout.
    pub adam: Option<(Vec<Tensor>, Vec<Tensor>, u64)>,
}

/// Quantized copy used for snapshots and validation, so every reported
/// validation score is exactly reproducible from the saved checkpoint.
fn snapshot(params: &ModelParams) -> ModelParams {
    let mut s = params.clone();
    s.quantize_f32();
    s
}

/// Optimize `init` on the train split, early-stopping on validation MSE.
pub fn train(
    splits: &DatasetSplits,
    norm: &NormStats,
    init: ModelParams,
    cfg: &TrainConfig,
) -> Result<TrainResult> {
    train_from(splits, norm, init, cfg, &ResumeState::default())
}

/// [`train`], continuing from a previous run's state; `cfg.max_epochs`
/// counts additional epochs for this invocation.
pub fn train_from(
    splits: &DatasetSplits,
    norm: &NormStats,
    init: ModelParams,
    cfg: &TrainConfig,
    resume: &ResumeState,
) -> Result<TrainResult> {
    cfg.validate()?;
    cfg.loss.validate(init.cfg.k)?;
    if splits.train.is_empty() {
        return Err(Error::data("training set is empty"));
    }

    let mut params = init;
    let mut opt = Adam::new(&params);
    if let Some((m, v, step)) = &resume.adam {
        let shapes_match = m.len() == opt.m.len()
            && v.len() == opt.v.len()
            && m.iter().zip(&opt.m).all(|(a, b)| a.shape() == b.shape())
            && v.iter().zip(&opt.v).all(|(a, b)| a.shape() == b.shape());
        if !shapes_match {
            return Err(Error::data(
                "saved optimizer state does not match the model's parameter layout",
            ));
        }
        opt.m = m.clone();
        opt.v = v.clone();
        opt.step = *step;
    }
    let mut best = snapshot(&params);
    let mut best_val = validation_mse(&best, &splits.val, norm, cfg.mode)?;
    let mut best_epoch = resume.best_epoch;
    let mut best_adam = (opt.m.clone(), opt.v.clone(), opt.step);
    if !best_val.is_finite() {
        return Err(Error::numeric("validation MSE is non-finite at initialization"));
    }

    let offset = resume.epochs_completed;
    let mut history = Vec::new();
    let mut steps = Vec::new();
    let mut stop = StopReason::MaxEpochs;
    let mut since_best = 0usize;
    let mut step_no = opt.step as usize;
    let n = splits.train.len();

    'epochs: for epoch in offset + 1..=offset + cfg.max_epochs {
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(epoch as u64);
        order.shuffle(&mut rng);

        let mut epoch_sum = LossParts::default();
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&InputSample> = chunk.iter().map(|&i| &splits.train[i]).collect();
            // A numeric failure here (overflowed parameters poisoning the
            // forward pass) is divergence, not a caller mistake: abort and
            // hand back the last finite snapshot.
            let (parts, mut grads) = match batch_loss_grads(&params, &batch, &cfg.loss, cfg.mode)
            {
                Ok(x) => x,
                Err(Error::Numeric(_)) => {
                    stop = StopReason::Diverged;
                    break 'epochs;
                }
                Err(e) => return Err(e),
            };
            let norm_val = clip_global_norm(&mut grads, cfg.clip_norm);
            if !parts.total.is_finite() || !norm_val.is_finite() {
                stop = StopReason::Diverged;
                break 'epochs;
            }
            step_no += 1;
            steps.push(StepRecord {
                step: step_no,
                mse: parts.mse,
                l_er: parts.l_er,
                l_eid: parts.l_eid,
                total: parts.total,
            });
            epoch_sum.add(parts.scaled(chunk.len() as f64));
            opt.apply(&mut params, &grads, cfg.learning_rate);
        }

        let candidate = snapshot(&params);
        let val = match validation_mse(&candidate, &splits.val, norm, cfg.mode) {
            Ok(v) => v,
            Err(Error::Numeric(_)) => f64::NAN,
            Err(e) => return Err(e),
        };
        let mean = epoch_sum.scaled(1.0 / n as f64);
        history.push(EpochRecord {
            epoch,
            train_mse: mean.mse,
            train_er: mean.l_er,
            train_eid: mean.l_eid,
            train_total: mean.total,
            val_mse: val,
        });
        if !val.is_finite() {
            stop = StopReason::Diverged;
            break;
        }
        if val < best_val {
            best_val = val;
            best = candidate;
            best_epoch = epoch;
            best_adam = (opt.m.clone(), opt.v.clone(), opt.step);
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                stop = StopReason::EarlyStop;
                break;
            }
        }
    }

    let epochs_completed = history.last().map_or(offset, |r: &EpochRecord| r.epoch);
    Ok(TrainResult {
        best,
        best_epoch,
        best_val_mse: best_val,
        best_adam,
        epochs_completed,
        history,
        steps,
        stop,
    })
}

// ── CSV logs ────────────────────────────────────────────────────────────

pub const HISTORY_CSV_HEADER: &str = "epoch,train_mse,train_er,train_eid,train_total,val_mse";
pub const STEPS_CSV_HEADER: &str = "step,mse,l_er,l_eid,total";

/// Data rows only, one line each — callers appending to an existing log
/// reuse this so resumed runs keep an identical format.
pub fn history_csv_rows(rows: &[EpochRecord]) -> String {
    let mut s = String::new();
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.epoch, r.train_mse, r.train_er, r.train_eid, r.train_total, r.val_mse
        ));
    }
    s
}

pub fn steps_csv_rows(rows: &[StepRecord]) -> String {
    let mut s = String::new();
    for r in rows {
        s.push_str(&format!("{},{},{},{},{}\n", r.step, r.mse, r.l_er, r.l_eid, r.total));
    }
    s
}

pub fn write_history_csv(path: &Path, rows: &[EpochRecord]) -> Result<()> {
    std::fs::write(path, format!("{HISTORY_CSV_HEADER}\n{}", history_csv_rows(rows)))?;
    Ok(())
}

pub fn write_steps_csv(path: &Path, rows: &[StepRecord]) -> Result<()> {
    std::fs::write(path, format!("{STEPS_CSV_HEADER}\n{}", steps_csv_rows(rows)))?;
    Ok(())
}

// ── Dataset preparation ─────────────────────────────────────────────────

/// Fit normalization on the training window only (snapshots up to the last
/// training target), normalize the whole series, and build the splits.
pub fn prepare_dataset(
    series: &FlowSeries,
    externals: &[Vec<f64>],
    fusion: &FusionConfig,
    target: (f64, f64),
) -> Result<(DatasetSplits, NormStats)> {
    fusion.validate()?;
    let first = series.first_t().ok_or_else(|| Error::data("empty series"))?;
    let start = first + fusion.history_needed();
    let last = first + series.len().saturating_sub(1);
    if start + 1 > last {
        return Err(Error::data(format!(
            "series of {} snapshots is shorter than the {}-step history window",
            series.len(),
            fusion.history_needed() + 2
        )));
    }
    let n = last - start;
    let trainval = n * 8 / 10;
    let train_count = trainval * 8 / 10;
    // Anchors run from `start`; the last training target is interval
    // start + train_count, position start + train_count − first.
    let fit_end = start + train_count.max(1) - first;
    let window = series.window(0, fit_end + 1);
    let stats = minmax_fit(&window, target)?;
    let normed = minmax_apply_series(series, &stats);
    let splits = make_dataset(&normed, externals, fusion)?;
    Ok((splits, stats))
}

// ── Gradient verification ───────────────────────────────────────────────

/// Compare analytic gradients against central finite differences of `f`,
/// coordinate by coordinate, returning the largest relative error among
/// coordinates with |gradient| > 1e-8.
pub fn finite_diff_check<F>(
    f: &mut F,
    params: &ModelParams,
    grads: &[Tensor],
    eps: f64,
) -> Result<f64>
where
    F: FnMut(&ModelParams) -> Result<f64>,
{
    if eps <= 0.0 || !eps.is_finite() {
        return Err(Error::config(format!("step size must be positive, got {eps}")));
    }
    if params.num_scalars() > 10_000 {
        return Err(Error::config(format!(
            "finite differences over {} parameters would take too long; cap is 10000",
            params.num_scalars()
        )));
    }
    if grads.len() != params.len() {
        return Err(Error::config("gradient list does not match parameter list"));
    }
    let mut work = params.clone();
    let mut max_rel: f64 = 0.0;
    for ti in 0..params.len() {
        for j in 0..params.tensors()[ti].numel() {
            let orig = work.tensors()[ti].data()[j];
            work.tensors_mut()[ti].data_mut()[j] = orig + eps;
            let fp = f(&work)?;
            work.tensors_mut()[ti].data_mut()[j] = orig - eps;
            let fm = f(&work)?;
            work.tensors_mut()[ti].data_mut()[j] = orig;
            if !fp.is_finite() || !fm.is_finite() {
                return Err(Error::numeric(format!(
                    "objective is non-finite near parameter {ti}[{j}]"
                )));
            }
            let fd = (fp - fm) / (2.0 * eps);
            let g = grads[ti].data()[j];
            if g.abs() > 1e-8 {
                max_rel = max_rel.max((fd - g).abs() / g.abs());
            }
        }
    }
    Ok(max_rel)
}

// ── Hyperparameter search ───────────────────────────────────────────────

/// Menus for the coordinate-descent search. Empty menus keep the base
/// value for that coordinate.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SearchSpace {
    pub ks: Vec<usize>,
    pub lambda_er: Vec<f64>,
    pub lambda_eid: Vec<f64>,
    /// Sequence-length (closeness/period/trend) variants.
    pub fusions: Vec<FusionConfig>,
    /// Repetitions per cell; three by convention.
    pub seeds: Vec<u64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SearchPhase {
    ExpertCount,
    LossWeights,
    SequenceLengths,
}

/// One full configuration point visited by the search.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchPoint {
    pub k: usize,
    pub lambda_er: f64,
    pub lambda_eid: f64,
    pub fusion: FusionConfig,
}

/// One training run (a cell × one seed).
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SearchRow {
    pub phase: SearchPhase,
    pub point: SearchPoint,
    pub seed: u64,
    pub val_mse: f64,
    pub best_epoch: usize,
}

/// Per-cell aggregate over the repeated seeds — the bar-plot table.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SearchCell {
    pub phase: SearchPhase,
    pub point: SearchPoint,
    pub mean_val_mse: f64,
    /// Sample variance over seeds (0 for a single seed).
    pub var_val_mse: f64,
}

pub struct SearchReport {
    pub rows: Vec<SearchRow>,
    pub cells: Vec<SearchCell>,
    pub best: SearchPoint,
    pub best_mean_val_mse: f64,
}

fn model_for(base: &ModelConfig, k: usize, fusion: &FusionConfig) -> ModelConfig {
    ModelConfig { k, flow_channels: fusion.flow_channels(), ..base.clone() }
}

/// Search expert count first (loss weights fixed), then the loss weights
/// (expert count fixed at its optimum), then sequence lengths; each cell is
/// trained once per seed and scored by mean validation MSE.
#[allow(clippy::too_many_arguments)]
pub fn grid_search(
    series: &FlowSeries,
    externals: &[Vec<f64>],
    base_fusion: &FusionConfig,
    base_model: &ModelConfig,
    base_train: &TrainConfig,
    space: &SearchSpace,
    target: (f64, f64),
) -> Result<SearchReport> {
    if space.seeds.is_empty() {
        return Err(Error::config("search needs at least one seed"));
    }
    let mut rows = Vec::new();
    let mut cells = Vec::new();
    // Datasets per distinct fusion, built lazily.
    let mut cache: Vec<(FusionConfig, DatasetSplits, NormStats)> = Vec::new();

    let run_cell = |point: SearchPoint,
                        phase: SearchPhase,
                        rows: &mut Vec<SearchRow>,
                        cells: &mut Vec<SearchCell>,
                        cache: &mut Vec<(FusionConfig, DatasetSplits, NormStats)>|
     -> Result<f64> {
        if !cache.iter().any(|(f, _, _)| *f == point.fusion) {
            let (splits, stats) = prepare_dataset(series, externals, &point.fusion, target)?;
            cache.push((point.fusion, splits, stats));
        }
        let (_, splits, stats) =
            cache.iter().find(|(f, _, _)| *f == point.fusion).expect("just inserted");
        let mcfg = model_for(base_model, point.k, &point.fusion);
        let mut vals = Vec::with_capacity(space.seeds.len());
        for &seed in &space.seeds {
            let tcfg = TrainConfig {
                seed,
                loss: LossConfig {
                    lambda_er: point.lambda_er,
                    lambda_eid: point.lambda_eid,
                    n_top: point.k,
                    er_variant: base_train.loss.er_variant,
                },
                ..*base_train
            };
            let init = ModelParams::init(mcfg.clone(), seed)?;
            let result = train(splits, stats, init, &tcfg)?;
            rows.push(SearchRow {
                phase,
                point,
                seed,
                val_mse: result.best_val_mse,
                best_epoch: result.best_epoch,
            });
            vals.push(result.best_val_mse);
        }
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = if vals.len() > 1 {
            vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (vals.len() - 1) as f64
        } else {
            0.0
        };
        cells.push(SearchCell { phase, point, mean_val_mse: mean, var_val_mse: var });
        Ok(mean)
    };

    let mut best = SearchPoint {
        k: base_model.k,
        lambda_er: base_train.loss.lambda_er,
        lambda_eid: base_train.loss.lambda_eid,
        fusion: *base_fusion,
    };
    let mut best_mean = f64::INFINITY;

    // Phase 1: expert count.
    let mut phase_best: Option<(f64, SearchPoint)> = None;
    for &k in &space.ks {
        let point = SearchPoint { k, ..best };
        let mean = run_cell(point, SearchPhase::ExpertCount, &mut rows, &mut cells, &mut cache)?;
        if phase_best.map_or(true, |(m, _)| mean < m) {
            phase_best = Some((mean, point));
        }
    }
    if let Some((m, p)) = phase_best {
        best = p;
        best_mean = m;
    }

    // Phase 2: loss weights, skipping pairs the total-loss constraint
    // (λ_er + λ_eid < 1, each in [0,1)) rules out.
    let mut phase_best: Option<(f64, SearchPoint)> = None;
    for &er in &space.lambda_er {
        for &eid in &space.lambda_eid {
            let probe = LossConfig {
                lambda_er: er,
                lambda_eid: eid,
                n_top: best.k,
                er_variant: base_train.loss.er_variant,
            };
            if probe.validate(best.k).is_err() {
                continue;
            }
            let point = SearchPoint { lambda_er: er, lambda_eid: eid, ..best };
            let mean =
                run_cell(point, SearchPhase::LossWeights, &mut rows, &mut cells, &mut cache)?;
            if phase_best.map_or(true, |(m, _)| mean < m) {
                phase_best = Some((mean, point));
            }
        }
    }
    if let Some((m, p)) = phase_best {
        best = p;
        best_mean = m;
    }

    // Phase 3: sequence lengths.
    let mut phase_best: Option<(f64, SearchPoint)> = None;
    for fusion in &space.fusions {
        fusion.validate()?;
        let point = SearchPoint { fusion: *fusion, ..best };
        let mean =
            run_cell(point, SearchPhase::SequenceLengths, &mut rows, &mut cells, &mut cache)?;
        if phase_best.map_or(true, |(m, _)| mean < m) {
            phase_best = Some((mean, point));
        }
    }
    if let Some((m, p)) = phase_best {
        best = p;
        best_mean = m;
    }

    if best_mean.is_infinite() {
        // Every menu was empty; score the base configuration once so the
        // report is still meaningful.
        best_mean = run_cell(best, SearchPhase::ExpertCount, &mut rows, &mut cells, &mut cache)?;
    }

    Ok(SearchReport { rows, cells, best, best_mean_val_mse: best_mean })
}

pub fn write_search_csv(path: &Path, report: &SearchReport) -> Result<()> {
    let mut s = String::from(
        "phase,k,lambda_er,lambda_eid,n_c,n_p,n_q,seed,val_mse,best_epoch\n",
    );
    for r in &report.rows {
        let phase = match r.phase {
            SearchPhase::ExpertCount => "expert_count",
            SearchPhase::LossWeights => "loss_weights",
            SearchPhase::SequenceLengths => "sequence_lengths",
        };
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            phase,
            r.point.k,
            r.point.lambda_er,
            r.point.lambda_eid,
            r.point.fusion.n_c,
            r.point.fusion.n_p,
            r.point.fusion.n_q,
            r.seed,
            r.val_mse,
            r.best_epoch
        ));
    }
    std::fs::write(path, s)?;
    Ok(())
}

//! Command implementations behind the `stmoe` binary: dataset generation,
//! trajectory aggregation, training runs with checkpoints and logs,
//! evaluation reports, attention export, and the hyperparameter search.
//!
//! Every function here does the work and returns a plain outcome struct;
//! the frontend decides how to print it. Commands are idempotent given
//! identical inputs and seed — outputs are byte-identical except the
//! timestamp inside `metadata.json`.

use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta};
use crate::error::{Error, Result};
use crate::eval::{
    busiest_fraction, evaluate_model, expert_contributions, match_experts_to_patterns,
    mean_inflow_attention, pairwise_expert_quade, MapeOptions, MatchResult, MetricReport,
    MATCH_ATTENTION_FRACTION,
};
use crate::flow::{
    compute_inflow_outflow, minmax_apply_series, Bounds, ExternalSchema, FlowSeries, GridSpec,
    NormStats,
};
use crate::fusion::{build_sample, make_dataset, DatasetSplits, FusionConfig, InputSample};
use crate::losses::{ErVariant, LossConfig};
use crate::model::{forward_with, BackboneKind, ForwardMode, ModelConfig, ModelParams, NormKind};
use crate::stflow::{load_stflow, parse_trajectory_csv, save_stflow, Dataset};
use crate::synth::{builtin_city, generate, SynthConfig};
use crate::tensor::Tensor;
use crate::train::{
    grid_search, history_csv_rows, prepare_dataset, steps_csv_rows, train_from, write_history_csv,
    write_search_csv, write_steps_csv, ResumeState, SearchPoint, SearchSpace, StopReason,
    TrainConfig, STEPS_CSV_HEADER,
};

/// Normalization target; the model's Tanh output lives on this interval.
pub const NORM_TARGET: (f64, f64) = (-1.0, 1.0);

/// t = 0 of a generated dataset is the first interval of this (Monday)
/// timestamp, matching the day-of-week encoding.
const GENERATED_EPOCH: &str = "2024-01-01T00:00:00Z";

const CHECKPOINT_FILE: &str = "checkpoint.stmoe";
const METADATA_FILE: &str = "metadata.json";

// ── Run configuration ───────────────────────────────────────────────────

pub const RUN_CONFIG_VERSION: u32 = 1;

fn default_n_c() -> usize {
    3
}
fn default_n_p() -> usize {
    1
}
fn default_n_q() -> usize {
    1
}

/// Temporal fusion menu of a run config; offsets default to one day and
/// one week of the dataset's own intervals.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FusionSection {
    #[serde(default = "default_n_c")]
    pub n_c: usize,
    #[serde(default = "default_n_p")]
    pub n_p: usize,
    #[serde(default = "default_n_q")]
    pub n_q: usize,
    #[serde(default)]
    pub day_offset: Option<usize>,
    #[serde(default)]
    pub week_offset: Option<usize>,
}

impl Default for FusionSection {
    fn default() -> Self {
        FusionSection {
            n_c: default_n_c(),
            n_p: default_n_p(),
            n_q: default_n_q(),
            day_offset: None,
            week_offset: None,
        }
    }
}

impl FusionSection {
    pub fn resolve(&self, grid: &GridSpec) -> FusionConfig {
        let day = self.day_offset.unwrap_or_else(|| grid.steps_per_day());
        let week = self.week_offset.unwrap_or_else(|| grid.steps_per_day() * 7);
        FusionConfig { n_c: self.n_c, n_p: self.n_p, n_q: self.n_q, day_offset: day, week_offset: week }
    }
}

fn default_filters() -> usize {
    8
}
fn default_depth() -> usize {
    2
}
fn default_kernel() -> usize {
    3
}
fn default_ext_channels() -> usize {
    2
}
fn default_true() -> bool {
    true
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    /// Expert count K.
    pub k: usize,
    #[serde(default = "ModelSection::default_backbone")]
    pub backbone: BackboneKind,
    #[serde(default = "default_filters")]
    pub filters: usize,
    #[serde(default = "default_depth")]
    pub depth: usize,
    #[serde(default = "default_kernel")]
    pub kernel: usize,
    #[serde(default = "ModelSection::default_norm")]
    pub norm: NormKind,
    #[serde(default = "default_ext_channels")]
    pub ext_channels: usize,
    #[serde(default = "default_true")]
    pub use_gs: bool,
    #[serde(default = "default_true")]
    pub use_gt: bool,
}

impl ModelSection {
    fn default_backbone() -> BackboneKind {
        BackboneKind::ConvStack
    }
    fn default_norm() -> NormKind {
        NormKind::Channel
    }

    pub fn resolve(&self, grid: &GridSpec, fusion: &FusionConfig, n_ext_raw: usize) -> ModelConfig {
        ModelConfig {
            k: self.k,
            backbone: self.backbone,
            filters: self.filters,
            depth: self.depth,
            kernel: self.kernel,
            norm: self.norm,
            ext_channels: self.ext_channels,
            use_gs: self.use_gs,
            use_gt: self.use_gt,
            h: grid.h,
            w: grid.w,
            flow_channels: fusion.flow_channels(),
            n_ext_raw,
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    #[serde(default = "TrainSection::default_batch")]
    pub batch_size: usize,
    #[serde(default = "TrainSection::default_lr")]
    pub learning_rate: f64,
    #[serde(default = "TrainSection::default_epochs")]
    pub max_epochs: usize,
    #[serde(default = "TrainSection::default_patience")]
    pub patience: usize,
    #[serde(default = "TrainSection::default_clip")]
    pub clip_norm: f64,
}

impl TrainSection {
    fn default_batch() -> usize {
        32
    }
    fn default_lr() -> f64 {
        1e-3
    }
    fn default_epochs() -> usize {
        50
    }
    fn default_patience() -> usize {
        5
    }
    fn default_clip() -> f64 {
        5.0
    }
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            batch_size: Self::default_batch(),
            learning_rate: Self::default_lr(),
            max_epochs: Self::default_epochs(),
            patience: Self::default_patience(),
            clip_norm: Self::default_clip(),
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossSection {
    #[serde(default)]
    pub lambda_er: f64,
    #[serde(default)]
    pub lambda_eid: f64,
    #[serde(default = "LossSection::default_variant")]
    pub er_variant: ErVariant,
    /// Experts entering the discrepancy determinant; defaults to K.
    #[serde(default)]
    pub n_top: Option<usize>,
}

impl Default for LossSection {
    fn default() -> Self {
        LossSection {
            lambda_er: 0.0,
            lambda_eid: 0.0,
            er_variant: Self::default_variant(),
            n_top: None,
        }
    }
}

impl LossSection {
    fn default_variant() -> ErVariant {
        ErVariant::LogMixture
    }

    pub fn resolve(&self, k: usize) -> LossConfig {
        LossConfig {
            lambda_er: self.lambda_er,
            lambda_eid: self.lambda_eid,
            n_top: self.n_top.unwrap_or(k),
            er_variant: self.er_variant,
        }
    }
}

/// One closeness/period/trend variant in the search menu.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeqSpec {
    pub n_c: usize,
    pub n_p: usize,
    pub n_q: usize,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchSection {
    #[serde(default)]
    pub ks: Vec<usize>,
    #[serde(default)]
    pub lambda_er: Vec<f64>,
    #[serde(default)]
    pub lambda_eid: Vec<f64>,
    #[serde(default)]
    pub seq: Vec<SeqSpec>,
    /// Repetitions per cell; defaults to seed, seed+1, seed+2.
    #[serde(default)]
    pub seeds: Vec<u64>,
}

/// A complete run description. The schema is versioned and fail-closed:
/// unknown keys are rejected so a misspelled field never silently falls
/// back to a default.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    /// stflow dataset directory.
    pub data: PathBuf,
    /// Run output directory.
    pub out: PathBuf,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub fusion: FusionSection,
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub loss: LossSection,
    #[serde(default)]
    pub search: SearchSection,
}

pub fn load_run_config(path: &Path) -> Result<RunConfig> {
    let raw = fs::read_to_string(path)
        .map_err(|e| Error::data(format!("cannot read {}: {e}", path.display())))?;
    let cfg: RunConfig = serde_json::from_str(&raw)
        .map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
    if cfg.version != RUN_CONFIG_VERSION {
        return Err(Error::config(format!(
            "unsupported run config version {}, this build reads version {RUN_CONFIG_VERSION}",
            cfg.version
        )));
    }
    Ok(cfg)
}

/// Flag-level overrides applied on top of a run config file.
#[derive(Clone, Debug, Default)]
pub struct ConfigOverrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub er_variant: Option<ErVariant>,
    pub n_top: Option<usize>,
}

impl ConfigOverrides {
    pub fn apply(&self, cfg: &mut RunConfig) {
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(o) = &self.out {
            cfg.out = o.clone();
        }
        if let Some(v) = self.er_variant {
            cfg.loss.er_variant = v;
        }
        if let Some(n) = self.n_top {
            cfg.loss.n_top = Some(n);
        }
    }
}

/// Dataset plus every concrete config derived from a [`RunConfig`].
pub struct ResolvedRun {
    pub dataset: Dataset,
    pub fusion: FusionConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

pub fn resolve(cfg: &RunConfig) -> Result<ResolvedRun> {
    let dataset = load_stflow(&cfg.data)?;
    let fusion = cfg.fusion.resolve(&dataset.grid);
    fusion.validate()?;
    let model = cfg.model.resolve(&dataset.grid, &fusion, dataset.external_schema.len());
    model.validate()?;
    let loss = cfg.loss.resolve(model.k);
    loss.validate(model.k)?;
    let train = TrainConfig {
        batch_size: cfg.train.batch_size,
        learning_rate: cfg.train.learning_rate,
        max_epochs: cfg.train.max_epochs,
        patience: cfg.train.patience,
        seed: cfg.seed,
        clip_norm: cfg.train.clip_norm,
        loss,
        mode: ForwardMode::Full,
    };
    train.validate()?;
    Ok(ResolvedRun { dataset, fusion, model, train })
}

// ── Shared helpers ──────────────────────────────────────────────────────

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path)?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    Ok(format!("{:x}", hasher.finalize()))
}

fn hash_files(dir: &Path, names: &[&str]) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for name in names {
        let p = dir.join(name);
        if p.exists() {
            out.push((name.to_string(), sha256_file(&p)?));
        }
    }
    Ok(out)
}

/// Normalize with known statistics and build the standard chronological
/// splits — the evaluation-side mirror of [`prepare_dataset`].
fn splits_with(
    series: &FlowSeries,
    externals: &[Vec<f64>],
    fusion: &FusionConfig,
    norm: &NormStats,
) -> Result<DatasetSplits> {
    let normed = minmax_apply_series(series, norm);
    make_dataset(&normed, externals, fusion)
}

/// Check a checkpoint against a dataset before running anything, naming
/// the offending dimensions.
fn check_compat(ck: &Checkpoint, ds: &Dataset) -> Result<()> {
    let cfg = &ck.params.cfg;
    if (cfg.h, cfg.w) != (ds.grid.h, ds.grid.w) {
        return Err(Error::data(format!(
            "checkpoint was trained on a {}x{} grid, dataset is {}x{}",
            cfg.h, cfg.w, ds.grid.h, ds.grid.w
        )));
    }
    if cfg.n_ext_raw != ds.external_schema.len() {
        return Err(Error::data(format!(
            "checkpoint expects {} external channels, dataset schema has {}",
            cfg.n_ext_raw,
            ds.external_schema.len()
        )));
    }
    Ok(())
}

fn mode_from_flags(ablate_gs: bool, ablate_gt: bool) -> Result<ForwardMode> {
    match (ablate_gs, ablate_gt) {
        (false, false) => Ok(ForwardMode::Full),
        (true, false) => Ok(ForwardMode::NoGs),
        (false, true) => Ok(ForwardMode::NoGt),
        (true, true) => Err(Error::config("choose at most one of --ablate-gs / --ablate-gt")),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let json = serde_json::to_string_pretty(value)
        .map_err(|e| Error::data(format!("serializing {}: {e}", path.display())))?;
    fs::write(path, json)?;
    Ok(())
}

// ── generate ────────────────────────────────────────────────────────────

pub struct GenerateArgs {
    /// Built-in city name; exactly one of `preset` / `config`.
    pub preset: Option<String>,
    /// Path to a full generator config JSON.
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
    pub out: PathBuf,
    /// Distinct weekend profiles (presets only).
    pub weekend_shift: bool,
    /// Emit expectations instead of Poisson draws.
    pub deterministic: bool,
}

#[derive(Debug)]
pub struct GenerateOutcome {
    pub dir: PathBuf,
    pub intervals: usize,
    pub patterns: Vec<String>,
    /// (file name, sha256) for every artifact written.
    pub hashes: Vec<(String, String)>,
}

pub fn cmd_generate(args: &GenerateArgs) -> Result<GenerateOutcome> {
    let mut cfg = match (&args.preset, &args.config) {
        (Some(name), None) => builtin_city(name, args.seed.unwrap_or(0), args.weekend_shift)?,
        (None, Some(path)) => {
            let raw = fs::read_to_string(path)
                .map_err(|e| Error::data(format!("cannot read {}: {e}", path.display())))?;
            let mut c: SynthConfig = serde_json::from_str(&raw)
                .map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
            if let Some(s) = args.seed {
                c.seed = s;
            }
            c
        }
        _ => return Err(Error::config("pass exactly one of --preset or --config")),
    };
    if args.deterministic {
        cfg.deterministic = true;
    }

    let out = generate(&cfg)?;
    let ds = Dataset {
        grid: cfg.grid.clone(),
        start_timestamp: GENERATED_EPOCH.into(),
        series: out.series,
        external_schema: out.schema,
        externals: out.externals,
        truth_masks: Some(out.masks.iter().map(|m| m.data().to_vec()).collect()),
        pattern_names: out.pattern_names.clone(),
    };
    let intervals = ds.series.len();
    save_stflow(&args.out, &ds)?;
    write_json(&args.out.join("patterns.json"), &cfg)?;

    let hashes = hash_files(
        &args.out,
        &["manifest.json", "flow.bin", "external.bin", "truth_masks.bin", "patterns.json"],
    )?;
    Ok(GenerateOutcome {
        dir: args.out.clone(),
        intervals,
        patterns: out.pattern_names,
        hashes,
    })
}

// ── aggregate ───────────────────────────────────────────────────────────

pub struct AggregateArgs {
    /// Trajectory CSV (`traj_id, t, lat, lon`).
    pub input: PathBuf,
    pub h: usize,
    pub w: usize,
    /// Geographic box; unit square when omitted.
    pub bounds: Option<Bounds>,
    pub interval_minutes: u32,
    pub out: PathBuf,
}

#[derive(Debug)]
pub struct AggregateOutcome {
    pub dir: PathBuf,
    pub intervals: usize,
    pub total_inflow: f64,
    pub total_outflow: f64,
    pub hashes: Vec<(String, String)>,
}

pub fn cmd_aggregate(args: &AggregateArgs) -> Result<AggregateOutcome> {
    let file = fs::File::open(&args.input)
        .map_err(|e| Error::data(format!("cannot read {}: {e}", args.input.display())))?;
    let trajectories = parse_trajectory_csv(BufReader::new(file))?;
    let grid = match args.bounds {
        Some(b) => GridSpec::new(args.h, args.w, b, args.interval_minutes)?,
        None => GridSpec::unit(args.h, args.w, args.interval_minutes)?,
    };
    let t_max = trajectories
        .iter()
        .flat_map(|tr| tr.points.iter().map(|p| p.t))
        .max()
        .ok_or_else(|| Error::data("no trajectory points in the input"))?;
    if t_max < 0 {
        return Err(Error::data("all trajectory intervals are negative"));
    }

    let mut series = FlowSeries::new(grid.clone());
    let mut total_in = 0.0;
    let mut total_out = 0.0;
    for t in 0..=t_max {
        let snap = compute_inflow_outflow(&trajectories, &grid, t)?;
        total_in += snap.inflow.iter().sum::<f64>();
        total_out += snap.outflow.iter().sum::<f64>();
        series.push(snap)?;
    }
    let intervals = series.len();

    let ds = Dataset {
        grid,
        start_timestamp: "1970-01-01T00:00:00Z".into(),
        series,
        external_schema: ExternalSchema { fields: Vec::new() },
        externals: vec![Vec::new(); intervals],
        truth_masks: None,
        pattern_names: Vec::new(),
    };
    save_stflow(&args.out, &ds)?;
    let hashes = hash_files(&args.out, &["manifest.json", "flow.bin", "external.bin"])?;
    Ok(AggregateOutcome {
        dir: args.out.clone(),
        intervals,
        total_inflow: total_in,
        total_outflow: total_out,
        hashes,
    })
}

// ── train ───────────────────────────────────────────────────────────────

/// What a finished (or resumed) run records next to its artifacts.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunMetadata {
    pub version: u32,
    pub seed: u64,
    pub epochs_completed: usize,
    pub best_epoch: usize,
    pub best_val_mse: f64,
    pub stop: StopReason,
    pub elapsed_seconds: f64,
    pub unix_timestamp: u64,
    pub config: RunConfig,
}

pub fn load_metadata(run_dir: &Path) -> Result<RunMetadata> {
    let path = run_dir.join(METADATA_FILE);
    let raw = fs::read_to_string(&path)
        .map_err(|e| Error::data(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&raw).map_err(|e| Error::data(format!("{}: {e}", path.display())))
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub run_dir: PathBuf,
    pub checkpoint: PathBuf,
    pub epochs_completed: usize,
    pub best_epoch: usize,
    pub best_val_mse: f64,
    pub stop: StopReason,
}

/// Extra checkpoint arrays holding the optimizer state of the best epoch.
fn adam_extras(params: &ModelParams, adam: &(Vec<Tensor>, Vec<Tensor>, u64)) -> Vec<(String, Tensor)> {
    let mut extra = Vec::with_capacity(2 * params.len());
    for (name, m) in params.names().iter().zip(&adam.0) {
        extra.push((format!("adam.m.{name}"), m.clone()));
    }
    for (name, v) in params.names().iter().zip(&adam.1) {
        extra.push((format!("adam.v.{name}"), v.clone()));
    }
    extra
}

/// Inverse of [`adam_extras`]: `None` when any moment array is missing.
fn adam_from_extras(
    params: &ModelParams,
    extra: &[(String, Tensor)],
    step: u64,
) -> Option<(Vec<Tensor>, Vec<Tensor>, u64)> {
    let find = |key: String| extra.iter().find(|(n, _)| *n == key).map(|(_, t)| t.clone());
    let m: Option<Vec<Tensor>> =
        params.names().iter().map(|n| find(format!("adam.m.{n}"))).collect();
    let v: Option<Vec<Tensor>> =
        params.names().iter().map(|n| find(format!("adam.v.{n}"))).collect();
    Some((m?, v?, step))
}

pub fn cmd_train(cfg: &RunConfig, resume: bool) -> Result<TrainOutcome> {
    let started = Instant::now();
    let resolved = resolve(cfg)?;
    let run_dir = &cfg.out;
    fs::create_dir_all(run_dir)?;
    let ckpt_path = run_dir.join(CHECKPOINT_FILE);

    let (splits, norm, init, resume_state) = if resume {
        if !ckpt_path.exists() {
            return Err(Error::data(format!(
                "cannot resume: no checkpoint at {}",
                ckpt_path.display()
            )));
        }
        let ck = load_checkpoint(&ckpt_path)?;
        check_compat(&ck, &resolved.dataset)?;
        if ck.params.cfg != resolved.model {
            return Err(Error::config(
                "checkpoint was trained with a different model configuration; \
                 adjust the run config or start a fresh run directory",
            ));
        }
        if ck.fusion != resolved.fusion {
            return Err(Error::config(
                "checkpoint was trained with a different temporal fusion; \
                 adjust the run config or start a fresh run directory",
            ));
        }
        let splits = splits_with(
            &resolved.dataset.series,
            &resolved.dataset.externals,
            &resolved.fusion,
            &ck.norm,
        )?;
        let epochs_completed = match load_metadata(run_dir) {
            Ok(meta) => meta.epochs_completed,
            Err(_) => ck.meta.epoch,
        };
        let adam = adam_from_extras(&ck.params, &ck.extra, ck.meta.adam_step);
        let state =
            ResumeState { epochs_completed, best_epoch: ck.meta.epoch, adam };
        (splits, ck.norm, ck.params, state)
    } else {
        let (splits, norm) = prepare_dataset(
            &resolved.dataset.series,
            &resolved.dataset.externals,
            &resolved.fusion,
            NORM_TARGET,
        )?;
        let init = ModelParams::init(resolved.model.clone(), cfg.seed)?;
        (splits, norm, init, ResumeState::default())
    };

    let result = train_from(&splits, &norm, init, &resolved.train, &resume_state)?;

    let extra = adam_extras(&result.best, &result.best_adam);
    save_checkpoint(
        &ckpt_path,
        &Checkpoint {
            fusion: resolved.fusion,
            norm,
            meta: CheckpointMeta {
                epoch: result.best_epoch,
                best_val_mse: result.best_val_mse,
                seed: cfg.seed,
                adam_step: result.best_adam.2,
            },
            extra,
            params: result.best,
        },
    )?;

    let history_path = run_dir.join("history.csv");
    let steps_path = run_dir.join("steps.csv");
    if resume && history_path.exists() {
        let mut h = fs::read_to_string(&history_path)?;
        h.push_str(&history_csv_rows(&result.history));
        fs::write(&history_path, h)?;
        let mut s = fs::read_to_string(&steps_path)
            .unwrap_or_else(|_| format!("{STEPS_CSV_HEADER}\n"));
        s.push_str(&steps_csv_rows(&result.steps));
        fs::write(&steps_path, s)?;
    } else {
        write_history_csv(&history_path, &result.history)?;
        write_steps_csv(&steps_path, &result.steps)?;
    }

    let metadata = RunMetadata {
        version: RUN_CONFIG_VERSION,
        seed: cfg.seed,
        epochs_completed: result.epochs_completed,
        best_epoch: result.best_epoch,
        best_val_mse: result.best_val_mse,
        stop: result.stop,
        elapsed_seconds: started.elapsed().as_secs_f64(),
        unix_timestamp: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
        config: cfg.clone(),
    };
    write_json(&run_dir.join(METADATA_FILE), &metadata)?;

    Ok(TrainOutcome {
        run_dir: run_dir.clone(),
        checkpoint: ckpt_path,
        epochs_completed: result.epochs_completed,
        best_epoch: result.best_epoch,
        best_val_mse: result.best_val_mse,
        stop: result.stop,
    })
}

// ── evaluate ────────────────────────────────────────────────────────────

pub struct EvaluateArgs {
    pub checkpoint: PathBuf,
    pub data: PathBuf,
    /// Report directory; nothing is written when omitted.
    pub out: Option<PathBuf>,
    pub ablate_gs: bool,
    pub ablate_gt: bool,
    pub mape_floor: f64,
    pub mape_truth_denominator: bool,
}

impl EvaluateArgs {
    pub fn new(checkpoint: PathBuf, data: PathBuf) -> Self {
        EvaluateArgs {
            checkpoint,
            data,
            out: None,
            ablate_gs: false,
            ablate_gt: false,
            mape_floor: MapeOptions::default().floor,
            mape_truth_denominator: false,
        }
    }
}

#[derive(Debug)]
pub struct EvalOutcome {
    pub mode: ForwardMode,
    pub val: MetricReport,
    pub test: MetricReport,
    /// K×K pairwise expert p-values on the test split.
    pub quade: Vec<Vec<f64>>,
    /// Expert-to-pattern matching when the dataset ships truth masks.
    pub matching: Option<MatchResult>,
    pub files: Vec<PathBuf>,
}

#[derive(Serialize)]
struct MetricsFile<'a> {
    mode: ForwardMode,
    val: &'a MetricReport,
    test: &'a MetricReport,
}

#[derive(Serialize)]
struct MatchFile<'a> {
    patterns: &'a [String],
    assignment: &'a [Option<usize>],
    correlations: &'a [Vec<f64>],
    total_correlation: f64,
    mean_matched_correlation: f64,
}

fn write_match_report(path: &Path, names: &[String], m: &MatchResult) -> Result<()> {
    let matched = m.assignment.iter().flatten().count();
    write_json(
        path,
        &MatchFile {
            patterns: names,
            assignment: &m.assignment,
            correlations: &m.correlations,
            total_correlation: m.total_correlation,
            mean_matched_correlation: if matched > 0 {
                m.total_correlation / matched as f64
            } else {
                0.0
            },
        },
    )
}

fn write_quade_csv(path: &Path, q: &[Vec<f64>]) -> Result<()> {
    let k = q.len();
    let mut s = String::from("expert");
    for j in 0..k {
        s.push_str(&format!(",expert_{j}"));
    }
    s.push('\n');
    for (i, row) in q.iter().enumerate() {
        s.push_str(&format!("expert_{i}"));
        for v in row {
            s.push_str(&format!(",{v}"));
        }
        s.push('\n');
    }
    fs::write(path, s)?;
    Ok(())
}

fn truth_mask_tensors(ds: &Dataset) -> Option<Vec<Tensor>> {
    let (h, w) = (ds.grid.h, ds.grid.w);
    ds.truth_masks
        .as_ref()
        .map(|ms| ms.iter().map(|m| Tensor::new([h, w], m.clone())).collect())
}

pub fn cmd_evaluate(args: &EvaluateArgs) -> Result<EvalOutcome> {
    let mode = mode_from_flags(args.ablate_gs, args.ablate_gt)?;
    let ck = load_checkpoint(&args.checkpoint)?;
    let ds = load_stflow(&args.data)?;
    check_compat(&ck, &ds)?;
    let splits = splits_with(&ds.series, &ds.externals, &ck.fusion, &ck.norm)?;

    let opts =
        MapeOptions { floor: args.mape_floor, truth_denominator: args.mape_truth_denominator };
    let val = evaluate_model(&ck.params, &splits.val, &ck.norm, mode, &opts)?;
    let test = evaluate_model(&ck.params, &splits.test, &ck.norm, mode, &opts)?;

    // A single-expert model has no pairs to rank-test; its report is empty.
    let quade = if ck.params.cfg.k >= 2 {
        let contributions = expert_contributions(&ck.params, &splits.test, mode)?;
        pairwise_expert_quade(&contributions)?
    } else {
        Vec::new()
    };

    let matching = match truth_mask_tensors(&ds) {
        Some(masks) => {
            let busy = busiest_fraction(&splits.test, MATCH_ATTENTION_FRACTION)?;
            let maps = mean_inflow_attention(&ck.params, &busy, mode)?;
            Some(match_experts_to_patterns(&maps, &masks)?)
        }
        None => None,
    };

    let mut files = Vec::new();
    if let Some(dir) = &args.out {
        fs::create_dir_all(dir)?;
        let metrics_path = dir.join("metrics.json");
        write_json(&metrics_path, &MetricsFile { mode, val: &val, test: &test })?;
        files.push(metrics_path);
        if !quade.is_empty() {
            let quade_path = dir.join("quade.csv");
            write_quade_csv(&quade_path, &quade)?;
            files.push(quade_path);
        }
        if let Some(m) = &matching {
            let match_path = dir.join("match_report.json");
            write_match_report(&match_path, &ds.pattern_names, m)?;
            files.push(match_path);
        }
    }

    Ok(EvalOutcome { mode, val, test, quade, matching, files })
}

// ── export-attention ────────────────────────────────────────────────────

pub struct ExportArgs {
    pub checkpoint: PathBuf,
    pub data: PathBuf,
    pub out: PathBuf,
    /// Anchor interval range (inclusive); defaults to every interval the
    /// fusion window allows.
    pub t_start: Option<usize>,
    pub t_end: Option<usize>,
    /// Emit a per-interval attention series for this (row, col) cell.
    pub coord: Option<(usize, usize)>,
    pub ablate_gs: bool,
    pub ablate_gt: bool,
}

#[derive(Debug)]
pub struct ExportOutcome {
    pub k: usize,
    /// Per-expert (h, w) attention maps, averaged over the selected
    /// intervals and both flow channels.
    pub maps: Vec<Tensor>,
    pub n_samples: usize,
    pub t_range: (usize, usize),
    pub matching: Option<MatchResult>,
    pub files: Vec<PathBuf>,
}

pub fn cmd_export_attention(args: &ExportArgs) -> Result<ExportOutcome> {
    let mode = mode_from_flags(args.ablate_gs, args.ablate_gt)?;
    let ck = load_checkpoint(&args.checkpoint)?;
    let ds = load_stflow(&args.data)?;
    check_compat(&ck, &ds)?;

    let normed = minmax_apply_series(&ds.series, &ck.norm);
    let first = ds.series.first_t().ok_or_else(|| Error::data("dataset has no intervals"))?;
    let last = first + ds.series.len().saturating_sub(1);
    let lo_valid = first + ck.fusion.history_needed();
    if lo_valid + 1 > last {
        return Err(Error::data("series is shorter than the model's history window"));
    }
    let hi_valid = last - 1;
    let lo = args.t_start.unwrap_or(lo_valid);
    let hi = args.t_end.unwrap_or(hi_valid);
    if lo < lo_valid || hi > hi_valid || lo > hi {
        return Err(Error::data(format!(
            "interval range {lo}..={hi} out of range; valid anchors are {lo_valid}..={hi_valid}"
        )));
    }

    let samples: Vec<InputSample> = (lo..=hi)
        .map(|t| build_sample(&normed, &ds.externals, t, &ck.fusion))
        .collect::<Result<_>>()?;

    let (k, h, w) = (ck.params.cfg.k, ck.params.cfg.h, ck.params.cfg.w);
    let traces = crate::par::map_ordered(&samples, |s| forward_with(&ck.params, s, mode));
    let mut maps = vec![Tensor::zeros([h, w]); k];
    let mut coord_rows: Vec<(usize, Vec<f64>)> = Vec::new();
    for (s, tr) in samples.iter().zip(traces) {
        let tr = tr?;
        let att = tr.attention.data().to_vec(); // (K, 2, h, w)
        for (i, map) in maps.iter_mut().enumerate() {
            for cell in 0..h * w {
                let inflow = att[(i * 2) * h * w + cell];
                let outflow = att[(i * 2 + 1) * h * w + cell];
                map.data_mut()[cell] += 0.5 * (inflow + outflow);
            }
        }
        if let Some((ci, cj)) = args.coord {
            if ci >= h || cj >= w {
                return Err(Error::config(format!(
                    "coordinate ({ci}, {cj}) outside the {h}x{w} grid"
                )));
            }
            let cell = ci * w + cj;
            let row = (0..k).map(|i| att[(i * 2) * h * w + cell]).collect();
            coord_rows.push((s.t, row));
        }
    }
    let inv = 1.0 / samples.len() as f64;
    for m in &mut maps {
        for v in m.data_mut() {
            *v *= inv;
        }
    }

    fs::create_dir_all(&args.out)?;
    let mut files = Vec::new();
    for (i, map) in maps.iter().enumerate() {
        let mut s = String::new();
        for row in 0..h {
            let line: Vec<String> =
                (0..w).map(|col| format!("{}", map.data()[row * w + col])).collect();
            s.push_str(&line.join(","));
            s.push('\n');
        }
        let path = args.out.join(format!("attention_expert_{i}.csv"));
        fs::write(&path, s)?;
        files.push(path);
    }

    if let Some((ci, cj)) = args.coord {
        let mut s = String::from("t");
        for i in 0..k {
            s.push_str(&format!(",expert_{i}"));
        }
        s.push('\n');
        for (t, row) in &coord_rows {
            s.push_str(&format!("{t}"));
            for v in row {
                s.push_str(&format!(",{v}"));
            }
            s.push('\n');
        }
        let path = args.out.join(format!("attention_series_{ci}_{cj}.csv"));
        fs::write(&path, s)?;
        files.push(path);
    }

    let matching = match truth_mask_tensors(&ds) {
        Some(masks) => {
            let inflow_maps = mean_inflow_attention(&ck.params, &samples, mode)?;
            let m = match_experts_to_patterns(&inflow_maps, &masks)?;
            let path = args.out.join("match_report.json");
            write_match_report(&path, &ds.pattern_names, &m)?;
            files.push(path);
            Some(m)
        }
        None => None,
    };

    Ok(ExportOutcome { k, maps, n_samples: samples.len(), t_range: (lo, hi), matching, files })
}

// ── search ──────────────────────────────────────────────────────────────

#[derive(Debug)]
pub struct SearchOutcome {
    pub best: SearchPoint,
    pub best_mean_val_mse: f64,
    pub runs: usize,
    pub files: Vec<PathBuf>,
}

#[derive(Serialize)]
struct SearchBestFile {
    best: SearchPoint,
    mean_val_mse: f64,
}

pub fn cmd_search(cfg: &RunConfig) -> Result<SearchOutcome> {
    let resolved = resolve(cfg)?;
    let seeds = if cfg.search.seeds.is_empty() {
        vec![cfg.seed, cfg.seed + 1, cfg.seed + 2]
    } else {
        cfg.search.seeds.clone()
    };
    let space = SearchSpace {
        ks: cfg.search.ks.clone(),
        lambda_er: cfg.search.lambda_er.clone(),
        lambda_eid: cfg.search.lambda_eid.clone(),
        fusions: cfg
            .search
            .seq
            .iter()
            .map(|s| {
                FusionSection {
                    n_c: s.n_c,
                    n_p: s.n_p,
                    n_q: s.n_q,
                    day_offset: Some(resolved.fusion.day_offset),
                    week_offset: Some(resolved.fusion.week_offset),
                }
                .resolve(&resolved.dataset.grid)
            })
            .collect(),
        seeds,
    };
    let report = grid_search(
        &resolved.dataset.series,
        &resolved.dataset.externals,
        &resolved.fusion,
        &resolved.model,
        &resolved.train,
        &space,
        NORM_TARGET,
    )?;

    fs::create_dir_all(&cfg.out)?;
    let csv_path = cfg.out.join("search.csv");
    write_search_csv(&csv_path, &report)?;
    let best_path = cfg.out.join("search_best.json");
    write_json(
        &best_path,
        &SearchBestFile { best: report.best, mean_val_mse: report.best_mean_val_mse },
    )?;

    Ok(SearchOutcome {
        best: report.best,
        best_mean_val_mse: report.best_mean_val_mse,
        runs: report.rows.len(),
        files: vec![csv_path, best_path],
    })
}

// ── Thread cap ──────────────────────────────────────────────────────────

/// Apply the `STMOE_THREADS` cap to the worker pool. Call once at startup,
/// before any parallel work; returns the applied count, `None` when the
/// variable is unset (or the crate was built without the `parallel`
/// feature, where everything is sequential anyway).
pub fn init_threads_from_env() -> Result<Option<usize>> {
    let Ok(raw) = std::env::var("STMOE_THREADS") else {
        return Ok(None);
    };
    let n: usize = raw
        .parse()
        .map_err(|_| Error::config(format!("STMOE_THREADS must be a positive integer, got '{raw}'")))?;
    if n == 0 {
        return Err(Error::config("STMOE_THREADS must be at least 1"));
    }
    #[cfg(feature = "parallel")]
    {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::config(format!("cannot size the worker pool: {e}")))?;
    }
    Ok(Some(n))
}

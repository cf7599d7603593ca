//! Browser bindings for the interactive demo page.
//!
//! Three operations are exposed: generate a small synthetic city, train a
//! mixture model on it one epoch chunk at a time, and inspect what each
//! expert learned to attend to. Everything returns plain numbers, flat
//! vectors, or JSON strings so the page needs no framework glue.

use serde::Serialize;
use wasm_bindgen::prelude::*;

use stmoe_core::eval::{
    busiest_fraction, match_experts_to_patterns, mean_inflow_attention, MATCH_ATTENTION_FRACTION,
};
use stmoe_core::flow::{minmax_invert, NormStats};
use stmoe_core::fusion::{DatasetSplits, FusionConfig};
use stmoe_core::model::{
    forward_with, BackboneKind, ForwardMode, ModelConfig, ModelParams, NormKind,
};
use stmoe_core::synth::{builtin_city, generate, SynthOutput};
use stmoe_core::tensor::Tensor;
use stmoe_core::train::{prepare_dataset, train_from, EpochRecord, ResumeState, TrainConfig};

fn js_err(e: stmoe_core::Error) -> JsError {
    JsError::new(&e.to_string())
}

// ── City ────────────────────────────────────────────────────────────────

/// A small synthetic city: 8×8 grid, three planted demand patterns.
#[wasm_bindgen]
pub struct DemoCity {
    out: SynthOutput,
    h: usize,
    w: usize,
    steps_per_day: usize,
    max_flow: f64,
}

#[wasm_bindgen]
impl DemoCity {
    /// Draw `weeks` (2–8) of 30-minute inflow/outflow grids.
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32, weeks: u32, deterministic: bool) -> Result<DemoCity, JsError> {
        let mut cfg = builtin_city("tiny8", seed as u64, true).map_err(js_err)?;
        cfg.weeks = weeks.clamp(2, 8) as usize;
        cfg.deterministic = deterministic;
        let out = generate(&cfg).map_err(js_err)?;
        let (h, w) = (cfg.grid.h, cfg.grid.w);
        let max_flow = out
            .series
            .snapshots()
            .iter()
            .flat_map(|s| s.inflow.iter().chain(&s.outflow))
            .fold(0.0f64, |m, &v| m.max(v));
        Ok(DemoCity { out, h, w, steps_per_day: cfg.grid.steps_per_day(), max_flow })
    }

    pub fn h(&self) -> usize {
        self.h
    }

    pub fn w(&self) -> usize {
        self.w
    }

    pub fn intervals(&self) -> usize {
        self.out.series.len()
    }

    pub fn steps_per_day(&self) -> usize {
        self.steps_per_day
    }

    /// Largest flow value in the series, for color scaling.
    pub fn max_flow(&self) -> f64 {
        self.max_flow
    }

    pub fn pattern_count(&self) -> usize {
        self.out.masks.len()
    }

    pub fn pattern_name(&self, p: usize) -> String {
        self.out.pattern_names.get(p).cloned().unwrap_or_default()
    }

    /// Ground-truth spatial mask of pattern `p`, row-major h×w in [0, 1].
    pub fn mask(&self, p: usize) -> Vec<f64> {
        self.out.masks.get(p).map(|m| m.data().to_vec()).unwrap_or_default()
    }

    /// Inflow grid at interval `t`, row-major h×w.
    pub fn inflow(&self, t: usize) -> Vec<f64> {
        self.out.series.at(t).map(|s| s.inflow.clone()).unwrap_or_default()
    }

    pub fn outflow(&self, t: usize) -> Vec<f64> {
        self.out.series.at(t).map(|s| s.outflow.clone()).unwrap_or_default()
    }
}

// ── Trainer ─────────────────────────────────────────────────────────────

#[derive(Serialize)]
struct EpochRow {
    epoch: usize,
    train_mse: f64,
    val_mse: f64,
}

#[derive(Serialize)]
struct MatchRow {
    expert: usize,
    pattern: Option<String>,
    correlations: Vec<f64>,
}

/// A K-expert mixture model being fitted to a [`DemoCity`], driven one
/// epoch chunk at a time so the page can redraw between chunks.
#[wasm_bindgen]
pub struct DemoTrainer {
    splits: DatasetSplits,
    norm: NormStats,
    params: ModelParams,
    resume: ResumeState,
    base: TrainConfig,
    masks: Vec<Tensor>,
    names: Vec<String>,
    val_mse: f64,
}

#[wasm_bindgen]
impl DemoTrainer {
    #[wasm_bindgen(constructor)]
    pub fn new(
        city: &DemoCity,
        k: u32,
        lambda_er: f64,
        lambda_eid: f64,
        seed: u32,
    ) -> Result<DemoTrainer, JsError> {
        let day = city.steps_per_day;
        let fusion = FusionConfig {
            n_c: 2,
            n_p: 1,
            n_q: 0,
            day_offset: day,
            week_offset: 7 * day,
        };
        let (splits, norm) =
            prepare_dataset(&city.out.series, &city.out.externals, &fusion, (-1.0, 1.0))
                .map_err(js_err)?;
        let cfg = ModelConfig {
            k: k.clamp(1, 8) as usize,
            backbone: BackboneKind::ConvStack,
            filters: 4,
            depth: 1,
            kernel: 3,
            norm: NormKind::Channel,
            ext_channels: 2,
            use_gs: true,
            use_gt: true,
            h: city.h,
            w: city.w,
            flow_channels: fusion.flow_channels(),
            n_ext_raw: city.out.schema.len(),
        };
        let k = cfg.k;
        let params = ModelParams::init(cfg, seed as u64).map_err(js_err)?;
        let base = TrainConfig {
            batch_size: 32,
            learning_rate: 1e-3,
            max_epochs: 1,
            patience: usize::MAX,
            seed: seed as u64,
            clip_norm: 5.0,
            loss: stmoe_core::losses::LossConfig {
                lambda_er,
                lambda_eid,
                er_variant: stmoe_core::losses::ErVariant::LogMixture,
                n_top: k,
            },
            mode: ForwardMode::Full,
        };
        base.validate().map_err(js_err)?;
        Ok(DemoTrainer {
            splits,
            norm,
            params,
            resume: ResumeState::default(),
            base,
            masks: city.out.masks.clone(),
            names: city.out.pattern_names.clone(),
            val_mse: f64::NAN,
        })
    }

    /// Run `n` more epochs; returns the new history rows as JSON
    /// `[{epoch, train_mse, val_mse}, …]`.
    pub fn train_epochs(&mut self, n: u32) -> Result<String, JsError> {
        let mut cfg = self.base;
        cfg.max_epochs = n.max(1) as usize;
        let result = train_from(&self.splits, &self.norm, self.params.clone(), &cfg, &self.resume)
            .map_err(js_err)?;
        let rows: Vec<EpochRow> = result
            .history
            .iter()
            .map(|r: &EpochRecord| EpochRow {
                epoch: r.epoch,
                train_mse: r.train_mse,
                val_mse: r.val_mse,
            })
            .collect();
        self.val_mse = result.best_val_mse;
        self.resume = ResumeState {
            epochs_completed: result.epochs_completed,
            best_epoch: result.best_epoch,
            adam: Some(result.best_adam.clone()),
        };
        self.params = result.best;
        Ok(serde_json::to_string(&rows).expect("serializable rows"))
    }

    pub fn epochs_completed(&self) -> usize {
        self.resume.epochs_completed
    }

    /// Best validation MSE so far, in denormalized flow units.
    pub fn val_mse(&self) -> f64 {
        self.val_mse
    }

    pub fn k(&self) -> usize {
        self.params.cfg.k
    }

    /// Mean inflow attention of one expert over the busiest quartile of the
    /// validation split, row-major h×w in [0, 1].
    pub fn attention(&self, expert: usize) -> Result<Vec<f64>, JsError> {
        let busy = busiest_fraction(&self.splits.val, MATCH_ATTENTION_FRACTION).map_err(js_err)?;
        let maps = mean_inflow_attention(&self.params, &busy, ForwardMode::Full).map_err(js_err)?;
        Ok(maps.get(expert).map(|m| m.data().to_vec()).unwrap_or_default())
    }

    /// Hungarian matching of experts to the city's planted patterns, as
    /// JSON `[{expert, pattern, correlations}, …]`.
    pub fn matching(&self) -> Result<String, JsError> {
        let busy = busiest_fraction(&self.splits.val, MATCH_ATTENTION_FRACTION).map_err(js_err)?;
        let maps = mean_inflow_attention(&self.params, &busy, ForwardMode::Full).map_err(js_err)?;
        let m = match_experts_to_patterns(&maps, &self.masks).map_err(js_err)?;
        let rows: Vec<MatchRow> = m
            .assignment
            .iter()
            .enumerate()
            .map(|(i, a)| MatchRow {
                expert: i,
                pattern: a.map(|p| self.names[p].clone()),
                correlations: m.correlations[i].clone(),
            })
            .collect();
        Ok(serde_json::to_string(&rows).expect("serializable rows"))
    }

    pub fn test_len(&self) -> usize {
        self.splits.test.len()
    }

    /// Anchor interval of test sample `i` (its target is the next one).
    pub fn test_anchor(&self, i: usize) -> usize {
        self.splits.test.get(i).map_or(0, |s| s.t)
    }

    /// Denormalized inflow prediction for test sample `i`, row-major h×w.
    pub fn predict(&self, i: usize) -> Result<Vec<f64>, JsError> {
        let s = self
            .splits
            .test
            .get(i)
            .ok_or_else(|| JsError::new("test sample index out of range"))?;
        let tr = forward_with(&self.params, s, ForwardMode::Full).map_err(js_err)?;
        let denorm = minmax_invert(&tr.prediction, &self.norm);
        let hw = self.params.cfg.h * self.params.cfg.w;
        Ok(denorm.data()[..hw].to_vec())
    }

    /// Denormalized inflow truth for test sample `i`.
    pub fn truth(&self, i: usize) -> Result<Vec<f64>, JsError> {
        let s = self
            .splits
            .test
            .get(i)
            .ok_or_else(|| JsError::new("test sample index out of range"))?;
        let denorm = minmax_invert(&s.y, &self.norm);
        let hw = self.params.cfg.h * self.params.cfg.w;
        Ok(denorm.data()[..hw].to_vec())
    }
}

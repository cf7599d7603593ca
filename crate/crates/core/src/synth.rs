//! Synthetic city flows: planted functional patterns (each a spatial mask
//! × weekly intensity profile) summed in intensity space and observed
//! through Poisson counts. Ground-truth masks ship with the data, so
//! disentanglement can be scored exactly.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{
    ExternalField, ExternalSchema, FieldKind, FlowSeries, FlowSnapshot, GridSpec,
};
use crate::tensor::Tensor;

/// One planted pattern: where it lives, how it breathes over a week, and
/// how noisy its counts are.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatternSpec {
    pub name: String,
    /// (h, w) weights in [0, 1].
    pub spatial_mask: Tensor,
    /// (2, q_week) trips/interval: row 0 inflow, row 1 outflow.
    pub weekly_profile: Tensor,
    /// Poisson intensity multiplier s: counts are drawn as
    /// Poisson(s·λ)/s, so the mean stays λ while the relative noise
    /// shrinks as s grows.
    pub noise_scale: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub grid: GridSpec,
    pub patterns: Vec<PatternSpec>,
    pub weeks: usize,
    pub seed: u64,
    /// Whether the built-in profiles were given distinct weekend days.
    pub weekend_shift: bool,
    /// Skip the Poisson draw and emit expectations exactly.
    #[serde(default)]
    pub deterministic: bool,
}

impl SynthConfig {
    /// Steps per day implied by the grid's interval.
    pub fn steps_per_day(&self) -> usize {
        self.grid.steps_per_day()
    }

    pub fn validate(&self) -> Result<()> {
        if self.patterns.is_empty() {
            return Err(Error::config("need at least one pattern"));
        }
        if self.weeks < 2 {
            return Err(Error::config(format!(
                "need at least 2 weeks (one to predict from, one to predict), got {}",
                self.weeks
            )));
        }
        if 24 * 60 % self.grid.interval_minutes != 0 {
            return Err(Error::config(format!(
                "interval of {} minutes does not divide a day",
                self.grid.interval_minutes
            )));
        }
        let q_week = self.steps_per_day() * 7;
        let (h, w) = (self.grid.h, self.grid.w);
        for p in &self.patterns {
            if p.spatial_mask.shape() != [h, w] {
                return Err(Error::config(format!(
                    "pattern '{}' mask is {:?}, grid is {h}x{w}",
                    p.name,
                    p.spatial_mask.shape()
                )));
            }
            if p.weekly_profile.shape() != [2, q_week] {
                return Err(Error::config(format!(
                    "pattern '{}' profile is {:?}, expected [2, {q_week}]",
                    p.name,
                    p.weekly_profile.shape()
                )));
            }
            let mask_ok = p.spatial_mask.data().iter().all(|&v| (0.0..=1.0).contains(&v));
            if !mask_ok {
                return Err(Error::config(format!(
                    "pattern '{}' mask values must lie in [0, 1]",
                    p.name
                )));
            }
            if p.weekly_profile.data().iter().any(|&v| v < 0.0 || !v.is_finite()) {
                return Err(Error::config(format!(
                    "pattern '{}' profile must be non-negative",
                    p.name
                )));
            }
            if !(p.noise_scale > 0.0) {
                return Err(Error::config(format!(
                    "pattern '{}' noise scale must be positive",
                    p.name
                )));
            }
        }
        let any_signal = self.patterns.iter().any(|p| {
            p.spatial_mask.data().iter().any(|&m| m > 0.0)
                && p.weekly_profile.data().iter().any(|&v| v > 0.0)
        });
        if !any_signal {
            return Err(Error::config("total intensity is zero everywhere"));
        }
        Ok(())
    }
}

/// Day-of-week one-hot (Mon..Sun) plus a weekend/weekday one-hot; nine
/// encoded channels.
pub fn synth_external_schema() -> ExternalSchema {
    let days = ["mon", "tue", "wed", "thu", "fri", "sat", "sun"];
    ExternalSchema {
        fields: vec![
            ExternalField {
                name: "day_of_week".into(),
                kind: FieldKind::Categorical {
                    values: days.iter().map(|d| d.to_string()).collect(),
                },
            },
            ExternalField {
                name: "weekend".into(),
                kind: FieldKind::Categorical {
                    values: vec!["weekday".into(), "weekend".into()],
                },
            },
        ],
    }
}

pub struct SynthOutput {
    pub series: FlowSeries,
    /// Encoded external vector per interval (length 9).
    pub externals: Vec<Vec<f64>>,
    pub schema: ExternalSchema,
    /// Ground-truth (h, w) mask per pattern.
    pub masks: Vec<Tensor>,
    pub pattern_names: Vec<String>,
}

/// Generate `weeks` of flows. Counts per (interval, channel, cell) are
/// Σ_m Poisson(s_m·mask_m·profile_m)/s_m, drawn sequentially in time with
/// the seeded generator (identical config ⇒ identical series).
pub fn generate(cfg: &SynthConfig) -> Result<SynthOutput> {
    cfg.validate()?;
    let q_day = cfg.steps_per_day();
    let q_week = q_day * 7;
    let steps = cfg.weeks * q_week;
    let (h, w) = (cfg.grid.h, cfg.grid.w);
    let cells = h * w;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut series = FlowSeries::new(cfg.grid.clone());

    for t in 0..steps {
        let s = t % q_week;
        let mut chans = [vec![0.0f64; cells], vec![0.0f64; cells]];
        for (c, chan) in chans.iter_mut().enumerate() {
            for (cell, out) in chan.iter_mut().enumerate() {
                for p in &cfg.patterns {
                    let lambda = p.spatial_mask.data()[cell] * p.weekly_profile.data()[c * q_week + s];
                    if lambda <= 0.0 {
                        continue;
                    }
                    *out += if cfg.deterministic {
                        lambda
                    } else {
                        let draw = Poisson::new(lambda * p.noise_scale)
                            .map_err(|e| Error::numeric(format!("poisson({lambda}): {e}")))?
                            .sample(&mut rng);
                        draw / p.noise_scale
                    };
                }
            }
        }
        let [inflow, outflow] = chans;
        series.push(FlowSnapshot { t, inflow, outflow })?;
    }

    let schema = synth_external_schema();
    let externals = (0..steps)
        .map(|t| {
            let day = (t / q_day) % 7;
            let mut v = vec![0.0; 9];
            v[day] = 1.0;
            v[7 + usize::from(day >= 5)] = 1.0;
            v
        })
        .collect();

    Ok(SynthOutput {
        series,
        externals,
        schema,
        masks: cfg.patterns.iter().map(|p| p.spatial_mask.clone()).collect(),
        pattern_names: cfg.patterns.iter().map(|p| p.name.clone()).collect(),
    })
}

// ── Mask and profile construction ───────────────────────────────────────

/// Gaussian blob centered at (ci, cj), peak 1.
pub fn blob_mask(h: usize, w: usize, ci: f64, cj: f64, sigma: f64) -> Tensor {
    Tensor::from_fn([h, w], |idx| {
        let (i, j) = ((idx / w) as f64, (idx % w) as f64);
        let d2 = (i - ci) * (i - ci) + (j - cj) * (j - cj);
        (-d2 / (2.0 * sigma * sigma)).exp()
    })
}

/// Soft Voronoi partition of the grid among the given centers: mask m at a
/// cell is exp(−d²_m/2σ²) normalized over all masks, so every cell's masks
/// sum to 1 and each pattern owns the territory nearest its center. Unlike
/// isolated blobs, the masks tile the whole grid — no dead background.
pub fn partition_masks(h: usize, w: usize, centers: &[(f64, f64)], sigma: f64) -> Vec<Tensor> {
    let mut masks = vec![Tensor::zeros([h, w]); centers.len()];
    for idx in 0..h * w {
        let (i, j) = ((idx / w) as f64, (idx % w) as f64);
        let weights: Vec<f64> = centers
            .iter()
            .map(|&(ci, cj)| {
                let d2 = (i - ci) * (i - ci) + (j - cj) * (j - cj);
                (-d2 / (2.0 * sigma * sigma)).exp()
            })
            .collect();
        let total: f64 = weights.iter().sum();
        for (m, wgt) in masks.iter_mut().zip(&weights) {
            m.data_mut()[idx] = wgt / total;
        }
    }
    masks
}

/// Gaussian band at `radius` from the grid center, peak 1 — a ring road.
pub fn ring_mask(h: usize, w: usize, radius: f64, width: f64) -> Tensor {
    let (ci, cj) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    Tensor::from_fn([h, w], |idx| {
        let (i, j) = ((idx / w) as f64, (idx % w) as f64);
        let d = ((i - ci) * (i - ci) + (j - cj) * (j - cj)).sqrt();
        (-(d - radius) * (d - radius) / (2.0 * width * width)).exp()
    })
}

/// One day of intensities: a base level plus Gaussian bumps at the given
/// (hour, sigma_hours, amplitude) triples.
pub fn day_curve(q_day: usize, base: f64, bumps: &[(f64, f64, f64)]) -> Vec<f64> {
    (0..q_day)
        .map(|s| {
            let hour = (s as f64 + 0.5) * 24.0 / q_day as f64;
            base + bumps
                .iter()
                .map(|&(c, sig, amp)| amp * (-(hour - c) * (hour - c) / (2.0 * sig * sig)).exp())
                .sum::<f64>()
        })
        .collect()
}

/// Tile day curves into a (2, 7·q_day) weekly profile; weekend days
/// (Saturday, Sunday) are the weekday curve scaled by `weekend_factor`
/// when shifting is on, otherwise identical.
pub fn weekly_profile(
    inflow_day: &[f64],
    outflow_day: &[f64],
    weekend_factor: f64,
    weekend_shift: bool,
) -> Tensor {
    let q_day = inflow_day.len();
    assert_eq!(outflow_day.len(), q_day);
    let mut data = Vec::with_capacity(2 * 7 * q_day);
    for day_curve in [inflow_day, outflow_day] {
        for day in 0..7 {
            let f = if weekend_shift && day >= 5 { weekend_factor } else { 1.0 };
            data.extend(day_curve.iter().map(|v| v * f));
        }
    }
    Tensor::new([2, 7 * q_day], data)
}

// ── Presets ─────────────────────────────────────────────────────────────

struct PatternSeed {
    name: &'static str,
    mask: Tensor,
    inflow: Vec<f64>,
    outflow: Vec<f64>,
    weekend_factor: f64,
}

fn assemble(
    grid: GridSpec,
    seeds: Vec<PatternSeed>,
    weeks: usize,
    seed: u64,
    weekend_shift: bool,
) -> SynthConfig {
    let patterns = seeds
        .into_iter()
        .map(|p| PatternSpec {
            name: p.name.to_string(),
            spatial_mask: p.mask,
            weekly_profile: weekly_profile(&p.inflow, &p.outflow, p.weekend_factor, weekend_shift),
            noise_scale: 1.0,
        })
        .collect();
    SynthConfig { grid, patterns, weeks, seed, weekend_shift, deterministic: false }
}

/// `tiny8`: 8×8 grid, 30-minute intervals, 4 weeks, 3 residential /
/// office / commercial patterns. `ring16`: 16×16, those three plus a
/// ring-road band, masks mutually near-uncorrelated.
pub fn builtin_city(preset: &str, seed: u64, weekend_shift: bool) -> Result<SynthConfig> {
    let q = 48; // 30-minute intervals
    match preset {
        "tiny8" => {
            let grid = GridSpec::unit(8, 8, 30)?;
            // Districts tile the grid (soft Voronoi): every cell has a
            // dominant function, as in a dense city — no dead background.
            let mut masks =
                partition_masks(8, 8, &[(5.5, 1.5), (1.5, 5.5), (5.5, 5.5)], 2.0).into_iter();
            let seeds = vec![
                PatternSeed {
                    name: "residential",
                    mask: masks.next().unwrap(),
                    inflow: day_curve(q, 3.0, &[(18.5, 1.8, 25.0)]),
                    outflow: day_curve(q, 3.0, &[(8.0, 1.5, 25.0)]),
                    weekend_factor: 1.15,
                },
                PatternSeed {
                    name: "office",
                    mask: masks.next().unwrap(),
                    inflow: day_curve(q, 2.0, &[(9.0, 1.5, 28.0)]),
                    outflow: day_curve(q, 2.0, &[(18.0, 1.7, 28.0)]),
                    weekend_factor: 0.25,
                },
                PatternSeed {
                    name: "commercial",
                    mask: masks.next().unwrap(),
                    inflow: day_curve(q, 2.0, &[(12.5, 2.2, 18.0), (19.5, 1.8, 22.0)]),
                    outflow: day_curve(q, 2.0, &[(13.5, 2.2, 16.0), (21.0, 1.5, 22.0)]),
                    weekend_factor: 1.4,
                },
            ];
            Ok(assemble(grid, seeds, 4, seed, weekend_shift))
        }
        "ring16" => {
            let grid = GridSpec::unit(16, 16, 30)?;
            let seeds = vec![
                PatternSeed {
                    name: "residential",
                    mask: blob_mask(16, 16, 13.0, 2.0, 1.8),
                    inflow: day_curve(q, 3.0, &[(18.5, 1.8, 25.0)]),
                    outflow: day_curve(q, 3.0, &[(8.0, 1.5, 25.0)]),
                    weekend_factor: 1.15,
                },
                PatternSeed {
                    name: "office",
                    mask: blob_mask(16, 16, 2.0, 13.0, 1.8),
                    inflow: day_curve(q, 2.0, &[(9.0, 1.5, 28.0)]),
                    outflow: day_curve(q, 2.0, &[(18.0, 1.7, 28.0)]),
                    weekend_factor: 0.25,
                },
                PatternSeed {
                    name: "commercial",
                    mask: blob_mask(16, 16, 7.5, 7.5, 1.0),
                    inflow: day_curve(q, 2.0, &[(12.5, 2.2, 18.0), (19.5, 1.8, 22.0)]),
                    outflow: day_curve(q, 2.0, &[(13.5, 2.2, 16.0), (21.0, 1.5, 22.0)]),
                    weekend_factor: 1.4,
                },
                PatternSeed {
                    name: "ring_road",
                    mask: ring_mask(16, 16, 6.2, 0.75),
                    inflow: day_curve(q, 6.0, &[(8.5, 1.5, 20.0), (18.0, 1.8, 22.0)]),
                    outflow: day_curve(q, 6.0, &[(8.7, 1.5, 20.0), (18.3, 1.8, 22.0)]),
                    weekend_factor: 0.7,
                },
            ];
            Ok(assemble(grid, seeds, 4, seed, weekend_shift))
        }
        other => Err(Error::config(format!(
            "unknown preset '{other}'; available presets: tiny8, ring16"
        ))),
    }
}

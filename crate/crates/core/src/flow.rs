//! Grid geometry, trajectory-to-flow aggregation, min-max normalization,
//! and external-factor encoding.
//!
//! Flow semantics: a region's inflow at interval `t` counts consecutive
//! trajectory pairs whose destination lies in the region and whose source
//! does not (sources outside the whole grid count as "not in any region");
//! outflow mirrors this for sources. Each transition is attributed to the
//! interval of its earlier point.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

// ── Geometry ────────────────────────────────────────────────────────────

/// Geographic bounding box in degrees.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub lat_min: f64,
    pub lat_max: f64,
    pub lon_min: f64,
    pub lon_max: f64,
}

/// Uniform h×w partition of a bounding box plus the time-step length.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub h: usize,
    pub w: usize,
    pub bounds: Bounds,
    pub interval_minutes: u32,
}

impl GridSpec {
    pub fn new(h: usize, w: usize, bounds: Bounds, interval_minutes: u32) -> Result<Self> {
        if h < 1 || w < 1 {
            return Err(Error::config(format!("grid must be at least 1x1, got {h}x{w}")));
        }
        if !(bounds.lat_max > bounds.lat_min && bounds.lon_max > bounds.lon_min) {
            return Err(Error::config("degenerate bounding box"));
        }
        if interval_minutes == 0 {
            return Err(Error::config("interval must be positive"));
        }
        Ok(GridSpec { h, w, bounds, interval_minutes })
    }

    /// Unit-square bounds; convenient for synthetic cities and tests.
    pub fn unit(h: usize, w: usize, interval_minutes: u32) -> Result<Self> {
        GridSpec::new(
            h,
            w,
            Bounds { lat_min: 0.0, lat_max: 1.0, lon_min: 0.0, lon_max: 1.0 },
            interval_minutes,
        )
    }

    pub fn cells(&self) -> usize {
        self.h * self.w
    }

    /// Map a point to its region, or `None` when it falls outside.
    ///
    /// Cells are half-open in both axes, so a point exactly on an interior
    /// boundary belongs to the larger-index cell, and a point exactly on the
    /// global max edge is outside.
    pub fn cell_of(&self, lat: f64, lon: f64) -> Option<(usize, usize)> {
        let b = &self.bounds;
        let fi = (lat - b.lat_min) / (b.lat_max - b.lat_min) * self.h as f64;
        let fj = (lon - b.lon_min) / (b.lon_max - b.lon_min) * self.w as f64;
        if fi < 0.0 || fj < 0.0 {
            return None;
        }
        let (i, j) = (fi.floor() as usize, fj.floor() as usize);
        if i < self.h && j < self.w {
            Some((i, j))
        } else {
            None
        }
    }

    pub fn steps_per_day(&self) -> usize {
        (24 * 60 / self.interval_minutes) as usize
    }
}

// ── Flow containers ─────────────────────────────────────────────────────

/// In/out trip counts for every region at one interval.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowSnapshot {
    pub t: usize,
    /// Row-major h×w matrix.
    pub inflow: Vec<f64>,
    /// Row-major h×w matrix.
    pub outflow: Vec<f64>,
}

impl FlowSnapshot {
    pub fn zeros(t: usize, cells: usize) -> Self {
        FlowSnapshot { t, inflow: vec![0.0; cells], outflow: vec![0.0; cells] }
    }

    /// Stack as a (2, h, w) tensor, inflow first.
    pub fn to_tensor(&self, h: usize, w: usize) -> Tensor {
        let mut data = Vec::with_capacity(2 * h * w);
        data.extend_from_slice(&self.inflow);
        data.extend_from_slice(&self.outflow);
        Tensor::new([2, h, w], data)
    }
}

/// Consecutive snapshots over one grid.
#[derive(Clone, Debug)]
pub struct FlowSeries {
    pub grid: GridSpec,
    snapshots: Vec<FlowSnapshot>,
}

impl FlowSeries {
    pub fn new(grid: GridSpec) -> Self {
        FlowSeries { grid, snapshots: Vec::new() }
    }

    pub fn from_snapshots(grid: GridSpec, snapshots: Vec<FlowSnapshot>) -> Result<Self> {
        let mut s = FlowSeries::new(grid);
        for snap in snapshots {
            s.push(snap)?;
        }
        Ok(s)
    }

    pub fn push(&mut self, snap: FlowSnapshot) -> Result<()> {
        if snap.inflow.len() != self.grid.cells() || snap.outflow.len() != self.grid.cells() {
            return Err(Error::data(format!(
                "snapshot t={} has {} cells, grid has {}",
                snap.t,
                snap.inflow.len(),
                self.grid.cells()
            )));
        }
        if let Some(last) = self.snapshots.last() {
            if snap.t != last.t + 1 {
                return Err(Error::data(format!(
                    "snapshot t={} does not follow t={}",
                    snap.t, last.t
                )));
            }
        }
        self.snapshots.push(snap);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.snapshots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.snapshots.is_empty()
    }

    pub fn snapshots(&self) -> &[FlowSnapshot] {
        &self.snapshots
    }

    pub fn first_t(&self) -> Option<usize> {
        self.snapshots.first().map(|s| s.t)
    }

    /// Snapshot with interval index `t`, if present.
    pub fn at(&self, t: usize) -> Option<&FlowSnapshot> {
        let first = self.first_t()?;
        if t < first {
            return None;
        }
        self.snapshots.get(t - first)
    }

    /// Copy of the snapshots with positions `range` (by position, not t).
    pub fn window(&self, start: usize, end: usize) -> FlowSeries {
        FlowSeries {
            grid: self.grid.clone(),
            snapshots: self.snapshots[start..end].to_vec(),
        }
    }
}

// ── Trajectory aggregation ──────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrajPoint {
    /// Interval index the point was observed in.
    pub t: i64,
    pub lat: f64,
    pub lon: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub id: String,
    pub points: Vec<TrajPoint>,
}

/// Count region entries and exits at interval `t` over all trajectories.
pub fn compute_inflow_outflow(
    trajectories: &[Trajectory],
    grid: &GridSpec,
    t: i64,
) -> Result<FlowSnapshot> {
    if t < 0 {
        return Err(Error::config(format!("interval index must be non-negative, got {t}")));
    }
    if grid.cells() == 0 {
        return Err(Error::config("empty grid"));
    }
    let mut snap = FlowSnapshot::zeros(t as usize, grid.cells());
    for traj in trajectories {
        for p in &traj.points {
            if !(p.lat.is_finite() && p.lon.is_finite()) {
                return Err(Error::data(format!(
                    "trajectory {}: non-finite coordinate at t={}",
                    traj.id, p.t
                )));
            }
        }
        for pair in traj.points.windows(2) {
            let (a, b) = (&pair[0], &pair[1]);
            if a.t != t {
                continue;
            }
            let ca = grid.cell_of(a.lat, a.lon);
            let cb = grid.cell_of(b.lat, b.lon);
            if ca == cb {
                continue;
            }
            if let Some((i, j)) = ca {
                snap.outflow[i * grid.w + j] += 1.0;
            }
            if let Some((i, j)) = cb {
                snap.inflow[i * grid.w + j] += 1.0;
            }
        }
    }
    Ok(snap)
}

// ── Normalization ───────────────────────────────────────────────────────

/// Per-channel min-max statistics and the affine target range.
///
/// Channel 0 is inflow, channel 1 is outflow. Tensors with more than two
/// channels are treated as stacked (inflow, outflow) pairs, so channel `c`
/// uses statistics `c mod 2`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub min: [f64; 2],
    pub max: [f64; 2],
    pub lo: f64,
    pub hi: f64,
}

/// Fit per-channel extremes over the given (training) series.
///
/// Leakage note: pass only the training window; statistics must never see
/// validation or test intervals.
pub fn minmax_fit(series: &FlowSeries, target: (f64, f64)) -> Result<NormStats> {
    if series.is_empty() {
        return Err(Error::data("cannot fit normalization on an empty series"));
    }
    if target.1 <= target.0 {
        return Err(Error::config("target range must be increasing"));
    }
    let mut min = [f64::INFINITY; 2];
    let mut max = [f64::NEG_INFINITY; 2];
    for snap in series.snapshots() {
        for (ch, vals) in [(0, &snap.inflow), (1, &snap.outflow)] {
            for &v in vals.iter() {
                min[ch] = min[ch].min(v);
                max[ch] = max[ch].max(v);
            }
        }
    }
    for ch in 0..2 {
        if max[ch] <= min[ch] {
            return Err(Error::data(format!(
                "degenerate scale: channel {ch} is constant at {}",
                min[ch]
            )));
        }
    }
    Ok(NormStats { min, max, lo: target.0, hi: target.1 })
}

/// Map `[min, max]` affinely onto the target range, channel by channel.
/// Out-of-range inputs extrapolate linearly.
pub fn minmax_apply(x: &Tensor, stats: &NormStats) -> Tensor {
    affine_per_channel(x, |ch, v| {
        let s = stats;
        (v - s.min[ch]) / (s.max[ch] - s.min[ch]) * (s.hi - s.lo) + s.lo
    })
}

/// Inverse of [`minmax_apply`]; metrics are always computed on these
/// denormalized values.
pub fn minmax_invert(y: &Tensor, stats: &NormStats) -> Tensor {
    affine_per_channel(y, |ch, v| {
        let s = stats;
        (v - s.lo) / (s.hi - s.lo) * (s.max[ch] - s.min[ch]) + s.min[ch]
    })
}

fn affine_per_channel(x: &Tensor, f: impl Fn(usize, f64) -> f64) -> Tensor {
    let c = x.shape()[0];
    assert!(c % 2 == 0, "flow tensors stack (inflow, outflow) pairs, got {c} channels");
    let m = x.numel() / c;
    let mut out = x.clone();
    for ch in 0..c {
        for v in &mut out.data_mut()[ch * m..(ch + 1) * m] {
            *v = f(ch % 2, *v);
        }
    }
    out
}

/// Normalize every snapshot of a series with the same statistics.
pub fn minmax_apply_series(series: &FlowSeries, stats: &NormStats) -> FlowSeries {
    let map = |vals: &[f64], ch: usize| -> Vec<f64> {
        vals.iter()
            .map(|&v| (v - stats.min[ch]) / (stats.max[ch] - stats.min[ch]) * (stats.hi - stats.lo) + stats.lo)
            .collect()
    };
    FlowSeries {
        grid: series.grid.clone(),
        snapshots: series
            .snapshots()
            .iter()
            .map(|s| FlowSnapshot {
                t: s.t,
                inflow: map(&s.inflow, 0),
                outflow: map(&s.outflow, 1),
            })
            .collect(),
    }
}

// ── External factors ────────────────────────────────────────────────────

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FieldKind {
    Categorical { values: Vec<String> },
    Continuous { min: f64, max: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExternalField {
    pub name: String,
    #[serde(flatten)]
    pub kind: FieldKind,
}

/// Ordered descriptors determining the encoded vector layout.
#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct ExternalSchema {
    pub fields: Vec<ExternalField>,
}

impl ExternalSchema {
    /// Encoded vector length.
    pub fn len(&self) -> usize {
        self.fields
            .iter()
            .map(|f| match &f.kind {
                FieldKind::Categorical { values } => values.len(),
                FieldKind::Continuous { .. } => 1,
            })
            .sum()
    }

    pub fn is_empty(&self) -> bool {
        self.fields.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum FactorValue {
    Category(String),
    Number(f64),
}

/// Encoded external factors for one interval.
#[derive(Clone, Debug, PartialEq)]
pub struct ExternalVector {
    pub values: Vec<f64>,
}

/// One-hot categoricals and scale continuous factors to `[0, 1]` in schema
/// order. Out-of-range continuous values are clamped, with a note appended
/// to the returned warning list.
pub fn encode_external(
    record: &BTreeMap<String, FactorValue>,
    schema: &ExternalSchema,
) -> Result<(ExternalVector, Vec<String>)> {
    let mut values = Vec::with_capacity(schema.len());
    let mut warnings = Vec::new();
    for field in &schema.fields {
        let raw = record
            .get(&field.name)
            .ok_or_else(|| Error::data(format!("external record missing field '{}'", field.name)))?;
        match (&field.kind, raw) {
            (FieldKind::Categorical { values: allowed }, FactorValue::Category(c)) => {
                let pos = allowed.iter().position(|v| v == c).ok_or_else(|| {
                    Error::data(format!(
                        "unknown category '{c}' for field '{}', allowed: {allowed:?}",
                        field.name
                    ))
                })?;
                for k in 0..allowed.len() {
                    values.push(if k == pos { 1.0 } else { 0.0 });
                }
            }
            (FieldKind::Continuous { min, max }, FactorValue::Number(x)) => {
                if max <= min {
                    return Err(Error::config(format!(
                        "field '{}' has degenerate range [{min}, {max}]",
                        field.name
                    )));
                }
                let mut scaled = (x - min) / (max - min);
                if !(0.0..=1.0).contains(&scaled) {
                    warnings.push(format!(
                        "field '{}': value {x} outside [{min}, {max}], clamped",
                        field.name
                    ));
                    scaled = scaled.clamp(0.0, 1.0);
                }
                values.push(scaled);
            }
            (FieldKind::Categorical { .. }, FactorValue::Number(_)) => {
                return Err(Error::data(format!(
                    "field '{}' is categorical but got a number",
                    field.name
                )));
            }
            (FieldKind::Continuous { .. }, FactorValue::Category(_)) => {
                return Err(Error::data(format!(
                    "field '{}' is continuous but got a category",
                    field.name
                )));
            }
        }
    }
    Ok((ExternalVector { values }, warnings))
}

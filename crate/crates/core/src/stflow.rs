//! The "stflow" on-disk dataset container and trajectory CSV input.
//!
//! An stflow directory holds `manifest.json` plus raw little-endian f32
//! arrays in C order: `flow.bin` (T×2×h×w), `external.bin` (T×n_ext), and
//! optionally `truth_masks.bin` (M×h×w) for synthetic cities with known
//! generating patterns.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{ExternalSchema, FlowSeries, FlowSnapshot, GridSpec, TrajPoint, Trajectory};

pub const FORMAT_TAG: &str = "stflow/1";

/// A fully loaded dataset: raw (denormalized) flows plus per-interval
/// external factor vectors and optional generator ground truth.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub grid: GridSpec,
    pub start_timestamp: String,
    pub series: FlowSeries,
    pub external_schema: ExternalSchema,
    /// One encoded vector per interval, schema length each.
    pub externals: Vec<Vec<f64>>,
    /// Ground-truth pattern intensity masks, h·w each, when known.
    pub truth_masks: Option<Vec<Vec<f64>>>,
    /// Names matching `truth_masks`; empty when unknown.
    pub pattern_names: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: String,
    grid: GridSpec,
    start_timestamp: String,
    channels: Vec<String>,
    external_schema: ExternalSchema,
    shapes: Shapes,
    dtype: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    patterns: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct Shapes {
    flow: Vec<usize>,
    external: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    truth_masks: Option<Vec<usize>>,
}

pub fn save_stflow(dir: &Path, ds: &Dataset) -> Result<()> {
    let t_len = ds.series.len();
    let (h, w) = (ds.grid.h, ds.grid.w);
    let n_ext = ds.external_schema.len();
    if ds.externals.len() != t_len {
        return Err(Error::data(format!(
            "{} external vectors for {} intervals",
            ds.externals.len(),
            t_len
        )));
    }
    fs::create_dir_all(dir)?;

    let manifest = Manifest {
        format: FORMAT_TAG.into(),
        grid: ds.grid.clone(),
        start_timestamp: ds.start_timestamp.clone(),
        channels: vec!["inflow".into(), "outflow".into()],
        external_schema: ds.external_schema.clone(),
        shapes: Shapes {
            flow: vec![t_len, 2, h, w],
            external: vec![t_len, n_ext],
            truth_masks: ds.truth_masks.as_ref().map(|m| vec![m.len(), h, w]),
        },
        dtype: "f32le".into(),
        patterns: ds.pattern_names.clone(),
    };
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::data(format!("manifest serialization: {e}")))?;
    fs::write(dir.join("manifest.json"), json)?;

    let mut flow = Vec::with_capacity(t_len * 2 * h * w);
    for snap in ds.series.snapshots() {
        flow.extend_from_slice(&snap.inflow);
        flow.extend_from_slice(&snap.outflow);
    }
    write_f32s(&dir.join("flow.bin"), &flow)?;

    let ext: Vec<f64> = ds.externals.iter().flatten().copied().collect();
    write_f32s(&dir.join("external.bin"), &ext)?;

    if let Some(masks) = &ds.truth_masks {
        let m: Vec<f64> = masks.iter().flatten().copied().collect();
        write_f32s(&dir.join("truth_masks.bin"), &m)?;
    }
    Ok(())
}

pub fn load_stflow(dir: &Path) -> Result<Dataset> {
    let manifest_path = dir.join("manifest.json");
    let raw = fs::read_to_string(&manifest_path)
        .map_err(|e| Error::data(format!("cannot read {}: {e}", manifest_path.display())))?;
    let manifest: Manifest =
        serde_json::from_str(&raw).map_err(|e| Error::data(format!("malformed manifest: {e}")))?;
    if manifest.format != FORMAT_TAG {
        return Err(Error::data(format!(
            "unsupported container format '{}', expected '{FORMAT_TAG}'",
            manifest.format
        )));
    }
    if manifest.dtype != "f32le" {
        return Err(Error::data(format!("unsupported dtype '{}'", manifest.dtype)));
    }
    let grid = GridSpec::new(
        manifest.grid.h,
        manifest.grid.w,
        manifest.grid.bounds,
        manifest.grid.interval_minutes,
    )?;
    let (h, w) = (grid.h, grid.w);
    let shape = &manifest.shapes.flow;
    if shape.len() != 4 || shape[1] != 2 || shape[2] != h || shape[3] != w {
        return Err(Error::data(format!("flow shape {shape:?} inconsistent with grid {h}x{w}")));
    }
    let t_len = shape[0];

    let flow = read_f32s(&dir.join("flow.bin"), t_len * 2 * h * w)?;
    let mut series = FlowSeries::new(grid.clone());
    for t in 0..t_len {
        let base = t * 2 * h * w;
        series.push(FlowSnapshot {
            t,
            inflow: flow[base..base + h * w].to_vec(),
            outflow: flow[base + h * w..base + 2 * h * w].to_vec(),
        })?;
    }

    let n_ext = manifest.external_schema.len();
    if manifest.shapes.external != vec![t_len, n_ext] {
        return Err(Error::data(format!(
            "external shape {:?} inconsistent with schema length {n_ext}",
            manifest.shapes.external
        )));
    }
    let ext_flat = read_f32s(&dir.join("external.bin"), t_len * n_ext)?;
    let externals = (0..t_len)
        .map(|t| ext_flat[t * n_ext..(t + 1) * n_ext].to_vec())
        .collect();

    let truth_masks = match &manifest.shapes.truth_masks {
        Some(ms) => {
            if ms.len() != 3 || ms[1] != h || ms[2] != w {
                return Err(Error::data(format!("truth mask shape {ms:?} inconsistent")));
            }
            let flat = read_f32s(&dir.join("truth_masks.bin"), ms[0] * h * w)?;
            Some((0..ms[0]).map(|m| flat[m * h * w..(m + 1) * h * w].to_vec()).collect())
        }
        None => None,
    };

    Ok(Dataset {
        grid,
        start_timestamp: manifest.start_timestamp,
        series,
        external_schema: manifest.external_schema,
        externals,
        truth_masks,
        pattern_names: manifest.patterns,
    })
}

fn write_f32s(path: &Path, values: &[f64]) -> Result<()> {
    let mut out = fs::File::create(path)?;
    let mut buf = Vec::with_capacity(values.len() * 4);
    for &v in values {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out.write_all(&buf)?;
    Ok(())
}

fn read_f32s(path: &Path, expected: usize) -> Result<Vec<f64>> {
    let bytes =
        fs::read(path).map_err(|e| Error::data(format!("cannot read {}: {e}", path.display())))?;
    if bytes.len() != expected * 4 {
        return Err(Error::data(format!(
            "{}: expected {} bytes ({expected} f32 values), found {}",
            path.display(),
            expected * 4,
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect())
}

// ── Trajectory CSV ──────────────────────────────────────────────────────

/// Parse line-delimited `traj_id, t, lat, lon` records.
///
/// Fields are plain (no quoting); an optional header line starting with
/// `traj_id` is skipped. Points keep file order within each trajectory and
/// trajectories keep first-appearance order.
pub fn parse_trajectory_csv(reader: impl BufRead) -> Result<Vec<Trajectory>> {
    let mut order: Vec<String> = Vec::new();
    let mut by_id: BTreeMap<String, Vec<TrajPoint>> = BTreeMap::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        if lineno == 0 && trimmed.starts_with("traj_id") {
            continue;
        }
        let fields: Vec<&str> = trimmed.split(',').map(str::trim).collect();
        if fields.len() != 4 {
            return Err(Error::data(format!(
                "line {}: expected 4 fields `traj_id, t, lat, lon`, got {}",
                lineno + 1,
                fields.len()
            )));
        }
        let id = fields[0].to_string();
        let t: i64 = fields[1]
            .parse()
            .map_err(|_| Error::data(format!("line {}: bad interval '{}'", lineno + 1, fields[1])))?;
        let lat: f64 = fields[2]
            .parse()
            .map_err(|_| Error::data(format!("line {}: bad latitude '{}'", lineno + 1, fields[2])))?;
        let lon: f64 = fields[3]
            .parse()
            .map_err(|_| Error::data(format!("line {}: bad longitude '{}'", lineno + 1, fields[3])))?;
        if !by_id.contains_key(&id) {
            order.push(id.clone());
        }
        by_id.entry(id).or_default().push(TrajPoint { t, lat, lon });
    }
    Ok(order
        .into_iter()
        .map(|id| {
            let points = by_id.remove(&id).unwrap();
            Trajectory { id, points }
        })
        .collect())
}

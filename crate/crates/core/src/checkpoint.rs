//! Model checkpoints: a magic-tagged binary container holding a JSON header
//! (configs, normalization statistics, bookkeeping) followed by named f32
//! little-endian arrays.
//!
//! Layout:
//! ```text
//! "STMOEPK1"            8-byte magic
//! header length         u64 LE
//! header                JSON, UTF-8
//! array data            f32 LE, concatenated in header order
//! ```
//!
//! Model parameters are stored in layout order under their parameter names;
//! any further arrays (optimizer moments, under `adam.m.*` / `adam.v.*`)
//! ride along verbatim. Values are f64 in memory; snapshots are passed
//! through f32 before saving (`ModelParams::quantize_f32`), which makes
//! save → load → evaluate reproduce in-memory results bit for bit.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::NormStats;
use crate::fusion::FusionConfig;
use crate::model::{param_layout, ModelConfig, ModelParams};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"STMOEPK1";
const VERSION: u32 = 1;

/// Training bookkeeping carried inside the header.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    /// Epoch the snapshot was taken at (0 = untrained initialization).
    pub epoch: usize,
    /// Denormalized validation MSE of the snapshot.
    pub best_val_mse: f64,
    /// Seed the run was started with.
    pub seed: u64,
    /// Optimizer step count, for exact resume.
    pub adam_step: u64,
}

/// Everything a run needs to evaluate or resume: parameters, the temporal
/// fusion recipe, normalization statistics, and optional extra arrays
/// (optimizer state).
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub fusion: FusionConfig,
    pub norm: NormStats,
    pub meta: CheckpointMeta,
    /// Named arrays beyond the model parameters, in file order.
    pub extra: Vec<(String, Tensor)>,
}

#[derive(Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    model: ModelConfig,
    fusion: FusionConfig,
    norm: NormStats,
    meta: CheckpointMeta,
    arrays: Vec<ArrayEntry>,
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    let mut arrays = Vec::new();
    let mut data: Vec<&Tensor> = Vec::new();
    for (name, t) in ck.params.names().iter().zip(ck.params.tensors()) {
        arrays.push(ArrayEntry { name: name.clone(), shape: t.shape().to_vec() });
        data.push(t);
    }
    for (name, t) in &ck.extra {
        arrays.push(ArrayEntry { name: name.clone(), shape: t.shape().to_vec() });
        data.push(t);
    }
    let header = Header {
        version: VERSION,
        model: ck.params.cfg.clone(),
        fusion: ck.fusion,
        norm: ck.norm,
        meta: ck.meta,
        arrays,
    };
    let header_bytes =
        serde_json::to_vec(&header).map_err(|e| Error::data(format!("header encode: {e}")))?;

    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
    w.write_all(&header_bytes)?;
    for t in data {
        for &v in t.data() {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let file = File::open(path)
        .map_err(|e| Error::data(format!("cannot open checkpoint {}: {e}", path.display())))?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::data(format!(
            "{}: not a checkpoint (bad magic)",
            path.display()
        )));
    }
    let mut len8 = [0u8; 8];
    r.read_exact(&mut len8)?;
    let header_len = u64::from_le_bytes(len8) as usize;
    let mut header_bytes = vec![0u8; header_len];
    r.read_exact(&mut header_bytes)?;
    let header: Header = serde_json::from_slice(&header_bytes)
        .map_err(|e| Error::data(format!("{}: header decode: {e}", path.display())))?;
    if header.version != VERSION {
        return Err(Error::data(format!(
            "unsupported checkpoint version {}",
            header.version
        )));
    }

    let mut tensors = Vec::with_capacity(header.arrays.len());
    for entry in &header.arrays {
        let n: usize = entry.shape.iter().product();
        let mut buf = vec![0u8; n * 4];
        r.read_exact(&mut buf).map_err(|e| {
            Error::data(format!("{}: array '{}' truncated: {e}", path.display(), entry.name))
        })?;
        let data: Vec<f64> = buf
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect();
        tensors.push(Tensor::new(entry.shape.clone(), data));
    }

    // The leading arrays must be the model parameters in layout order; the
    // rest are extras.
    let layout = param_layout(&header.model);
    if header.arrays.len() < layout.len() {
        return Err(Error::data(format!(
            "checkpoint holds {} arrays, model layout needs {}",
            header.arrays.len(),
            layout.len()
        )));
    }
    let extra_tensors = tensors.split_off(layout.len());
    let names: Vec<String> =
        header.arrays[..layout.len()].iter().map(|a| a.name.clone()).collect();
    let params = ModelParams::from_parts(header.model, names, tensors)?;
    let extra = header.arrays[layout.len()..]
        .iter()
        .map(|a| a.name.clone())
        .zip(extra_tensors)
        .collect();
    Ok(Checkpoint {
        params,
        fusion: header.fusion,
        norm: header.norm,
        meta: header.meta,
        extra,
    })
}

//! The mixture-of-experts forward pass: K expert backbones, a spatial
//! gating network whose output is softmaxed into per-cell attention, a
//! temporal sigmoid gate, and an external-factor embedder.
//!
//! Prediction: `Ŷ = Tanh(Σ_i a_i ⊙ E_i) ⊙ σ(G_t(X))` with attention
//! `a_i = softmax_i(G_s(X)_i ⊙ E_i)` taken across experts independently at
//! every channel and cell. The responsibility target per expert is
//! `H_i = σ(G_t(X)) ⊙ Tanh(E_i)`.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::fusion::InputSample;
use crate::graph::{softmax_axis0, Graph, Var};
use crate::tensor::Tensor;

pub const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneKind {
    /// Plain convolution stack: conv → norm → ReLU repeated, linear last layer.
    ConvStack,
    /// Stacked convolutional GRU over the temporal frame groups.
    RecurrentConv,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    /// Per-channel normalization over the spatial plane.
    Channel,
    None,
}

/// Everything needed to lay out parameters and run the forward pass.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Expert count K.
    pub k: usize,
    pub backbone: BackboneKind,
    pub filters: usize,
    /// Convolution layers per stack (or stacked recurrent layers).
    pub depth: usize,
    /// Odd kernel side length.
    pub kernel: usize,
    pub norm: NormKind,
    /// Embedded external channels n_w (0 disables the embedder).
    pub ext_channels: usize,
    /// Spatial gate present (disabling removes its parameters entirely).
    pub use_gs: bool,
    /// Temporal gate present.
    pub use_gt: bool,
    pub h: usize,
    pub w: usize,
    /// Flow channels in the fused input, 2·(n_c+n_p+n_q).
    pub flow_channels: usize,
    /// Raw external vector length (schema length).
    pub n_ext_raw: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k < 1 {
            return Err(Error::config("need at least one expert"));
        }
        if self.filters < 1 || self.depth < 1 {
            return Err(Error::config("filters and depth must be at least 1"));
        }
        if self.kernel % 2 == 0 || self.kernel == 0 {
            return Err(Error::config(format!("kernel must be odd, got {}", self.kernel)));
        }
        if self.h < 1 || self.w < 1 {
            return Err(Error::config("grid must be at least 1x1"));
        }
        if self.flow_channels < 2 || self.flow_channels % 2 != 0 {
            return Err(Error::config(format!(
                "flow channel count must be a positive even number, got {}",
                self.flow_channels
            )));
        }
        Ok(())
    }

    /// External embedding channels actually present.
    pub fn ext_block(&self) -> usize {
        if self.n_ext_raw == 0 {
            0
        } else {
            self.ext_channels
        }
    }

    /// Channels of the fused input seen by experts and gates.
    pub fn fused_channels(&self) -> usize {
        self.flow_channels + self.ext_block()
    }
}

// ── Parameter layout ────────────────────────────────────────────────────

fn conv_stack_layout(
    out: &mut Vec<(String, Vec<usize>)>,
    prefix: &str,
    cfg: &ModelConfig,
    in_ch: usize,
    out_ch: usize,
) {
    let k = cfg.kernel;
    for l in 0..cfg.depth {
        let ic = if l == 0 { in_ch } else { cfg.filters };
        let oc = if l + 1 == cfg.depth { out_ch } else { cfg.filters };
        out.push((format!("{prefix}.conv{l}.w"), vec![oc, ic, k, k]));
        out.push((format!("{prefix}.conv{l}.b"), vec![oc]));
    }
}

fn recurrent_layout(out: &mut Vec<(String, Vec<usize>)>, prefix: &str, cfg: &ModelConfig) {
    let k = cfg.kernel;
    let f = cfg.filters;
    for l in 0..cfg.depth {
        let step_in = if l == 0 { 2 + cfg.ext_block() } else { f };
        let ic = step_in + f;
        for gate in ["z", "r", "h"] {
            out.push((format!("{prefix}.gru{l}.w{gate}"), vec![f, ic, k, k]));
            out.push((format!("{prefix}.gru{l}.b{gate}"), vec![f]));
        }
    }
    out.push((format!("{prefix}.head.w"), vec![2, f, k, k]));
    out.push((format!("{prefix}.head.b"), vec![2]));
}

/// Ordered (name, shape) pairs for every parameter tensor of a model.
pub fn param_layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let mut out = Vec::new();
    if cfg.ext_block() > 0 {
        let n_out = cfg.ext_block() * cfg.h * cfg.w;
        out.push(("ext.w".to_string(), vec![n_out, cfg.n_ext_raw]));
        out.push(("ext.b".to_string(), vec![n_out]));
    }
    for i in 0..cfg.k {
        let prefix = format!("expert{i}");
        match cfg.backbone {
            BackboneKind::ConvStack => {
                conv_stack_layout(&mut out, &prefix, cfg, cfg.fused_channels(), 2)
            }
            BackboneKind::RecurrentConv => recurrent_layout(&mut out, &prefix, cfg),
        }
    }
    if cfg.use_gs {
        conv_stack_layout(&mut out, "gs", cfg, cfg.fused_channels(), cfg.k * 2);
    }
    if cfg.use_gt {
        conv_stack_layout(&mut out, "gt", cfg, cfg.fused_channels(), 2);
    }
    out
}

/// Named parameter tensors in a fixed order.
#[derive(Clone, Debug)]
pub struct ModelParams {
    pub cfg: ModelConfig,
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: BTreeMap<String, usize>,
}

impl ModelParams {
    /// Fan-in-scaled uniform initialization; the seed fully determines
    /// every draw.
    pub fn init(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let layout = param_layout(&cfg);
        let mut tensors = Vec::with_capacity(layout.len());
        for (name, shape) in &layout {
            let fan_in = fan_in_of(name, shape);
            let bound = 1.0 / (fan_in as f64).sqrt();
            tensors.push(Tensor::from_fn(shape.clone(), |_| rng.gen_range(-bound..bound)));
        }
        Self::from_parts(cfg, layout.into_iter().map(|(n, _)| n).collect(), tensors)
    }

    /// Assemble from externally provided tensors (checkpoint load); names,
    /// order, and shapes must match the config's layout exactly.
    pub fn from_parts(cfg: ModelConfig, names: Vec<String>, tensors: Vec<Tensor>) -> Result<Self> {
        cfg.validate()?;
        let layout = param_layout(&cfg);
        if names.len() != layout.len() {
            return Err(Error::data(format!(
                "parameter count mismatch: {} provided, layout has {}",
                names.len(),
                layout.len()
            )));
        }
        for (i, (name, shape)) in layout.iter().enumerate() {
            if &names[i] != name {
                return Err(Error::data(format!(
                    "parameter {i} is '{}', expected '{name}'",
                    names[i]
                )));
            }
            if tensors[i].shape() != &shape[..] {
                return Err(Error::data(format!(
                    "parameter '{name}' has shape {:?}, expected {shape:?}",
                    tensors[i].shape()
                )));
            }
        }
        let index = names.iter().cloned().zip(0..).collect();
        Ok(ModelParams { cfg, names, tensors, index })
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    /// Total scalar parameter count.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Pass every value through f32, so that an f32 checkpoint of these
    /// params reloads bit-exactly.
    pub fn quantize_f32(&mut self) {
        for t in &mut self.tensors {
            for v in t.data_mut() {
                *v = *v as f32 as f64;
            }
        }
    }
}

fn fan_in_of(name: &str, shape: &[usize]) -> usize {
    if name.ends_with(".b") || shape.len() == 1 {
        // Bias bound follows its weight's fan-in; conv biases pair with
        // [oc, ic, k, k] weights laid out immediately before them, affine
        // biases with [m, n]. Reconstructing from the bias shape alone is
        // impossible, so biases use fan-in 1 (bound ±1), which keeps the
        // layout self-contained; experts see well-scaled weights either way.
        1
    } else if shape.len() == 4 {
        shape[1] * shape[2] * shape[3]
    } else {
        shape[1]
    }
}

// ── Forward pass ────────────────────────────────────────────────────────

/// Which gates to apply; `Full` honors the config, the others force an
/// evaluation-time ablation of a trained model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ForwardMode {
    Full,
    /// Attention from expert outputs alone (self-attention), spatial gate unused.
    NoGs,
    /// Temporal gate pinned to 1 everywhere.
    NoGt,
}

/// Graph handles to every parameter tensor, aligned with `ModelParams`.
pub struct ParamVars {
    pub vars: Vec<Var>,
}

pub fn leaf_params(g: &mut Graph, params: &ModelParams) -> ParamVars {
    ParamVars { vars: params.tensors().iter().map(|t| g.leaf(t.clone())).collect() }
}

impl ParamVars {
    fn of(&self, params: &ModelParams, name: &str) -> Var {
        let i = params
            .index_of(name)
            .unwrap_or_else(|| panic!("parameter '{name}' missing from layout"));
        self.vars[i]
    }
}

/// Graph handles to all intermediates of one forward evaluation.
pub struct TraceVars {
    pub fused: Var,
    /// E_i(X), one (2,h,w) node per expert.
    pub expert_raw: Vec<Var>,
    /// Raw attention logits stacked, (K,2,h,w).
    pub logit_stack: Var,
    /// Softmaxed attention, (K,2,h,w).
    pub attention: Var,
    /// e_i = a_i ⊙ E_i, one (2,h,w) node per expert.
    pub gated: Vec<Var>,
    /// σ(G_t(X)) — all-ones when the temporal gate is ablated, (2,h,w).
    pub temporal_gate: Var,
    /// H_i = σ(G_t) ⊙ Tanh(E_i), one (2,h,w) node per expert.
    pub per_expert_h: Vec<Var>,
    /// Ŷ, (2,h,w).
    pub prediction: Var,
}

fn conv_stack_on_graph(
    g: &mut Graph,
    params: &ModelParams,
    vars: &ParamVars,
    prefix: &str,
    x: Var,
) -> Var {
    let cfg = &params.cfg;
    let mut cur = x;
    for l in 0..cfg.depth {
        let w = vars.of(params, &format!("{prefix}.conv{l}.w"));
        let b = vars.of(params, &format!("{prefix}.conv{l}.b"));
        cur = g.conv2d_same(cur, w, b);
        if l + 1 < cfg.depth {
            if cfg.norm == NormKind::Channel {
                cur = g.channel_norm(cur, NORM_EPS);
            }
            cur = g.relu(cur);
        }
    }
    cur
}

fn recurrent_on_graph(
    g: &mut Graph,
    params: &ModelParams,
    vars: &ParamVars,
    prefix: &str,
    fused: Var,
) -> Var {
    let cfg = &params.cfg;
    let blk = cfg.ext_block();
    let frames = cfg.flow_channels / 2;
    // Step inputs for the first layer: each temporal frame (2 channels,
    // oldest first — the fused layout is already chronological) with the
    // external block appended.
    let mut seq: Vec<Var> = (0..frames)
        .map(|f| {
            let frame = g.slice0(fused, blk + 2 * f, 2);
            if blk > 0 {
                let ext = g.slice0(fused, 0, blk);
                g.concat0(&[frame, ext])
            } else {
                frame
            }
        })
        .collect();
    for l in 0..cfg.depth {
        let wz = vars.of(params, &format!("{prefix}.gru{l}.wz"));
        let bz = vars.of(params, &format!("{prefix}.gru{l}.bz"));
        let wr = vars.of(params, &format!("{prefix}.gru{l}.wr"));
        let br = vars.of(params, &format!("{prefix}.gru{l}.br"));
        let wh = vars.of(params, &format!("{prefix}.gru{l}.wh"));
        let bh = vars.of(params, &format!("{prefix}.gru{l}.bh"));
        let mut h = g.leaf(Tensor::zeros([cfg.filters, cfg.h, cfg.w]));
        let mut next_seq = Vec::with_capacity(seq.len());
        for &x_t in &seq {
            let xh = g.concat0(&[x_t, h]);
            let zc = g.conv2d_same(xh, wz, bz);
            let z = g.sigmoid(zc);
            let rc = g.conv2d_same(xh, wr, br);
            let r = g.sigmoid(rc);
            let rh = g.mul(r, h);
            let xrh = g.concat0(&[x_t, rh]);
            let hc = g.conv2d_same(xrh, wh, bh);
            let hcand = g.tanh(hc);
            // h' = (1 − z) ⊙ h + z ⊙ h̃
            let nz = g.neg(z);
            let one_minus_z = g.add_const(nz, 1.0);
            let keep = g.mul(one_minus_z, h);
            let take = g.mul(z, hcand);
            h = g.add(keep, take);
            next_seq.push(h);
        }
        seq = next_seq;
    }
    let w = vars.of(params, &format!("{prefix}.head.w"));
    let b = vars.of(params, &format!("{prefix}.head.b"));
    let last = *seq.last().expect("at least one temporal frame");
    g.conv2d_same(last, w, b)
}

fn backbone_on_graph(
    g: &mut Graph,
    params: &ModelParams,
    vars: &ParamVars,
    prefix: &str,
    fused: Var,
) -> Var {
    match params.cfg.backbone {
        BackboneKind::ConvStack => conv_stack_on_graph(g, params, vars, prefix, fused),
        BackboneKind::RecurrentConv => recurrent_on_graph(g, params, vars, prefix, fused),
    }
}

/// Build the whole forward computation on `g`, returning handles to every
/// intermediate the losses need.
pub fn forward_on_graph(
    g: &mut Graph,
    params: &ModelParams,
    vars: &ParamVars,
    x: Var,
    external: &[f64],
    mode: ForwardMode,
) -> Result<TraceVars> {
    let cfg = &params.cfg;
    let (h, w) = (cfg.h, cfg.w);
    if g.value(x).shape() != [cfg.flow_channels, h, w] {
        return Err(Error::config(format!(
            "input has shape {:?}, model expects [{}, {h}, {w}]",
            g.value(x).shape(),
            cfg.flow_channels
        )));
    }

    // Fused input: embedded externals lead, then the flow frames.
    let fused = if cfg.ext_block() > 0 {
        if external.len() != cfg.n_ext_raw {
            return Err(Error::config(format!(
                "external vector has length {}, schema says {}",
                external.len(),
                cfg.n_ext_raw
            )));
        }
        let v = g.leaf(Tensor::new([cfg.n_ext_raw], external.to_vec()));
        let ew = vars.of(params, "ext.w");
        let eb = vars.of(params, "ext.b");
        let aff = g.affine(v, ew, eb);
        let act = g.relu(aff);
        let block = g.reshape(act, [cfg.ext_block(), h, w]);
        g.concat0(&[block, x])
    } else {
        x
    };
    debug_assert_eq!(g.value(fused).shape()[0], cfg.fused_channels());

    let expert_raw: Vec<Var> =
        (0..cfg.k).map(|i| backbone_on_graph(g, params, vars, &format!("expert{i}"), fused)).collect();

    // Attention logits: G_s slice ⊙ E_i, or E_i alone when the spatial
    // gate is ablated or absent.
    let with_gs = cfg.use_gs && mode != ForwardMode::NoGs;
    let logits: Vec<Var> = if with_gs {
        let gs_out = conv_stack_on_graph(g, params, vars, "gs", fused);
        expert_raw
            .iter()
            .enumerate()
            .map(|(i, &e)| {
                let slice = g.slice0(gs_out, 2 * i, 2);
                g.mul(slice, e)
            })
            .collect()
    } else {
        expert_raw.clone()
    };
    for (i, &l) in logits.iter().enumerate() {
        if !g.value(l).is_finite() {
            return Err(Error::numeric(format!(
                "expert {i} produced non-finite attention logits"
            )));
        }
    }
    let logit_stack = g.stack0(&logits);
    let attention = g.softmax0(logit_stack);

    let gated: Vec<Var> = expert_raw
        .iter()
        .enumerate()
        .map(|(i, &e)| {
            let a = g.index0(attention, i);
            g.mul(a, e)
        })
        .collect();
    let gated_stack = g.stack0(&gated);
    let mixed = g.sum_axis0(gated_stack);
    let squashed = g.tanh(mixed);

    let with_gt = cfg.use_gt && mode != ForwardMode::NoGt;
    let (temporal_gate, prediction, per_expert_h) = if with_gt {
        let gt_out = conv_stack_on_graph(g, params, vars, "gt", fused);
        let gate = g.sigmoid(gt_out);
        let pred = g.mul(squashed, gate);
        let hs = expert_raw
            .iter()
            .map(|&e| {
                let te = g.tanh(e);
                g.mul(gate, te)
            })
            .collect();
        (gate, pred, hs)
    } else {
        let ones = g.leaf(Tensor::full([2, h, w], 1.0));
        let hs = expert_raw.iter().map(|&e| g.tanh(e)).collect();
        (ones, squashed, hs)
    };

    Ok(TraceVars {
        fused,
        expert_raw,
        logit_stack,
        attention,
        gated,
        temporal_gate,
        per_expert_h,
        prediction,
    })
}

// ── Plain-tensor API ────────────────────────────────────────────────────

/// All intermediates of one forward evaluation as plain tensors.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    /// Ŷ, (2,h,w).
    pub prediction: Tensor,
    /// E_i(X) stacked, (K,2,h,w).
    pub expert_raw: Tensor,
    /// a_i stacked, (K,2,h,w); sums to 1 across the K axis.
    pub attention: Tensor,
    /// e_i = a_i ⊙ E_i stacked, (K,2,h,w).
    pub gated: Tensor,
    /// σ(G_t(X)), (2,h,w); all ones under the ¬G_t ablation.
    pub temporal_gate: Tensor,
    /// H_i stacked, (K,2,h,w).
    pub per_expert_h: Tensor,
}

impl ForwardTrace {
    pub fn k(&self) -> usize {
        self.expert_raw.shape()[0]
    }

    /// One expert's (2,h,w) slice of a stacked field.
    pub fn slice_expert(field: &Tensor, i: usize) -> Tensor {
        let m = field.numel() / field.shape()[0];
        Tensor::new(
            field.shape()[1..].to_vec(),
            field.data()[i * m..(i + 1) * m].to_vec(),
        )
    }
}

fn run_forward(params: &ModelParams, sample: &InputSample, mode: ForwardMode) -> Result<ForwardTrace> {
    let mut g = Graph::new();
    let vars = leaf_params(&mut g, params);
    let x = g.leaf(sample.x.clone());
    let tv = forward_on_graph(&mut g, params, &vars, x, &sample.external, mode)?;
    let stack = |items: &[Var]| -> Tensor {
        let mut data = Vec::new();
        for &v in items {
            data.extend_from_slice(g.value(v).data());
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(g.value(items[0]).shape());
        Tensor::new(shape, data)
    };
    Ok(ForwardTrace {
        prediction: g.value(tv.prediction).clone(),
        expert_raw: stack(&tv.expert_raw),
        attention: g.value(tv.attention).clone(),
        gated: stack(&tv.gated),
        temporal_gate: g.value(tv.temporal_gate).clone(),
        per_expert_h: stack(&tv.per_expert_h),
    })
}

/// Full forward pass with both gates (as configured).
pub fn model_forward(params: &ModelParams, sample: &InputSample) -> Result<ForwardTrace> {
    run_forward(params, sample, ForwardMode::Full)
}

/// Ablation ¬G_s: attention logits are the expert outputs themselves.
pub fn forward_no_gs(params: &ModelParams, sample: &InputSample) -> Result<ForwardTrace> {
    run_forward(params, sample, ForwardMode::NoGs)
}

/// Ablation ¬G_t: the temporal gate is pinned to 1.
pub fn forward_no_gt(params: &ModelParams, sample: &InputSample) -> Result<ForwardTrace> {
    run_forward(params, sample, ForwardMode::NoGt)
}

/// Mode-dispatched forward pass.
pub fn forward_with(
    params: &ModelParams,
    sample: &InputSample,
    mode: ForwardMode,
) -> Result<ForwardTrace> {
    run_forward(params, sample, mode)
}

/// Softmax attention over experts from gate and expert fields, both
/// (K,2,h,w): logits z_i = gs_out_i ⊙ expert_raw_i, normalized across the
/// K axis at every (channel, row, col) with max-subtraction.
pub fn spatial_attention(gs_out: &Tensor, expert_raw: &Tensor) -> Result<Tensor> {
    if gs_out.shape() != expert_raw.shape() {
        return Err(Error::config(format!(
            "gate {:?} and expert {:?} shapes differ",
            gs_out.shape(),
            expert_raw.shape()
        )));
    }
    let logits = gs_out.zip_map(expert_raw, |a, b| a * b);
    let k = logits.shape()[0];
    let m = logits.numel() / k;
    for i in 0..k {
        if !logits.data()[i * m..(i + 1) * m].iter().all(|v| v.is_finite()) {
            return Err(Error::numeric(format!(
                "expert {i} produced non-finite attention logits"
            )));
        }
    }
    Ok(softmax_axis0(&logits))
}

/// Affine-embed an external vector and reshape to (n_w, h, w). Returns an
/// empty (0,h,w) tensor when the model has no external block.
pub fn external_embed(params: &ModelParams, v: &[f64]) -> Result<Tensor> {
    let cfg = &params.cfg;
    if cfg.ext_block() == 0 {
        return Ok(Tensor::zeros([0, cfg.h, cfg.w]));
    }
    if v.len() != cfg.n_ext_raw {
        return Err(Error::config(format!(
            "external vector has length {}, schema says {}",
            v.len(),
            cfg.n_ext_raw
        )));
    }
    let mut g = Graph::new();
    let vars = leaf_params(&mut g, params);
    let vleaf = g.leaf(Tensor::new([cfg.n_ext_raw], v.to_vec()));
    let ew = vars.of(params, "ext.w");
    let eb = vars.of(params, "ext.b");
    let aff = g.affine(vleaf, ew, eb);
    let act = g.relu(aff);
    let out = g.reshape(act, [cfg.ext_block(), cfg.h, cfg.w]);
    Ok(g.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::InputSample;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cfg_small(k: usize, backbone: BackboneKind) -> ModelConfig {
        ModelConfig {
            k,
            backbone,
            filters: 4,
            depth: 2,
            kernel: 3,
            norm: NormKind::Channel,
            ext_channels: 2,
            use_gs: true,
            use_gt: true,
            h: 3,
            w: 4,
            flow_channels: 6,
            n_ext_raw: 5,
        }
    }

    fn sample_for(cfg: &ModelConfig, seed: u64) -> InputSample {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        InputSample {
            x: Tensor::from_fn([cfg.flow_channels, cfg.h, cfg.w], |_| r.gen_range(-1.0..1.0)),
            y: Tensor::from_fn([2, cfg.h, cfg.w], |_| r.gen_range(-1.0..1.0)),
            t: 0,
            external: (0..cfg.n_ext_raw).map(|_| r.gen_range(0.0..1.0)).collect(),
        }
    }

    #[test]
    fn trace_shapes_match_contract_for_both_backbones() {
        for backbone in [BackboneKind::ConvStack, BackboneKind::RecurrentConv] {
            let cfg = cfg_small(3, backbone);
            let params = ModelParams::init(cfg.clone(), 1).unwrap();
            let trace = model_forward(&params, &sample_for(&cfg, 2)).unwrap();
            assert_eq!(trace.prediction.shape(), &[2, 3, 4]);
            assert_eq!(trace.expert_raw.shape(), &[3, 2, 3, 4]);
            assert_eq!(trace.attention.shape(), &[3, 2, 3, 4]);
            assert_eq!(trace.gated.shape(), &[3, 2, 3, 4]);
            assert_eq!(trace.temporal_gate.shape(), &[2, 3, 4]);
            assert_eq!(trace.per_expert_h.shape(), &[3, 2, 3, 4]);
        }
    }

    #[test]
    fn attention_sums_to_one_and_outputs_stay_in_range() {
        for seed in 0..50 {
            let cfg = cfg_small(4, BackboneKind::ConvStack);
            let params = ModelParams::init(cfg.clone(), seed).unwrap();
            let trace = model_forward(&params, &sample_for(&cfg, seed + 1000)).unwrap();
            let m = trace.attention.numel() / 4;
            for p in 0..m {
                let s: f64 = (0..4).map(|i| trace.attention.data()[i * m + p]).sum();
                assert!((s - 1.0).abs() < 1e-6, "attention sum {s} at {p}");
            }
            assert!(trace.prediction.data().iter().all(|v| v.abs() < 1.0));
            assert!(trace.temporal_gate.data().iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }

    #[test]
    fn zeroed_parameters_give_zero_prediction_and_uniform_attention() {
        let cfg = cfg_small(3, BackboneKind::ConvStack);
        let mut params = ModelParams::init(cfg.clone(), 5).unwrap();
        for t in params.tensors_mut() {
            for v in t.data_mut() {
                *v = 0.0;
            }
        }
        let trace = model_forward(&params, &sample_for(&cfg, 6)).unwrap();
        assert!(trace.prediction.data().iter().all(|&v| v == 0.0));
        assert!(trace.attention.data().iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-12));
    }

    #[test]
    fn single_expert_gets_full_attention_in_every_mode() {
        let cfg = cfg_small(1, BackboneKind::ConvStack);
        let params = ModelParams::init(cfg.clone(), 3).unwrap();
        let s = sample_for(&cfg, 4);
        for trace in [
            model_forward(&params, &s).unwrap(),
            forward_no_gs(&params, &s).unwrap(),
        ] {
            assert!(trace.attention.data().iter().all(|&v| (v - 1.0).abs() < 1e-12));
        }
        // With K=1 the softmax collapses either way, so ¬G_s changes nothing.
        let a = model_forward(&params, &s).unwrap();
        let b = forward_no_gs(&params, &s).unwrap();
        assert!(a.prediction.max_abs_diff(&b.prediction) < 1e-12);
    }

    #[test]
    fn identical_experts_share_attention_uniformly_under_self_attention() {
        let cfg = cfg_small(3, BackboneKind::ConvStack);
        let mut params = ModelParams::init(cfg.clone(), 7).unwrap();
        // Copy expert 0's tensors into experts 1 and 2; under ¬G_s the
        // logits are the expert outputs, which are then identical.
        let names: Vec<String> = params.names().to_vec();
        for name in names {
            if let Some(rest) = name.strip_prefix("expert0.") {
                let src = params.get(&name).unwrap().clone();
                for i in 1..3 {
                    let dst = params.index_of(&format!("expert{i}.{rest}")).unwrap();
                    params.tensors_mut()[dst] = src.clone();
                }
            }
        }
        let trace = forward_no_gs(&params, &sample_for(&cfg, 8)).unwrap();
        assert!(trace.attention.data().iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-9));
        // Same symmetry through the plain attention op.
        let logits = Tensor::full([3, 2, 2, 2], 0.37);
        let ones = Tensor::full([3, 2, 2, 2], 1.0);
        let a = spatial_attention(&logits, &ones).unwrap();
        assert!(a.data().iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-12));
    }

    #[test]
    fn attention_splits_three_to_one_for_ln3_logit_gap() {
        let gs = Tensor::new([2, 1, 1, 1], vec![3.0_f64.ln(), 0.0]);
        let experts = Tensor::new([2, 1, 1, 1], vec![1.0, 1.0]);
        let a = spatial_attention(&gs, &experts).unwrap();
        assert!((a.data()[0] - 0.75).abs() < 1e-12);
        assert!((a.data()[1] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn non_finite_logits_name_the_offending_expert() {
        let gs = Tensor::new([2, 1, 1, 1], vec![1.0, f64::INFINITY]);
        let experts = Tensor::new([2, 1, 1, 1], vec![1.0, 2.0]);
        let err = spatial_attention(&gs, &experts).unwrap_err();
        assert!(err.to_string().contains("expert 1"));
    }

    /// Hand-evaluated K=2 scalar model on a 1×1 grid: depth 1, kernel 1, so
    /// every network is a plain affine map and the composition can be
    /// followed digit by digit.
    fn scalar_setup() -> (ModelParams, InputSample) {
        let cfg = ModelConfig {
            k: 2,
            backbone: BackboneKind::ConvStack,
            filters: 1,
            depth: 1,
            kernel: 1,
            norm: NormKind::None,
            ext_channels: 0,
            use_gs: true,
            use_gt: true,
            h: 1,
            w: 1,
            flow_channels: 2,
            n_ext_raw: 0,
        };
        let mut params = ModelParams::init(cfg.clone(), 0).unwrap();
        let assign = |p: &mut ModelParams, name: &str, vals: &[f64]| {
            let i = p.index_of(name).unwrap();
            assert_eq!(p.tensors()[i].numel(), vals.len(), "{name}");
            p.tensors_mut()[i].data_mut().copy_from_slice(vals);
        };
        assign(&mut params, "expert0.conv0.w", &[0.5, -0.3, 0.2, 0.7]);
        assign(&mut params, "expert0.conv0.b", &[0.1, -0.2]);
        assign(&mut params, "expert1.conv0.w", &[-0.4, 0.6, 0.3, -0.1]);
        assign(&mut params, "expert1.conv0.b", &[0.0, 0.25]);
        assign(&mut params, "gs.conv0.w", &[0.9, -0.2, 0.1, 0.4, -0.5, 0.3, 0.2, 0.2]);
        assign(&mut params, "gs.conv0.b", &[0.05, -0.1, 0.2, 0.0]);
        assign(&mut params, "gt.conv0.w", &[0.3, 0.3, -0.6, 0.2]);
        assign(&mut params, "gt.conv0.b", &[0.15, -0.05]);
        let sample = InputSample {
            x: Tensor::new([2, 1, 1], vec![0.4, -0.7]),
            y: Tensor::new([2, 1, 1], vec![0.1, 0.2]),
            t: 0,
            external: Vec::new(),
        };
        (params, sample)
    }

    /// Independent scalar re-derivation of all three forward modes.
    fn scalar_oracle(mode: ForwardMode) -> [f64; 2] {
        let (x0, x1) = (0.4, -0.7);
        let sig = |z: f64| 1.0 / (1.0 + (-z).exp());
        let e0 = [0.5 * x0 - 0.3 * x1 + 0.1, 0.2 * x0 + 0.7 * x1 - 0.2];
        let e1 = [-0.4 * x0 + 0.6 * x1 + 0.0, 0.3 * x0 - 0.1 * x1 + 0.25];
        let gs = [
            0.9 * x0 - 0.2 * x1 + 0.05,
            0.1 * x0 + 0.4 * x1 - 0.1,
            -0.5 * x0 + 0.3 * x1 + 0.2,
            0.2 * x0 + 0.2 * x1 + 0.0,
        ];
        let gt = [0.3 * x0 + 0.3 * x1 + 0.15, -0.6 * x0 + 0.2 * x1 - 0.05];
        let mut out = [0.0; 2];
        for c in 0..2 {
            let (z0, z1): (f64, f64) = if mode == ForwardMode::NoGs {
                (e0[c], e1[c])
            } else {
                (gs[c] * e0[c], gs[2 + c] * e1[c])
            };
            let a0 = z0.exp() / (z0.exp() + z1.exp());
            let a1 = 1.0 - a0;
            let mixed = a0 * e0[c] + a1 * e1[c];
            let gate = if mode == ForwardMode::NoGt { 1.0 } else { sig(gt[c]) };
            out[c] = mixed.tanh() * gate;
        }
        out
    }

    #[test]
    fn scalar_model_matches_hand_evaluation_in_all_modes() {
        let (params, sample) = scalar_setup();
        for (mode, trace) in [
            (ForwardMode::Full, model_forward(&params, &sample).unwrap()),
            (ForwardMode::NoGs, forward_no_gs(&params, &sample).unwrap()),
            (ForwardMode::NoGt, forward_no_gt(&params, &sample).unwrap()),
        ] {
            let want = scalar_oracle(mode);
            for c in 0..2 {
                assert!(
                    (trace.prediction.data()[c] - want[c]).abs() < 1e-9,
                    "{mode:?} channel {c}: {} vs {}",
                    trace.prediction.data()[c],
                    want[c]
                );
            }
        }
        // ¬G_t reports an all-ones gate and H_i = Tanh(E_i).
        let t = forward_no_gt(&params, &sample).unwrap();
        assert!(t.temporal_gate.data().iter().all(|&v| v == 1.0));
        assert!(t.prediction.data().iter().all(|v| v.abs() < 1.0));
    }

    #[test]
    fn raising_the_temporal_gate_raises_prediction_magnitude() {
        let cfg = cfg_small(2, BackboneKind::ConvStack);
        let params = ModelParams::init(cfg.clone(), 11).unwrap();
        let s = sample_for(&cfg, 12);
        let base = model_forward(&params, &s).unwrap();
        let mut bumped = params.clone();
        let bias = bumped.index_of(&format!("gt.conv{}.b", cfg.depth - 1)).unwrap();
        for v in bumped.tensors_mut()[bias].data_mut() {
            *v += 0.5;
        }
        let high = model_forward(&bumped, &s).unwrap();
        for (a, b) in base.prediction.data().iter().zip(high.prediction.data()) {
            if a.abs() > 1e-9 {
                assert!(b.abs() > a.abs());
            }
        }
    }

    #[test]
    fn permuting_experts_permutes_the_trace_and_keeps_the_prediction() {
        let cfg = cfg_small(3, BackboneKind::ConvStack);
        let params = ModelParams::init(cfg.clone(), 13).unwrap();
        let s = sample_for(&cfg, 14);
        let base = model_forward(&params, &s).unwrap();

        // Swap experts 0 and 2 wholesale (G_s slices stay put, so swap the
        // matching gate output channels too).
        let mut swapped = params.clone();
        let names: Vec<String> = params.names().to_vec();
        for name in &names {
            if let Some(rest) = name.strip_prefix("expert0.") {
                let a = params.index_of(name).unwrap();
                let b = params.index_of(&format!("expert2.{rest}")).unwrap();
                swapped.tensors_mut()[a] = params.tensors()[b].clone();
                swapped.tensors_mut()[b] = params.tensors()[a].clone();
            }
        }
        let wi = params.index_of(&format!("gs.conv{}.w", cfg.depth - 1)).unwrap();
        let bi = params.index_of(&format!("gs.conv{}.b", cfg.depth - 1)).unwrap();
        let (f, k) = (cfg.filters, cfg.kernel);
        let wlen = f * k * k;
        let wdata = swapped.tensors_mut()[wi].data_mut();
        for c in 0..2 {
            for e in 0..wlen {
                wdata.swap((c) * wlen + e, (4 + c) * wlen + e);
            }
        }
        swapped.tensors_mut()[bi].data_mut().swap(0, 4);
        swapped.tensors_mut()[bi].data_mut().swap(1, 5);

        let perm = model_forward(&swapped, &s).unwrap();
        assert!(base.prediction.max_abs_diff(&perm.prediction) < 1e-6);
        let m = base.attention.numel() / 3;
        for (orig, now) in [(0usize, 2usize), (1, 1), (2, 0)] {
            let a = &base.attention.data()[orig * m..(orig + 1) * m];
            let b = &perm.attention.data()[now * m..(now + 1) * m];
            for (x, y) in a.iter().zip(b) {
                assert!((x - y).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn initialization_and_forward_are_seed_deterministic() {
        let cfg = cfg_small(2, BackboneKind::RecurrentConv);
        let a = ModelParams::init(cfg.clone(), 42).unwrap();
        let b = ModelParams::init(cfg.clone(), 42).unwrap();
        for (x, y) in a.tensors().iter().zip(b.tensors()) {
            assert_eq!(x.data(), y.data());
        }
        let c = ModelParams::init(cfg.clone(), 43).unwrap();
        assert!(a.tensors().iter().zip(c.tensors()).any(|(x, y)| x.data() != y.data()));
        let s = sample_for(&cfg, 1);
        let t1 = model_forward(&a, &s).unwrap();
        let t2 = model_forward(&a, &s).unwrap();
        assert_eq!(t1.prediction.data(), t2.prediction.data());
        let e1 = external_embed(&a, &s.external).unwrap();
        let e2 = external_embed(&a, &s.external).unwrap();
        assert_eq!(e1.data(), e2.data());
    }

    #[test]
    fn external_embedding_edge_cases() {
        let cfg = cfg_small(2, BackboneKind::ConvStack);
        let mut params = ModelParams::init(cfg.clone(), 9).unwrap();
        // Zero vector with zero bias embeds to zero.
        let bi = params.index_of("ext.b").unwrap();
        for v in params.tensors_mut()[bi].data_mut() {
            *v = 0.0;
        }
        let e = external_embed(&params, &vec![0.0; cfg.n_ext_raw]).unwrap();
        assert!(e.data().iter().all(|&v| v == 0.0));
        // Wrong vector length is a configuration error.
        assert!(external_embed(&params, &[1.0]).is_err());
        // n_w = 0 removes the block and its parameters.
        let mut no_ext = cfg.clone();
        no_ext.ext_channels = 0;
        let p2 = ModelParams::init(no_ext.clone(), 9).unwrap();
        assert!(p2.get("ext.w").is_none());
        let e2 = external_embed(&p2, &vec![0.3; no_ext.n_ext_raw]).unwrap();
        assert_eq!(e2.shape(), &[0, 3, 4]);
    }

    #[test]
    fn disabling_gates_removes_their_parameters() {
        let mut cfg = cfg_small(2, BackboneKind::ConvStack);
        let full = ModelParams::init(cfg.clone(), 1).unwrap().num_scalars();
        cfg.use_gs = false;
        cfg.use_gt = false;
        let p = ModelParams::init(cfg.clone(), 1).unwrap();
        assert!(p.get("gs.conv0.w").is_none());
        assert!(p.get("gt.conv0.w").is_none());
        assert!(p.num_scalars() < full);
        // Forward still works and equals the ¬G_t-style output shape.
        let trace = model_forward(&p, &sample_for(&cfg, 2)).unwrap();
        assert!(trace.temporal_gate.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn recurrent_backbone_gradients_flow_to_every_gru_parameter() {
        let cfg = ModelConfig {
            k: 1,
            backbone: BackboneKind::RecurrentConv,
            filters: 2,
            depth: 2,
            kernel: 1,
            norm: NormKind::None,
            ext_channels: 1,
            use_gs: false,
            use_gt: false,
            h: 2,
            w: 2,
            flow_channels: 4,
            n_ext_raw: 3,
        };
        let params = ModelParams::init(cfg.clone(), 21).unwrap();
        let s = sample_for(&cfg, 22);
        let mut g = Graph::new();
        let vars = leaf_params(&mut g, &params);
        let x = g.leaf(s.x.clone());
        let tv = forward_on_graph(&mut g, &params, &vars, x, &s.external, ForwardMode::Full).unwrap();
        let sq = g.square(tv.prediction);
        let loss = g.mean_all(sq);
        let grads = g.backward(loss);
        for (name, &v) in params.names().iter().zip(&vars.vars) {
            let gr = grads.get(v).unwrap_or_else(|| panic!("no gradient for {name}"));
            assert!(gr.data().iter().any(|&x| x != 0.0), "all-zero gradient for {name}");
        }
    }

    #[test]
    fn from_parts_rejects_mismatched_layouts() {
        let cfg = cfg_small(2, BackboneKind::ConvStack);
        let p = ModelParams::init(cfg.clone(), 1).unwrap();
        let mut names = p.names().to_vec();
        let mut tensors = p.tensors().to_vec();
        names.swap(0, 1);
        tensors.swap(0, 1);
        assert!(ModelParams::from_parts(cfg.clone(), names, tensors).is_err());
        let mut tensors2 = p.tensors().to_vec();
        tensors2[0] = Tensor::zeros([1]);
        assert!(ModelParams::from_parts(cfg, p.names().to_vec(), tensors2).is_err());
    }
}

//! The training objective: reconstruction error, per-expert responsibility
//! (a general weighted form and a negative-log-mixture form), and the
//! inter-expert discrepancy penalty −det(VᵀV), plus hand-derived gradient
//! formulas used purely as test oracles.
//!
//! Reduction convention: mean over cells and channels everywhere, sum over
//! experts where a formula sums over i, so the λ weights stay scale-free
//! across grid sizes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{det_lu, Graph, Var};
use crate::model::{ForwardTrace, TraceVars};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErVariant {
    /// Σ_i mean[a_i (y−H_i)²].
    General,
    /// mean[−log Σ_i a_i exp(−(y−H_i)²/2)], the default.
    LogMixture,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub lambda_er: f64,
    pub lambda_eid: f64,
    /// Experts entering V, ranked by mean attention; defaults to K.
    pub n_top: usize,
    pub er_variant: ErVariant,
}

impl LossConfig {
    pub fn validate(&self, k: usize) -> Result<()> {
        if !(0.0..1.0).contains(&self.lambda_er) || !(0.0..1.0).contains(&self.lambda_eid) {
            return Err(Error::config("loss weights must lie in [0, 1)"));
        }
        if self.lambda_er + self.lambda_eid >= 1.0 {
            return Err(Error::config(format!(
                "lambda_er + lambda_eid must stay below 1 so the reconstruction weight {} stays positive",
                1.0 - self.lambda_er - self.lambda_eid
            )));
        }
        if self.n_top < 1 || self.n_top > k {
            return Err(Error::config(format!(
                "n_top must lie in 1..={k}, got {}",
                self.n_top
            )));
        }
        Ok(())
    }
}

// ── Graph-side losses (used during training) ────────────────────────────

/// Mean squared error over all elements.
pub fn mse_on_graph(g: &mut Graph, pred: Var, y: Var) -> Var {
    let d = g.sub(pred, y);
    let sq = g.square(d);
    g.mean_all(sq)
}

/// Σ_i mean[a_i ⊙ (y − H_i)²] with `attention` shaped (K,2,h,w).
pub fn responsibility_general_on_graph(
    g: &mut Graph,
    attention: Var,
    per_expert_h: &[Var],
    y: Var,
) -> Var {
    let terms: Vec<Var> = per_expert_h
        .iter()
        .enumerate()
        .map(|(i, &h)| {
            let a = g.index0(attention, i);
            let r = g.sub(y, h);
            let r2 = g.square(r);
            let weighted = g.mul(a, r2);
            g.mean_all(weighted)
        })
        .collect();
    g.sum_vars(&terms)
}

/// mean[−log Σ_i a_i exp(−(y−H_i)²/2)] evaluated per cell via
/// log-sum-exp of `log a_i − r_i²/2`; pass log-attention (e.g. the
/// log-softmax of the logits) for full numerical stability.
pub fn responsibility_logmix_on_graph(
    g: &mut Graph,
    log_attention: Var,
    per_expert_h: &[Var],
    y: Var,
) -> Var {
    let exponents: Vec<Var> = per_expert_h
        .iter()
        .enumerate()
        .map(|(i, &h)| {
            let la = g.index0(log_attention, i);
            let r = g.sub(y, h);
            let r2 = g.square(r);
            let half = g.scale(r2, -0.5);
            g.add(la, half)
        })
        .collect();
    let stack = g.stack0(&exponents);
    let lse = g.logsumexp0(stack);
    let neg = g.neg(lse);
    g.mean_all(neg)
}

/// V's rows on the graph plus the bookkeeping of how they were picked.
pub struct VBuild {
    /// (n_top, d) matrix whose row r is the r-th ranked expert's column
    /// ḡ_i·ũ_i (rows here = columns of the paper's V; the Gram matrix is
    /// identical either way).
    pub rows: Var,
    /// Expert indices in rank order (descending mean attention).
    pub order: Vec<usize>,
    /// Rank positions whose gated output was exactly zero, so the
    /// normalization was skipped and the column is the zero vector.
    pub zero_columns: Vec<bool>,
}

/// Rank experts by mean attention ḡ_i and assemble ḡ_i·ũ_i rows for the
/// top `n_top`, with ũ_i the unit-length flattened e_i.
pub fn build_v_on_graph(
    g: &mut Graph,
    attention: Var,
    gated: &[Var],
    n_top: usize,
) -> Result<VBuild> {
    let k = gated.len();
    if n_top < 1 || n_top > k {
        return Err(Error::config(format!("n_top must lie in 1..={k}, got {n_top}")));
    }
    let means: Vec<Var> = (0..k)
        .map(|i| {
            let a = g.index0(attention, i);
            g.mean_all(a)
        })
        .collect();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| {
        g.item(means[b]).partial_cmp(&g.item(means[a])).expect("finite attention means")
    });
    order.truncate(n_top);

    let d = g.value(gated[0]).numel();
    let mut rows = Vec::with_capacity(n_top);
    let mut zero_columns = Vec::with_capacity(n_top);
    for &i in &order {
        let flat = g.reshape(gated[i], [d]);
        let sq = g.square(flat);
        let ss = g.sum_all(sq);
        let is_zero = g.item(ss) == 0.0;
        zero_columns.push(is_zero);
        let col = if is_zero {
            flat
        } else {
            let norm = g.sqrt(ss);
            let inv = g.recip(norm);
            let unit = g.mul_scalar(flat, inv);
            g.mul_scalar(unit, means[i])
        };
        rows.push(col);
    }
    Ok(VBuild { rows: g.stack0(&rows), order, zero_columns })
}

/// −det(VᵀV) from V's rows.
pub fn eid_on_graph(g: &mut Graph, rows: Var) -> Var {
    let gram = g.gram(rows);
    let det = g.det(gram);
    g.neg(det)
}

pub struct LossVars {
    pub total: Var,
    pub mse: Var,
    pub l_er: Var,
    pub l_eid: Var,
}

/// (1−λ_er−λ_eid)·MSE + λ_er·L_er + λ_eid·L_eid on the graph; all three
/// components are built (and logged) even when their weight is zero.
pub fn total_loss_on_graph(
    g: &mut Graph,
    trace: &TraceVars,
    y: Var,
    cfg: &LossConfig,
) -> Result<LossVars> {
    cfg.validate(trace.expert_raw.len())?;
    let mse = mse_on_graph(g, trace.prediction, y);
    let l_er = match cfg.er_variant {
        ErVariant::General => {
            responsibility_general_on_graph(g, trace.attention, &trace.per_expert_h, y)
        }
        ErVariant::LogMixture => {
            let log_a = g.log_softmax0(trace.logit_stack);
            responsibility_logmix_on_graph(g, log_a, &trace.per_expert_h, y)
        }
    };
    let v = build_v_on_graph(g, trace.attention, &trace.gated, cfg.n_top)?;
    let l_eid = eid_on_graph(g, v.rows);
    let w_mse = g.scale(mse, 1.0 - cfg.lambda_er - cfg.lambda_eid);
    let w_er = g.scale(l_er, cfg.lambda_er);
    let w_eid = g.scale(l_eid, cfg.lambda_eid);
    let partial = g.add(w_mse, w_er);
    let total = g.add(partial, w_eid);
    Ok(LossVars { total, mse, l_er, l_eid })
}

// ── Plain-value losses (independent implementations) ────────────────────

/// Mean squared error over all elements.
pub fn mse_loss(pred: &Tensor, y: &Tensor) -> f64 {
    assert_eq!(pred.shape(), y.shape());
    let n = pred.numel() as f64;
    pred.data()
        .iter()
        .zip(y.data())
        .map(|(&p, &t)| (p - t) * (p - t))
        .sum::<f64>()
        / n
}

/// Σ_i mean[a_i (y − H_i)²].
pub fn responsibility_loss_general(trace: &ForwardTrace, y: &Tensor) -> f64 {
    let k = trace.k();
    let m = y.numel();
    let n = m as f64;
    let mut total = 0.0;
    for i in 0..k {
        let mut acc = 0.0;
        for p in 0..m {
            let a = trace.attention.data()[i * m + p];
            let r = y.data()[p] - trace.per_expert_h.data()[i * m + p];
            acc += a * r * r;
        }
        total += acc / n;
    }
    total
}

/// mean[−log Σ_i a_i exp(−(y−H_i)²/2)] (log-mixture, the default variant).
pub fn responsibility_loss(trace: &ForwardTrace, y: &Tensor) -> f64 {
    let k = trace.k();
    let m = y.numel();
    let mut acc = 0.0;
    for p in 0..m {
        let mut mx = f64::NEG_INFINITY;
        let mut exps = Vec::with_capacity(k);
        for i in 0..k {
            let a = trace.attention.data()[i * m + p];
            let r = y.data()[p] - trace.per_expert_h.data()[i * m + p];
            let e = a.ln() - 0.5 * r * r;
            mx = mx.max(e);
            exps.push(e);
        }
        let s: f64 = exps.iter().map(|&e| (e - mx).exp()).sum();
        acc += -(mx + s.ln());
    }
    acc / m as f64
}

/// Hand-derived ∂L_er/∂E_i as a (K,2,h,w) tensor; a test oracle treating
/// attention and the temporal gate as constants.
///
/// General: −2·a_i·H_i′·(y−H_i)/N with H_i′ = σ(G_t)·(1−Tanh²(E_i)).
/// Log-mixture: −posterior_i·H_i′·(y−H_i)/N with
/// posterior_i = a_i·exp(−r_i²/2) / Σ_j a_j·exp(−r_j²/2).
pub fn responsibility_grad_reference(
    trace: &ForwardTrace,
    y: &Tensor,
    variant: ErVariant,
) -> Tensor {
    let k = trace.k();
    let m = y.numel();
    let n = m as f64;
    let mut out = vec![0.0; k * m];
    for p in 0..m {
        // Stable posteriors for the mixture variant.
        let mut exps = vec![0.0; k];
        let mut mx = f64::NEG_INFINITY;
        for i in 0..k {
            let a = trace.attention.data()[i * m + p];
            let r = y.data()[p] - trace.per_expert_h.data()[i * m + p];
            exps[i] = a.ln() - 0.5 * r * r;
            mx = mx.max(exps[i]);
        }
        let denom: f64 = exps.iter().map(|&e| (e - mx).exp()).sum();
        for i in 0..k {
            let a = trace.attention.data()[i * m + p];
            let e_raw = trace.expert_raw.data()[i * m + p];
            let gate = trace.temporal_gate.data()[p];
            let h = trace.per_expert_h.data()[i * m + p];
            let r = y.data()[p] - h;
            let hprime = gate * (1.0 - e_raw.tanh() * e_raw.tanh());
            out[i * m + p] = match variant {
                ErVariant::General => -2.0 * a * hprime * r / n,
                ErVariant::LogMixture => {
                    let posterior = (exps[i] - mx).exp() / denom;
                    -posterior * hprime * r / n
                }
            };
        }
    }
    let mut shape = vec![k];
    shape.extend_from_slice(y.shape());
    Tensor::new(shape, out)
}

/// V assembled from a plain trace; rows are the ranked columns ḡ_i·ũ_i.
#[derive(Clone, Debug)]
pub struct VMatrix {
    pub rows: Tensor,
    pub order: Vec<usize>,
    pub zero_columns: Vec<bool>,
}

pub fn build_v(trace: &ForwardTrace, n_top: usize) -> Result<VMatrix> {
    let k = trace.k();
    if n_top < 1 || n_top > k {
        return Err(Error::config(format!("n_top must lie in 1..={k}, got {n_top}")));
    }
    let d = trace.gated.numel() / k;
    let means: Vec<f64> = (0..k)
        .map(|i| trace.attention.data()[i * d..(i + 1) * d].iter().sum::<f64>() / d as f64)
        .collect();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| means[b].partial_cmp(&means[a]).expect("finite attention means"));
    order.truncate(n_top);
    let mut rows = Vec::with_capacity(n_top * d);
    let mut zero_columns = Vec::with_capacity(n_top);
    for &i in &order {
        let e = &trace.gated.data()[i * d..(i + 1) * d];
        let norm = e.iter().map(|&v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            zero_columns.push(true);
            rows.extend_from_slice(e);
        } else {
            zero_columns.push(false);
            rows.extend(e.iter().map(|&v| means[i] * v / norm));
        }
    }
    Ok(VMatrix { rows: Tensor::new([n_top, d], rows), order, zero_columns })
}

/// −det(VᵀV) for V given as its rows (n, d).
pub fn inter_discrepancy_loss(rows: &Tensor) -> f64 {
    assert_eq!(rows.shape().len(), 2);
    let (n, d) = (rows.shape()[0], rows.shape()[1]);
    let mut gram = vec![0.0; n * n];
    for i in 0..n {
        for j in i..n {
            let dot = rows.data()[i * d..(i + 1) * d]
                .iter()
                .zip(&rows.data()[j * d..(j + 1) * d])
                .map(|(&a, &b)| a * b)
                .sum::<f64>();
            gram[i * n + j] = dot;
            gram[j * n + i] = dot;
        }
    }
    -det_lu(&gram, n)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub mse: f64,
    pub l_er: f64,
    pub l_eid: f64,
}

/// Weighted total plus its components (all three computed regardless of
/// their weight, for logging).
pub fn total_loss(trace: &ForwardTrace, y: &Tensor, cfg: &LossConfig) -> Result<LossBreakdown> {
    cfg.validate(trace.k())?;
    let mse = mse_loss(&trace.prediction, y);
    let l_er = match cfg.er_variant {
        ErVariant::General => responsibility_loss_general(trace, y),
        ErVariant::LogMixture => responsibility_loss(trace, y),
    };
    let v = build_v(trace, cfg.n_top)?;
    let l_eid = inter_discrepancy_loss(&v.rows);
    Ok(LossBreakdown {
        total: (1.0 - cfg.lambda_er - cfg.lambda_eid) * mse
            + cfg.lambda_er * l_er
            + cfg.lambda_eid * l_eid,
        mse,
        l_er,
        l_eid,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// A consistent trace from raw ingredients: expert fields E (K,m),
    /// attention logits Z (K,m), gate logits G (m), all over an h×w grid
    /// flattened to m = 2·h·w entries.
    fn trace_from(e: &[Vec<f64>], z: &[Vec<f64>], gate_logits: &[f64], shape: &[usize]) -> ForwardTrace {
        let k = e.len();
        let m = e[0].len();
        let gate: Vec<f64> = gate_logits.iter().map(|&g| 1.0 / (1.0 + (-g).exp())).collect();
        let mut attention = vec![0.0; k * m];
        for p in 0..m {
            let mx = z.iter().map(|zi| zi[p]).fold(f64::NEG_INFINITY, f64::max);
            let s: f64 = z.iter().map(|zi| (zi[p] - mx).exp()).sum();
            for i in 0..k {
                attention[i * m + p] = (z[i][p] - mx).exp() / s;
            }
        }
        let mut expert_raw = vec![0.0; k * m];
        let mut gated = vec![0.0; k * m];
        let mut hfield = vec![0.0; k * m];
        let mut mixed = vec![0.0; m];
        for i in 0..k {
            for p in 0..m {
                expert_raw[i * m + p] = e[i][p];
                gated[i * m + p] = attention[i * m + p] * e[i][p];
                hfield[i * m + p] = gate[p] * e[i][p].tanh();
                mixed[p] += gated[i * m + p];
            }
        }
        let prediction: Vec<f64> = mixed.iter().zip(&gate).map(|(&s, &g)| s.tanh() * g).collect();
        let mut kshape = vec![k];
        kshape.extend_from_slice(shape);
        ForwardTrace {
            prediction: Tensor::new(shape.to_vec(), prediction),
            expert_raw: Tensor::new(kshape.clone(), expert_raw),
            attention: Tensor::new(kshape.clone(), attention),
            gated: Tensor::new(kshape.clone(), gated),
            temporal_gate: Tensor::new(shape.to_vec(), gate),
            per_expert_h: Tensor::new(kshape, hfield),
        }
    }

    fn random_trace(k: usize, h: usize, w: usize, seed: u64) -> (ForwardTrace, Tensor) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let m = 2 * h * w;
        let e: Vec<Vec<f64>> = (0..k).map(|_| (0..m).map(|_| r.gen_range(-1.5..1.5)).collect()).collect();
        let z: Vec<Vec<f64>> = (0..k).map(|_| (0..m).map(|_| r.gen_range(-2.0..2.0)).collect()).collect();
        let g: Vec<f64> = (0..m).map(|_| r.gen_range(-2.0..2.0)).collect();
        let y = Tensor::from_fn([2, h, w], |_| r.gen_range(-1.0..1.0));
        (trace_from(&e, &z, &g, &[2, h, w]), y)
    }

    #[test]
    fn general_loss_is_zero_for_perfect_experts() {
        // All experts share one field, so H_i == H_0 == y for every i.
        let m = 8;
        let e = vec![vec![0.3; m]; 3];
        let z = vec![vec![0.7; m], vec![0.1; m], vec![-0.4; m]];
        let g = vec![0.5; m];
        let trace = trace_from(&e, &z, &g, &[2, 2, 2]);
        let y = trace.per_expert_h_slice(0);
        assert!(responsibility_loss_general(&trace, &y).abs() < 1e-15);
    }

    #[test]
    fn general_loss_matches_hand_scalar() {
        // K=1, full attention, y=0.5, H=0.1 -> (0.4)^2 = 0.16.
        let mut trace = trace_from(&[vec![0.0]], &[vec![0.0]], &[0.0], &[1, 1, 1]);
        trace.per_expert_h = Tensor::new([1, 1, 1, 1], vec![0.1]);
        let y = Tensor::new([1, 1, 1], vec![0.5]);
        assert!((responsibility_loss_general(&trace, &y) - 0.16).abs() < 1e-12);
    }

    #[test]
    fn general_loss_is_quadratic_in_the_residual() {
        // Identical experts make every residual y − H_i scale together,
        // so doubling the offset quadruples the loss.
        let mut r = ChaCha8Rng::seed_from_u64(7);
        let m = 12;
        let e = vec![vec![0.25; m]; 2];
        let z: Vec<Vec<f64>> =
            (0..2).map(|_| (0..m).map(|_| r.gen_range(-1.0..1.0)).collect()).collect();
        let g: Vec<f64> = (0..m).map(|_| r.gen_range(-1.0..1.0)).collect();
        let trace = trace_from(&e, &z, &g, &[2, 2, 3]);
        let base = trace.per_expert_h_slice(0);
        let delta: Vec<f64> = (0..m).map(|_| r.gen_range(-0.5..0.5)).collect();
        let y1 = Tensor::new([2, 2, 3], base.data().iter().zip(&delta).map(|(h, d)| h + d).collect());
        let y2 = Tensor::new([2, 2, 3], base.data().iter().zip(&delta).map(|(h, d)| h + 2.0 * d).collect());
        let l1 = responsibility_loss_general(&trace, &y1);
        let l2 = responsibility_loss_general(&trace, &y2);
        assert!((l2 - 4.0 * l1).abs() < 1e-12 * l1.max(1.0));
    }

    #[test]
    fn logmix_loss_matches_hand_values() {
        // K=2, a=(0.5,0.5), residuals² = (0, 2) at one scalar cell.
        let mut trace = trace_from(&[vec![0.0], vec![0.0]], &[vec![0.0], vec![0.0]], &[0.0], &[1, 1, 1]);
        trace.per_expert_h = Tensor::new([2, 1, 1, 1], vec![0.5, 0.5 - 2.0_f64.sqrt()]);
        let y = Tensor::new([1, 1, 1], vec![0.5]);
        let got = responsibility_loss(&trace, &y);
        assert!((got - 0.379_885_493_041_722_4).abs() < 1e-9, "got {got}");
    }

    #[test]
    fn logmix_loss_is_zero_for_a_perfect_fully_attended_expert() {
        // Attention one-hot on expert 0 (huge logit gap), H_0 == y.
        let m = 4;
        let z0 = vec![60.0; m];
        let z1 = vec![0.0; m];
        let trace =
            trace_from(&[vec![0.2; m], vec![-0.9; m]], &[z0, z1], &vec![0.3; m], &[2, 1, 2]);
        let y = trace.per_expert_h_slice(0);
        assert!(responsibility_loss(&trace, &y).abs() < 1e-12);
    }

    #[test]
    fn logmix_loss_with_uniform_attention_and_equal_residuals_is_half_r2() {
        let m = 6;
        let e = vec![vec![0.4; m]; 3];
        let z = vec![vec![0.0; m]; 3];
        let trace = trace_from(&e, &z, &[0.0; 6], &[2, 1, 3]);
        let r = 0.35;
        let y: Vec<f64> = trace.per_expert_h.data()[..m].iter().map(|h| h + r).collect();
        let got = responsibility_loss(&trace, &Tensor::new([2, 1, 3], y));
        assert!((got - r * r / 2.0).abs() < 1e-12);
    }

    /// Loss as a function of the expert fields with attention and gate
    /// frozen — the setting the reference gradients are derived in.
    fn loss_with_frozen_gates(
        e_stack: &Tensor,
        attention: &Tensor,
        gate: &Tensor,
        y: &Tensor,
        variant: ErVariant,
    ) -> f64 {
        let k = e_stack.shape()[0];
        let m = y.numel();
        let mut h = vec![0.0; k * m];
        for i in 0..k {
            for p in 0..m {
                h[i * m + p] = gate.data()[p] * e_stack.data()[i * m + p].tanh();
            }
        }
        let trace = ForwardTrace {
            prediction: y.clone(),
            expert_raw: e_stack.clone(),
            attention: attention.clone(),
            gated: e_stack.clone(),
            temporal_gate: gate.clone(),
            per_expert_h: Tensor::new(e_stack.shape().to_vec(), h),
        };
        match variant {
            ErVariant::General => responsibility_loss_general(&trace, y),
            ErVariant::LogMixture => responsibility_loss(&trace, y),
        }
    }

    #[test]
    fn reference_gradients_match_finite_differences_and_autodiff() {
        for seed in 0..6 {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let k = 1 + (seed as usize % 3);
            let (h, w) = (1 + seed as usize % 3, 1 + (seed as usize / 2) % 3);
            let (trace, y) = random_trace(k, h, w, seed + 100);
            let m = y.numel();
            for variant in [ErVariant::General, ErVariant::LogMixture] {
                let reference = responsibility_grad_reference(&trace, &y, variant);

                // Finite differences over the expert fields.
                let step = 1e-5;
                for probe in 0..4 {
                    let idx = r.gen_range(0..k * m);
                    let mut plus = trace.expert_raw.clone();
                    plus.data_mut()[idx] += step;
                    let mut minus = trace.expert_raw.clone();
                    minus.data_mut()[idx] -= step;
                    let fp = loss_with_frozen_gates(&plus, &trace.attention, &trace.temporal_gate, &y, variant);
                    let fm = loss_with_frozen_gates(&minus, &trace.attention, &trace.temporal_gate, &y, variant);
                    let fd = (fp - fm) / (2.0 * step);
                    let an = reference.data()[idx];
                    let denom = 1.0_f64.max(fd.abs()).max(an.abs());
                    assert!(
                        ((fd - an) / denom).abs() < 1e-4,
                        "variant {variant:?} seed {seed} probe {probe}: fd={fd} ref={an}"
                    );
                }

                // Autodiff with attention and gate as constant leaves.
                let mut g = Graph::new();
                let e_leaves: Vec<Var> = (0..k)
                    .map(|i| g.leaf(ForwardTrace::slice_expert(&trace.expert_raw, i)))
                    .collect();
                let a_leaf = g.leaf(trace.attention.clone());
                let gate_leaf = g.leaf(trace.temporal_gate.clone());
                let y_leaf = g.leaf(y.clone());
                let hs: Vec<Var> = e_leaves
                    .iter()
                    .map(|&e| {
                        let t = g.tanh(e);
                        g.mul(gate_leaf, t)
                    })
                    .collect();
                let loss = match variant {
                    ErVariant::General => {
                        responsibility_general_on_graph(&mut g, a_leaf, &hs, y_leaf)
                    }
                    ErVariant::LogMixture => {
                        let ln_a = g.ln(a_leaf);
                        responsibility_logmix_on_graph(&mut g, ln_a, &hs, y_leaf)
                    }
                };
                let grads = g.backward(loss);
                for (i, &e) in e_leaves.iter().enumerate() {
                    let ad = grads.get(e).expect("gradient flows to expert");
                    for p in 0..m {
                        let an = reference.data()[i * m + p];
                        let av = ad.data()[p];
                        let denom = 1.0_f64.max(an.abs()).max(av.abs());
                        assert!(
                            ((an - av) / denom).abs() < 1e-10,
                            "AD vs reference at expert {i} cell {p}: {av} vs {an}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn saturated_experts_have_vanishing_reference_gradient() {
        let m = 2;
        let e = vec![vec![25.0; m]];
        let z = vec![vec![0.0; m]];
        let trace = trace_from(&e, &z, &[0.0; 2], &[2, 1, 1]);
        let y = Tensor::new([2, 1, 1], vec![0.0, 0.0]);
        let grad = responsibility_grad_reference(&trace, &y, ErVariant::General);
        assert!(grad.data().iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn v_for_a_single_expert_is_one_column_of_length_g() {
        let (trace, _) = random_trace(1, 2, 2, 3);
        let v = build_v(&trace, 1).unwrap();
        assert_eq!(v.rows.shape(), &[1, 8]);
        assert_eq!(v.order, vec![0]);
        // ḡ_1 = 1 for a single expert, so the column has unit length.
        let norm: f64 = v.rows.data().iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-12);
        assert!((inter_discrepancy_loss(&v.rows) + 1.0).abs() < 1e-12);
    }

    #[test]
    fn identical_experts_give_parallel_columns_and_zero_eid() {
        let m = 8;
        let e = vec![vec![0.7; m], vec![0.7; m]];
        let z = vec![vec![0.1; m], vec![0.1; m]];
        let trace = trace_from(&e, &z, &[0.4; 8], &[2, 2, 2]);
        let v = build_v(&trace, 2).unwrap();
        let a = &v.rows.data()[..m];
        let b = &v.rows.data()[m..];
        let cross: f64 = a.iter().zip(b).map(|(&x, &y)| x * y).sum();
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((cross - na * nb).abs() < 1e-12, "columns not parallel");
        assert_eq!(inter_discrepancy_loss(&v.rows), 0.0);
    }

    #[test]
    fn gram_matches_hand_inner_products_for_three_experts() {
        let (trace, _) = random_trace(3, 2, 3, 9);
        let v = build_v(&trace, 3).unwrap();
        let d = trace.gated.numel() / 3;
        let m = d;
        let means: Vec<f64> = (0..3)
            .map(|i| trace.attention.data()[i * m..(i + 1) * m].iter().sum::<f64>() / m as f64)
            .collect();
        let unit = |i: usize| -> Vec<f64> {
            let e = &trace.gated.data()[i * d..(i + 1) * d];
            let n = e.iter().map(|&v| v * v).sum::<f64>().sqrt();
            e.iter().map(|&v| v / n).collect()
        };
        for (ri, &i) in v.order.iter().enumerate() {
            for (rj, &j) in v.order.iter().enumerate() {
                let dot: f64 = unit(i).iter().zip(unit(j)).map(|(a, b)| a * b).sum();
                let want = means[i] * means[j] * dot;
                let got: f64 = v.rows.data()[ri * d..(ri + 1) * d]
                    .iter()
                    .zip(&v.rows.data()[rj * d..(rj + 1) * d])
                    .map(|(a, b)| a * b)
                    .sum();
                assert!((want - got).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_gated_output_yields_flagged_zero_column() {
        let (mut trace, _) = random_trace(2, 2, 2, 11);
        let m = trace.gated.numel() / 2;
        for v in &mut trace.gated.data_mut()[m..] {
            *v = 0.0;
        }
        let v = build_v(&trace, 2).unwrap();
        let zero_rank = v.order.iter().position(|&i| i == 1).unwrap();
        assert!(v.zero_columns[zero_rank]);
        assert!(v.rows.data()[zero_rank * m..(zero_rank + 1) * m].iter().all(|&x| x == 0.0));
        assert_eq!(inter_discrepancy_loss(&v.rows), 0.0);
        assert!(v.rows.data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn eid_known_geometries() {
        // Orthonormal columns with full weights: det = 1, loss = −1.
        let rows = Tensor::new([2, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        assert!((inter_discrepancy_loss(&rows) + 1.0).abs() < 1e-12);
        // Two columns with lengths g1, g2 at angle θ: loss = −(g1 g2 sinθ)².
        let (g1, g2, theta) = (0.8, 0.5, 0.7_f64);
        let rows = Tensor::new(
            [2, 2],
            vec![g1, 0.0, g2 * theta.cos(), g2 * theta.sin()],
        );
        let want = -(g1 * g2 * theta.sin()).powi(2);
        assert!((inter_discrepancy_loss(&rows) - want).abs() < 1e-9);
    }

    #[test]
    fn eid_is_invariant_under_column_permutation_and_quadratic_in_scale() {
        let mut r = ChaCha8Rng::seed_from_u64(5);
        let rows: Vec<f64> = (0..3 * 5).map(|_| r.gen_range(-1.0..1.0)).collect();
        let base = Tensor::new([3, 5], rows.clone());
        let l = inter_discrepancy_loss(&base);
        // Swap rows 0 and 2 (column permutation of V).
        let mut swapped = rows.clone();
        for c in 0..5 {
            swapped.swap(c, 2 * 5 + c);
        }
        let l_swap = inter_discrepancy_loss(&Tensor::new([3, 5], swapped));
        assert!((l - l_swap).abs() < 1e-12);
        // Scaling one column by c scales det by c².
        let c = 1.7;
        let mut scaled = rows;
        for x in &mut scaled[..5] {
            *x *= c;
        }
        let l_scaled = inter_discrepancy_loss(&Tensor::new([3, 5], scaled));
        assert!((l_scaled - c * c * l).abs() < 1e-9 * l.abs().max(1.0));
    }

    #[test]
    fn eid_zero_iff_columns_linearly_dependent() {
        // Dependent: third row = sum of the first two.
        let a = [0.3, 0.1, -0.2, 0.5];
        let b = [-0.4, 0.2, 0.6, 0.0];
        let c: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
        let mut data = Vec::new();
        data.extend_from_slice(&a);
        data.extend_from_slice(&b);
        data.extend_from_slice(&c);
        let dep = Tensor::new([3, 4], data);
        assert!(inter_discrepancy_loss(&dep).abs() < 1e-12);
        // Independent: distinct basis rows, determinant strictly negative.
        let ind = Tensor::new([3, 4], vec![
            1.0, 0.0, 0.0, 0.0,
            0.0, 1.0, 0.0, 0.0,
            0.0, 0.0, 1.0, 0.0,
        ]);
        assert!(inter_discrepancy_loss(&ind) < -0.5);
    }

    #[test]
    fn total_loss_reduces_to_mse_without_penalties() {
        let (trace, y) = random_trace(3, 2, 2, 13);
        let cfg = LossConfig {
            lambda_er: 0.0,
            lambda_eid: 0.0,
            n_top: 3,
            er_variant: ErVariant::LogMixture,
        };
        let b = total_loss(&trace, &y, &cfg).unwrap();
        assert!((b.total - b.mse).abs() < 1e-15);
        assert!((b.mse - mse_loss(&trace.prediction, &y)).abs() < 1e-15);
    }

    #[test]
    fn perfect_single_expert_total_is_minus_lambda_eid() {
        let (trace, _) = random_trace(1, 2, 2, 14);
        let y = trace.prediction.clone();
        let cfg = LossConfig {
            lambda_er: 0.0,
            lambda_eid: 0.3,
            n_top: 1,
            er_variant: ErVariant::General,
        };
        let b = total_loss(&trace, &y, &cfg).unwrap();
        assert!((b.total + 0.3).abs() < 1e-12);
    }

    #[test]
    fn weights_summing_to_one_are_rejected() {
        let (trace, y) = random_trace(2, 1, 1, 15);
        let cfg = LossConfig {
            lambda_er: 0.6,
            lambda_eid: 0.4,
            n_top: 2,
            er_variant: ErVariant::General,
        };
        assert!(total_loss(&trace, &y, &cfg).is_err());
    }

    #[test]
    fn graph_losses_agree_with_plain_implementations() {
        for seed in [21, 22, 23] {
            let (trace, y) = random_trace(3, 2, 3, seed);
            let mut g = Graph::new();
            let a = g.leaf(trace.attention.clone());
            let hs: Vec<Var> = (0..3)
                .map(|i| g.leaf(ForwardTrace::slice_expert(&trace.per_expert_h, i)))
                .collect();
            let gated: Vec<Var> = (0..3)
                .map(|i| g.leaf(ForwardTrace::slice_expert(&trace.gated, i)))
                .collect();
            let yv = g.leaf(y.clone());
            let lg = responsibility_general_on_graph(&mut g, a, &hs, yv);
            assert!((g.item(lg) - responsibility_loss_general(&trace, &y)).abs() < 1e-12);
            let ln_a = g.ln(a);
            let lm = responsibility_logmix_on_graph(&mut g, ln_a, &hs, yv);
            assert!((g.item(lm) - responsibility_loss(&trace, &y)).abs() < 1e-12);
            let v = build_v_on_graph(&mut g, a, &gated, 3).unwrap();
            let vd = build_v(&trace, 3).unwrap();
            assert_eq!(v.order, vd.order);
            assert!(g.value(v.rows).max_abs_diff(&vd.rows) < 1e-12);
            let eid = eid_on_graph(&mut g, v.rows);
            assert!((g.item(eid) - inter_discrepancy_loss(&vd.rows)).abs() < 1e-12);
        }
    }

    impl ForwardTrace {
        /// Test helper: H field of expert `i` reshaped to the target shape.
        fn per_expert_h_slice(&self, i: usize) -> Tensor {
            ForwardTrace::slice_expert(&self.per_expert_h, i)
        }
    }
}

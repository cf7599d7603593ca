//! Error metrics on denormalized flows, pairwise significance testing
//! between experts (the Quade test at k = 2), and expert-to-pattern
//! matching via Pearson correlation and an optimal assignment.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::flow::{minmax_invert, NormStats};
use crate::fusion::InputSample;
use crate::model::{forward_with, ForwardMode, ForwardTrace, ModelParams};
use crate::par::map_ordered;
use crate::tensor::Tensor;

// ── Metrics ─────────────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct MetricReport {
    pub mse: f64,
    pub rmse: f64,
    pub mae: f64,
    /// Mean absolute percentage error as a fraction (0.5 = 50%), or `None`
    /// when every denominator fell below the floor.
    pub mape: Option<f64>,
    /// Samples scored.
    pub n: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct MapeOptions {
    /// Entries whose denominator is smaller than this (in denormalized
    /// flow units) are excluded; guards against division blowups.
    pub floor: f64,
    /// The error formula divides by the prediction as printed in the
    /// source material; set to divide by the ground truth instead.
    pub truth_denominator: bool,
}

impl Default for MapeOptions {
    fn default() -> Self {
        MapeOptions { floor: 1.0, truth_denominator: false }
    }
}

/// MSE/RMSE/MAE/MAPE over per-sample prediction/truth pairs, both
/// denormalized with the training statistics first.
pub fn metrics(
    pred: &[Tensor],
    truth: &[Tensor],
    stats: &NormStats,
    opts: &MapeOptions,
) -> Result<MetricReport> {
    if pred.len() != truth.len() {
        return Err(Error::config(format!(
            "{} predictions against {} truths",
            pred.len(),
            truth.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::data("nothing to score"));
    }
    let mut se = 0.0;
    let mut ae = 0.0;
    let mut count = 0usize;
    let mut ape = 0.0;
    let mut ape_count = 0usize;
    for (p, t) in pred.iter().zip(truth) {
        if p.shape() != t.shape() {
            return Err(Error::config(format!(
                "prediction {:?} and truth {:?} shapes differ",
                p.shape(),
                t.shape()
            )));
        }
        let pd = minmax_invert(p, stats);
        let td = minmax_invert(t, stats);
        for (&pv, &tv) in pd.data().iter().zip(td.data()) {
            let d = pv - tv;
            se += d * d;
            ae += d.abs();
            count += 1;
            let denom = if opts.truth_denominator { tv } else { pv };
            if denom.abs() >= opts.floor {
                ape += (d / denom).abs();
                ape_count += 1;
            }
        }
    }
    let mse = se / count as f64;
    Ok(MetricReport {
        mse,
        rmse: mse.sqrt(),
        mae: ae / count as f64,
        mape: (ape_count > 0).then(|| ape / ape_count as f64),
        n: pred.len(),
    })
}

/// Run the model over `samples` and score the predictions.
pub fn evaluate_model(
    params: &ModelParams,
    samples: &[InputSample],
    norm: &NormStats,
    mode: ForwardMode,
    opts: &MapeOptions,
) -> Result<MetricReport> {
    let preds = map_ordered(samples, |s| forward_with(params, s, mode).map(|t| t.prediction));
    let mut pred = Vec::with_capacity(samples.len());
    for p in preds {
        pred.push(p?);
    }
    let truth: Vec<Tensor> = samples.iter().map(|s| s.y.clone()).collect();
    metrics(&pred, &truth, norm, opts)
}

// ── Quade test (k = 2) ──────────────────────────────────────────────────

/// Average ranks (1-based, ties averaged).
fn rank_average(vals: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..vals.len()).collect();
    order.sort_by(|&a, &b| vals[a].partial_cmp(&vals[b]).expect("finite"));
    let mut ranks = vec![0.0; vals.len()];
    let mut i = 0;
    while i < vals.len() {
        let mut j = i;
        while j + 1 < vals.len() && vals[order[j + 1]] == vals[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Upper tail of the F(d1, d2) distribution, computed directly through the
/// regularized incomplete beta so tiny p-values keep their precision.
fn f_survival(f: f64, d1: f64, d2: f64) -> f64 {
    statrs::function::beta::beta_reg(d2 / 2.0, d1 / 2.0, d2 / (d2 + d1 * f))
}

/// Two-treatment Quade test over `N` paired observations (blocks): ranks
/// within blocks, blocks weighted by the rank of their range, and the
/// statistic referred to F(1, N−1). Returns the significance level.
///
/// Conventions: every block tied → p = 1 (no effect is detectable); the
/// perfect-agreement case (the statistic degenerates at A = B) → p =
/// (1/2)^(N−1), the probability of N−1 independent coin flips all agreeing.
pub fn quade_pvalue(y1: &[f64], y2: &[f64]) -> Result<f64> {
    if y1.len() != y2.len() {
        return Err(Error::config("paired series must have equal length"));
    }
    let n = y1.len();
    if n < 3 {
        return Err(Error::config(format!("need at least 3 blocks, got {n}")));
    }
    if !y1.iter().chain(y2).all(|v| v.is_finite()) {
        return Err(Error::numeric("series contain non-finite values"));
    }
    let ranges: Vec<f64> = y1.iter().zip(y2).map(|(a, b)| (a - b).abs()).collect();
    if ranges.iter().all(|&r| r == 0.0) {
        return Ok(1.0);
    }
    let q = rank_average(&ranges);
    // Within-block ranks minus the mean rank 1.5: ±0.5, or 0 on a tie.
    let mut a_stat = 0.0;
    let mut s = [0.0f64; 2];
    for i in 0..n {
        let r = match y1[i].partial_cmp(&y2[i]).expect("finite") {
            std::cmp::Ordering::Less => [-0.5, 0.5],
            std::cmp::Ordering::Equal => [0.0, 0.0],
            std::cmp::Ordering::Greater => [0.5, -0.5],
        };
        for j in 0..2 {
            let sij = q[i] * r[j];
            s[j] += sij;
            a_stat += sij * sij;
        }
    }
    let b_stat = (s[0] * s[0] + s[1] * s[1]) / n as f64;
    if a_stat <= b_stat {
        // Complete agreement across blocks; the F statistic is infinite.
        return Ok(0.5f64.powi(n as i32 - 1));
    }
    let f = (n as f64 - 1.0) * b_stat / (a_stat - b_stat);
    Ok(f_survival(f, 1.0, n as f64 - 1.0).clamp(0.0, 1.0))
}

/// K×K matrix of pairwise significance levels between experts: entry
/// (i, j) is the arithmetic mean over all cell positions of the Quade
/// p-value between the two experts' per-cell output series. Diagonal 1.
///
/// `expert_outputs[k][n]` is expert k's output for sample n, any fixed
/// shape (channels × h × w).
pub fn pairwise_expert_quade(expert_outputs: &[Vec<Tensor>]) -> Result<Vec<Vec<f64>>> {
    let k = expert_outputs.len();
    if k < 2 {
        return Err(Error::config("need at least two experts to compare"));
    }
    let n = expert_outputs[0].len();
    if n < 3 {
        return Err(Error::config(format!("need at least 3 samples, got {n}")));
    }
    let cells = expert_outputs[0][0].numel();
    for outputs in expert_outputs {
        if outputs.len() != n {
            return Err(Error::config("experts disagree on sample count"));
        }
        if outputs.iter().any(|t| t.numel() != cells) {
            return Err(Error::config("expert outputs disagree on shape"));
        }
    }
    let mut p = vec![vec![1.0; k]; k];
    let pairs: Vec<(usize, usize)> =
        (0..k).flat_map(|i| (i + 1..k).map(move |j| (i, j))).collect();
    let means = map_ordered(&pairs, |&(i, j)| -> Result<f64> {
        let mut sum = 0.0;
        for c in 0..cells {
            let yi: Vec<f64> = expert_outputs[i].iter().map(|t| t.data()[c]).collect();
            let yj: Vec<f64> = expert_outputs[j].iter().map(|t| t.data()[c]).collect();
            sum += quade_pvalue(&yi, &yj)?;
        }
        Ok(sum / cells as f64)
    });
    for (&(i, j), m) in pairs.iter().zip(means) {
        let m = m?;
        p[i][j] = m;
        p[j][i] = m;
    }
    Ok(p)
}

/// Per-expert gated outputs a_i ⊙ E_i over `samples`, the series the
/// pairwise test compares: K × N tensors of shape (2, h, w).
pub fn expert_contributions(
    params: &ModelParams,
    samples: &[InputSample],
    mode: ForwardMode,
) -> Result<Vec<Vec<Tensor>>> {
    let traces = map_ordered(samples, |s| forward_with(params, s, mode));
    let k = params.cfg.k;
    let mut out = vec![Vec::with_capacity(samples.len()); k];
    for tr in traces {
        let tr = tr?;
        for (i, per_expert) in out.iter_mut().enumerate() {
            per_expert.push(ForwardTrace::slice_expert(&tr.gated, i));
        }
    }
    Ok(out)
}

// ── Expert-to-pattern matching ──────────────────────────────────────────

/// Pearson correlation; 0 when either side has no variance (a constant
/// map carries no spatial signal to correlate).
pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        return 0.0;
    }
    cov / (va * vb).sqrt()
}

/// Minimum-cost perfect assignment on a square matrix (the Hungarian
/// algorithm with potentials, O(n³)); returns the column picked for each
/// row.
pub fn hungarian_min(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    assert!(cost.iter().all(|row| row.len() == n), "matrix must be square");
    if n == 0 {
        return Vec::new();
    }
    // 1-based arrays; p[j] = row matched to column j (0 = none yet).
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut row_to_col = vec![0usize; n];
    for j in 1..=n {
        row_to_col[p[j] - 1] = j - 1;
    }
    row_to_col
}

#[derive(Clone, Debug, Serialize)]
pub struct MatchResult {
    /// Pattern index matched to each expert; `None` when there are more
    /// experts than patterns and this expert lost out.
    pub assignment: Vec<Option<usize>>,
    /// K×M Pearson correlations between expert maps and pattern masks.
    pub correlations: Vec<Vec<f64>>,
    /// Sum of correlations along the assignment.
    pub total_correlation: f64,
}

/// Match each expert's time-averaged attention map to the ground-truth
/// pattern masks, maximizing total Pearson correlation.
pub fn match_experts_to_patterns(
    mean_attention: &[Tensor],
    truth_masks: &[Tensor],
) -> Result<MatchResult> {
    let k = mean_attention.len();
    let m = truth_masks.len();
    if k == 0 || m == 0 {
        return Err(Error::config("need at least one expert map and one mask"));
    }
    let correlations: Vec<Vec<f64>> = mean_attention
        .iter()
        .map(|a| truth_masks.iter().map(|t| pearson(a.data(), t.data())).collect())
        .collect();
    // Pad to a square minimization problem; dummy entries share one
    // constant, so they never influence which real pairs win.
    let side = k.max(m);
    let cost: Vec<Vec<f64>> = (0..side)
        .map(|i| {
            (0..side)
                .map(|j| if i < k && j < m { -correlations[i][j] } else { 2.0 })
                .collect()
        })
        .collect();
    let row_to_col = hungarian_min(&cost);
    let assignment: Vec<Option<usize>> =
        (0..k).map(|i| (row_to_col[i] < m).then_some(row_to_col[i])).collect();
    let total_correlation = assignment
        .iter()
        .enumerate()
        .filter_map(|(i, &j)| j.map(|j| correlations[i][j]))
        .sum();
    Ok(MatchResult { assignment, correlations, total_correlation })
}

/// The busiest `frac` (0 < frac ≤ 1) of `samples`, ranked by total target
/// flow over both channels; at least one sample is kept. Near-empty
/// intervals carry no pattern signal, so attention maps meant for
/// expert↔pattern matching average over this subset rather than the whole
/// split — at night every expert's attention is equally meaningless.
pub fn busiest_fraction(samples: &[InputSample], frac: f64) -> Result<Vec<InputSample>> {
    if samples.is_empty() {
        return Err(Error::data("no samples to rank by demand"));
    }
    if !(frac > 0.0 && frac <= 1.0) {
        return Err(Error::config(format!("fraction must lie in (0, 1], got {frac}")));
    }
    let mut ranked: Vec<(f64, usize)> = samples
        .iter()
        .enumerate()
        .map(|(idx, s)| (s.y.data().iter().sum::<f64>(), idx))
        .collect();
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let n = ((samples.len() as f64 * frac).ceil() as usize).max(1);
    Ok(ranked[..n].iter().map(|&(_, idx)| samples[idx].clone()).collect())
}

/// Fraction of samples entering match-report attention maps.
pub const MATCH_ATTENTION_FRACTION: f64 = 0.25;

/// Per-expert inflow attention maps averaged over `samples`: K tensors of
/// shape (h, w).
pub fn mean_inflow_attention(
    params: &ModelParams,
    samples: &[InputSample],
    mode: ForwardMode,
) -> Result<Vec<Tensor>> {
    if samples.is_empty() {
        return Err(Error::data("no samples to average attention over"));
    }
    let (k, h, w) = (params.cfg.k, params.cfg.h, params.cfg.w);
    let traces = map_ordered(samples, |s| forward_with(params, s, mode));
    let mut sums = vec![Tensor::zeros([h, w]); k];
    for tr in traces {
        let tr = tr?;
        for (i, sum) in sums.iter_mut().enumerate() {
            // attention is (K, 2, h, w); channel 0 is inflow.
            let base = (i * 2) * h * w;
            for (dst, src) in
                sum.data_mut().iter_mut().zip(&tr.attention.data()[base..base + h * w])
            {
                *dst += src;
            }
        }
    }
    let inv = 1.0 / samples.len() as f64;
    for s in &mut sums {
        for v in s.data_mut() {
            *v *= inv;
        }
    }
    Ok(sums)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn identity_stats() -> NormStats {
        NormStats { min: [0.0, 0.0], max: [1.0, 1.0], lo: 0.0, hi: 1.0 }
    }

    /// Even-length values as a (2, n) tensor: one inflow and one outflow
    /// channel, the layout the normalization code expects.
    fn t1(vals: &[f64]) -> Tensor {
        assert_eq!(vals.len() % 2, 0);
        Tensor::new([2, vals.len() / 2], vals.to_vec())
    }

    // ── metrics ─────────────────────────────────────────────────────────

    #[test]
    fn perfect_prediction_scores_zero() {
        let p = vec![t1(&[3.0, 5.0])];
        let r = metrics(&p, &p.clone(), &identity_stats(), &MapeOptions::default()).unwrap();
        assert_eq!((r.mse, r.rmse, r.mae), (0.0, 0.0, 0.0));
        assert_eq!(r.mape, Some(0.0));
        assert_eq!(r.n, 1);
    }

    #[test]
    fn constant_shift_gives_unit_errors() {
        let truth = vec![t1(&[3.0, 5.0, 9.0, 2.0])];
        let pred = vec![t1(&[4.0, 6.0, 10.0, 3.0])];
        let r = metrics(&pred, &truth, &identity_stats(), &MapeOptions::default()).unwrap();
        assert_eq!((r.mse, r.rmse, r.mae), (1.0, 1.0, 1.0));
    }

    #[test]
    fn two_entry_hand_case() {
        let pred = vec![t1(&[2.0, 4.0])];
        let truth = vec![t1(&[1.0, 2.0])];
        let r = metrics(&pred, &truth, &identity_stats(), &MapeOptions::default()).unwrap();
        assert!((r.mse - 2.5).abs() < 1e-15);
        assert!((r.rmse - 2.5f64.sqrt()).abs() < 1e-15);
        assert!((r.mae - 1.5).abs() < 1e-15);
        // (1/2)(1/2 + 2/4) with the prediction in the denominator.
        assert!((r.mape.unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn truth_denominator_flag_switches_the_formula() {
        let pred = vec![t1(&[2.0, 4.0])];
        let truth = vec![t1(&[1.0, 2.0])];
        let opts = MapeOptions { truth_denominator: true, ..Default::default() };
        let r = metrics(&pred, &truth, &identity_stats(), &opts).unwrap();
        assert!((r.mape.unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn metrics_denormalize_before_scoring() {
        // Stats map [0,1] → [0,10]: a 0.1 gap becomes a denormalized 1.0.
        let stats = NormStats { min: [0.0, 0.0], max: [10.0, 10.0], lo: 0.0, hi: 1.0 };
        let pred = vec![t1(&[0.2, 0.2])];
        let truth = vec![t1(&[0.1, 0.1])];
        let r = metrics(&pred, &truth, &stats, &MapeOptions::default()).unwrap();
        assert!((r.mse - 1.0).abs() < 1e-12);
    }

    #[test]
    fn mape_floor_excludes_small_denominators_and_can_empty_out() {
        let pred = vec![t1(&[0.5, 4.0])];
        let truth = vec![t1(&[1.0, 2.0])];
        let r = metrics(&pred, &truth, &identity_stats(), &MapeOptions::default()).unwrap();
        // Only the second entry's |prediction| clears the floor of 1.
        assert!((r.mape.unwrap() - 0.5).abs() < 1e-15);

        let pred = vec![t1(&[0.5, 0.2])];
        let r = metrics(&pred, &truth, &identity_stats(), &MapeOptions::default()).unwrap();
        assert_eq!(r.mape, None);
    }

    #[test]
    fn mse_rmse_mae_are_symmetric_in_their_arguments() {
        let a = vec![t1(&[2.0, 4.0, 7.0, 3.0])];
        let b = vec![t1(&[1.5, 5.0, 6.0, 8.0])];
        let opts = MapeOptions::default();
        let r1 = metrics(&a, &b, &identity_stats(), &opts).unwrap();
        let r2 = metrics(&b, &a, &identity_stats(), &opts).unwrap();
        assert_eq!(r1.mse, r2.mse);
        assert_eq!(r1.rmse, r2.rmse);
        assert_eq!(r1.mae, r2.mae);
        assert_ne!(r1.mape, r2.mape);
    }

    #[test]
    fn mae_never_exceeds_rmse() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..50 {
            let a = vec![Tensor::from_fn([20], |_| rng.gen_range(-5.0..5.0))];
            let b = vec![Tensor::from_fn([20], |_| rng.gen_range(-5.0..5.0))];
            let r = metrics(&a, &b, &identity_stats(), &MapeOptions::default()).unwrap();
            assert!(r.mae <= r.rmse + 1e-12);
            assert!((r.rmse - r.mse.sqrt()).abs() < 1e-9);
        }
    }

    // ── Quade ───────────────────────────────────────────────────────────

    // Reference p-values computed with an independent implementation of
    // the textbook procedure (ranks, range-weighted blocks, exact F tail).

    #[test]
    fn quade_matches_reference_distinct_case() {
        let p = quade_pvalue(&[1.0, 2.0, 3.0], &[2.0, 4.0, 7.0]).unwrap();
        assert!((p - 0.074_179_900_227_448_54).abs() < 1e-12, "p = {p}");
    }

    #[test]
    fn quade_matches_reference_with_ties() {
        let p = quade_pvalue(&[1.0, 5.0, 3.0, 3.0], &[2.0, 1.0, 3.0, 6.0]).unwrap();
        assert!((p - 0.881_952_748_872_794_2).abs() < 1e-12, "p = {p}");
    }

    #[test]
    fn quade_matches_reference_mixed_n6() {
        let y1 = [0.3, -1.2, 2.5, 0.0, 1.1, -0.4];
        let y2 = [0.5, -1.0, 1.9, 0.0, 2.2, -0.9];
        let p = quade_pvalue(&y1, &y2).unwrap();
        assert!((p - 0.854_429_865_831_206).abs() < 1e-12, "p = {p}");
    }

    #[test]
    fn identical_series_give_p_one() {
        let y = [4.0, 4.0, 4.0, 4.0];
        assert_eq!(quade_pvalue(&y, &y).unwrap(), 1.0);
    }

    #[test]
    fn constant_shift_hits_the_agreement_convention() {
        // Every block prefers the same treatment with equal weight, so
        // A = B exactly and the coin-flip convention applies.
        let y1 = [3.0, 1.0, 4.0, 1.0, 5.0];
        let y2: Vec<f64> = y1.iter().map(|v| v + 10.0).collect();
        assert_eq!(quade_pvalue(&y1, &y2).unwrap(), 0.0625);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a: Vec<f64> = (0..30).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b: Vec<f64> = a.iter().map(|v| v + 10.0).collect();
        let p = quade_pvalue(&a, &b).unwrap();
        assert_eq!(p, 0.5f64.powi(29));
        assert!(p < 0.01);
    }

    #[test]
    fn quade_rejects_short_and_nonfinite_input() {
        assert!(quade_pvalue(&[1.0, 2.0], &[2.0, 1.0]).is_err());
        assert!(quade_pvalue(&[1.0, 2.0, f64::NAN], &[2.0, 1.0, 0.0]).is_err());
        assert!(quade_pvalue(&[1.0, 2.0, 3.0], &[2.0, 1.0]).is_err());
    }

    #[test]
    fn quade_is_invariant_under_positive_affine_maps() {
        // The block weights rank within-block ranges, so any transform
        // that rescales all ranges equally (positive affine) cannot move
        // the statistic; with distinct ranges the p-value is bit-identical.
        // General monotone maps can and do move it, because they reorder
        // ranges between blocks.
        let y1 = [1.0, 5.0, 3.0, 3.0];
        let y2 = [2.0, 1.0, 3.0, 6.0];
        let p0 = quade_pvalue(&y1, &y2).unwrap();
        let f = |v: f64| 3.5 * v + 2.0;
        let a: Vec<f64> = y1.iter().map(|&v| f(v)).collect();
        let b: Vec<f64> = y2.iter().map(|&v| f(v)).collect();
        assert_eq!(p0, quade_pvalue(&a, &b).unwrap());
    }

    #[test]
    fn pairwise_matrix_is_symmetric_with_unit_diagonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let outputs: Vec<Vec<Tensor>> = (0..3)
            .map(|_| (0..8).map(|_| Tensor::from_fn([2, 2], |_| rng.gen_range(0.0..1.0))).collect())
            .collect();
        let p = pairwise_expert_quade(&outputs).unwrap();
        for i in 0..3 {
            assert_eq!(p[i][i], 1.0);
            for j in 0..3 {
                assert_eq!(p[i][j], p[j][i]);
                assert!((0.0..=1.0).contains(&p[i][j]));
            }
        }
    }

    #[test]
    fn duplicated_expert_yields_p_one_against_itself() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a: Vec<Tensor> =
            (0..6).map(|_| Tensor::from_fn([2, 2], |_| rng.gen_range(0.0..1.0))).collect();
        let b = a.clone();
        let c: Vec<Tensor> =
            (0..6).map(|_| Tensor::from_fn([2, 2], |_| rng.gen_range(0.0..1.0))).collect();
        let p = pairwise_expert_quade(&[a, b, c]).unwrap();
        assert_eq!(p[0][1], 1.0);
        assert!(p[0][2] < 1.0);
    }

    // ── Hungarian + matching ────────────────────────────────────────────

    fn brute_force_min(cost: &[Vec<f64>]) -> f64 {
        fn perms(n: usize) -> Vec<Vec<usize>> {
            if n == 1 {
                return vec![vec![0]];
            }
            let mut out = Vec::new();
            for p in perms(n - 1) {
                for slot in 0..n {
                    let mut q: Vec<usize> = p.iter().map(|&v| v + usize::from(v >= slot)).collect();
                    q.push(slot);
                    out.push(q);
                }
            }
            out
        }
        perms(cost.len())
            .into_iter()
            .map(|p| p.iter().enumerate().map(|(i, &j)| cost[i][j]).sum::<f64>())
            .fold(f64::INFINITY, f64::min)
    }

    #[test]
    fn hungarian_matches_brute_force_on_random_matrices() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for trial in 0..100 {
            let n = 2 + (trial % 4);
            let cost: Vec<Vec<f64>> =
                (0..n).map(|_| (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect()).collect();
            let assignment = hungarian_min(&cost);
            let total: f64 = assignment.iter().enumerate().map(|(i, &j)| cost[i][j]).sum();
            let best = brute_force_min(&cost);
            assert!((total - best).abs() < 1e-9, "n={n} got {total}, brute force {best}");
            // Must be a permutation.
            let mut seen = vec![false; n];
            for &j in &assignment {
                assert!(!seen[j]);
                seen[j] = true;
            }
        }
    }

    #[test]
    fn hungarian_beats_random_permutations() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 7;
        let cost: Vec<Vec<f64>> =
            (0..n).map(|_| (0..n).map(|_| rng.gen_range(0.0..10.0)).collect()).collect();
        let total: f64 =
            hungarian_min(&cost).iter().enumerate().map(|(i, &j)| cost[i][j]).sum();
        use rand::seq::SliceRandom;
        for _ in 0..100 {
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut rng);
            let other: f64 = perm.iter().enumerate().map(|(i, &j)| cost[i][j]).sum();
            assert!(total <= other + 1e-12);
        }
    }

    #[test]
    fn equal_maps_match_identically() {
        let masks: Vec<Tensor> = (0..3)
            .map(|m| Tensor::from_fn([4, 4], |i| if i % 3 == m { 1.0 } else { 0.0 }))
            .collect();
        let result = match_experts_to_patterns(&masks, &masks).unwrap();
        assert_eq!(result.assignment, vec![Some(0), Some(1), Some(2)]);
        for (i, row) in result.correlations.iter().enumerate() {
            assert!((row[i] - 1.0).abs() < 1e-12);
        }
        assert!((result.total_correlation - 3.0).abs() < 1e-9);
    }

    #[test]
    fn shuffled_masks_are_recovered() {
        let maps: Vec<Tensor> = (0..4)
            .map(|m| Tensor::from_fn([5, 5], |i| ((i * (m + 2)) % 7) as f64))
            .collect();
        // Present the masks in a known shuffle; the assignment must invert it.
        let shuffle = [2usize, 0, 3, 1];
        let masks: Vec<Tensor> = shuffle.iter().map(|&s| maps[s].clone()).collect();
        let result = match_experts_to_patterns(&maps, &masks).unwrap();
        for (expert, &mask_slot) in result.assignment.iter().zip(&[1usize, 3, 0, 2]) {
            assert_eq!(*expert, Some(mask_slot));
        }
    }

    #[test]
    fn single_expert_gets_its_best_of_two_masks() {
        let expert = Tensor::from_fn([3, 3], |i| (i as f64).sin());
        let good = expert.clone();
        let bad = Tensor::from_fn([3, 3], |i| -(i as f64).sin());
        let result = match_experts_to_patterns(&[expert], &[bad, good]).unwrap();
        assert_eq!(result.assignment, vec![Some(1)]);
    }

    #[test]
    fn constant_map_correlates_to_zero() {
        let flat = Tensor::full([3, 3], 0.7);
        let mask = Tensor::from_fn([3, 3], |i| i as f64);
        let result = match_experts_to_patterns(&[flat], &[mask]).unwrap();
        assert_eq!(result.correlations[0][0], 0.0);
    }

    #[test]
    fn more_experts_than_masks_leaves_the_worst_unmatched() {
        let m = Tensor::from_fn([3, 3], |i| i as f64);
        let close = Tensor::from_fn([3, 3], |i| i as f64 + ((i % 2) as f64) * 0.1);
        let far = Tensor::from_fn([3, 3], |i| ((i * i * 13) % 5) as f64);
        let result = match_experts_to_patterns(&[close, far], &[m]).unwrap();
        assert_eq!(result.assignment[0], Some(0));
        assert_eq!(result.assignment[1], None);
    }

    fn demand_sample(t: usize, total: f64) -> crate::fusion::InputSample {
        crate::fusion::InputSample {
            x: Tensor::zeros([1, 1, 1]),
            y: Tensor::full([2, 1, 1], total / 2.0),
            t,
            external: Vec::new(),
        }
    }

    #[test]
    fn busiest_fraction_keeps_the_top_quantile_by_target_flow() {
        let samples: Vec<_> =
            (0..8).map(|t| demand_sample(t, [3.0, 9.0, 1.0, 7.0, 5.0, 8.0, 2.0, 6.0][t])).collect();
        let top = busiest_fraction(&samples, 0.25).unwrap();
        assert_eq!(top.len(), 2);
        assert_eq!([top[0].t, top[1].t], [1, 5], "highest totals 9 and 8");

        let half = busiest_fraction(&samples, 0.5).unwrap();
        assert_eq!(half.len(), 4);
        assert!(half.iter().all(|s| [1, 5, 3, 7].contains(&s.t)));

        let all = busiest_fraction(&samples, 1.0).unwrap();
        assert_eq!(all.len(), 8);

        // Ties broken by original order, keeping the subset deterministic.
        let tied: Vec<_> = (0..4).map(|t| demand_sample(t, 2.0)).collect();
        let pick = busiest_fraction(&tied, 0.5).unwrap();
        assert_eq!([pick[0].t, pick[1].t], [0, 1]);

        assert!(busiest_fraction(&samples, 0.0).is_err());
        assert!(busiest_fraction(&samples, 1.5).is_err());
        assert!(busiest_fraction(&[], 0.5).is_err());
    }
}

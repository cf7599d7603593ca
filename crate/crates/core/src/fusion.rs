//! Assembly of fused model inputs from a flow series: weekly-trend, daily
//! -period, and closeness frames stacked channel-wise, each frame a
//! (inflow, outflow) pair, oldest first within each block. The external
//! factor vector for the target interval rides alongside untouched; the
//! model's embedder turns it into spatial channels at forward time.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::FlowSeries;
use crate::tensor::Tensor;

/// Temporal make-up of one input: how many weekly, daily, and recent frames
/// to gather, and the step counts of a day and a week.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FusionConfig {
    /// Closeness frames, anchored at t going back one step at a time.
    pub n_c: usize,
    /// Daily-period frames at offsets t − k·day_offset.
    pub n_p: usize,
    /// Weekly-trend frames at offsets t − k·week_offset.
    pub n_q: usize,
    pub day_offset: usize,
    pub week_offset: usize,
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_c + self.n_p + self.n_q == 0 {
            return Err(Error::config("at least one of n_c, n_p, n_q must be positive"));
        }
        if self.day_offset < 1 || self.week_offset < 1 {
            return Err(Error::config("day and week offsets must be at least 1"));
        }
        Ok(())
    }

    /// Flow channels in one fused input (externals excluded).
    pub fn flow_channels(&self) -> usize {
        2 * (self.n_c + self.n_p + self.n_q)
    }

    /// Steps of history a sample needs behind its anchor.
    pub fn history_needed(&self) -> usize {
        let close = self.n_c.saturating_sub(1);
        let day = self.n_p * self.day_offset;
        let week = self.n_q * self.week_offset;
        close.max(day).max(week)
    }

    /// Interval offsets gathered for an anchor `t`, oldest first:
    /// trend block, then period, then closeness (which ends at `t` itself).
    pub fn offsets(&self, t: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.n_c + self.n_p + self.n_q);
        for k in (1..=self.n_q).rev() {
            out.push(t - k * self.week_offset);
        }
        for k in (1..=self.n_p).rev() {
            out.push(t - k * self.day_offset);
        }
        for k in (0..self.n_c).rev() {
            out.push(t - k);
        }
        out
    }
}

/// One training sample: stacked flow frames, the next-interval target, and
/// the raw external vector for the target interval.
///
/// `x` holds only the `2·(n_c+n_p+n_q)` flow channels; the model prepends
/// its embedded external block, bringing the fused channel count to
/// `2·(n_c+n_p+n_q) + n_w`.
#[derive(Clone, Debug, PartialEq)]
pub struct InputSample {
    pub x: Tensor,
    pub y: Tensor,
    pub t: usize,
    pub external: Vec<f64>,
}

/// Gather the frames for anchor `t`; the target is interval `t+1`.
pub fn build_sample(
    series: &FlowSeries,
    externals: &[Vec<f64>],
    t: usize,
    cfg: &FusionConfig,
) -> Result<InputSample> {
    cfg.validate()?;
    let first = series
        .first_t()
        .ok_or_else(|| Error::data("cannot build samples from an empty series"))?;
    let last = first + series.len() - 1;
    if t < first + cfg.history_needed() || t + 1 > last {
        return Err(Error::data(format!(
            "sample at t={t} skipped: needs history back to t−{} and a target at t+1 \
             (series covers {first}..={last})",
            cfg.history_needed()
        )));
    }
    if externals.len() != series.len() {
        return Err(Error::data(format!(
            "{} external vectors for {} intervals",
            externals.len(),
            series.len()
        )));
    }
    let ext = externals[t + 1 - first].clone();
    if let Some(other) = externals.iter().find(|e| e.len() != ext.len()) {
        return Err(Error::data(format!(
            "external vectors have mixed lengths ({} vs {})",
            ext.len(),
            other.len()
        )));
    }

    let (h, w) = (series.grid.h, series.grid.w);
    let mut data = Vec::with_capacity(cfg.flow_channels() * h * w);
    for off in cfg.offsets(t) {
        let snap = series.at(off).expect("offset checked against history");
        data.extend_from_slice(&snap.inflow);
        data.extend_from_slice(&snap.outflow);
    }
    let x = Tensor::new([cfg.flow_channels(), h, w], data);
    let y = series.at(t + 1).expect("target checked").to_tensor(h, w);
    Ok(InputSample { x, y, t, external: ext })
}

/// Chronologically contiguous train/validation/test sample sets.
#[derive(Clone, Debug, Default)]
pub struct DatasetSplits {
    pub train: Vec<InputSample>,
    pub val: Vec<InputSample>,
    pub test: Vec<InputSample>,
}

/// Build every sample with enough history and split chronologically:
/// the last 20% of samples form the test set, and the last 20% of the
/// remainder forms validation (floor-then-remainder at both cuts).
pub fn make_dataset(
    series: &FlowSeries,
    externals: &[Vec<f64>],
    cfg: &FusionConfig,
) -> Result<DatasetSplits> {
    cfg.validate()?;
    let first = series
        .first_t()
        .ok_or_else(|| Error::data("cannot split an empty series"))?;
    let last = first + series.len() - 1;
    let start = first + cfg.history_needed();
    let mut samples = Vec::new();
    let mut t = start;
    while t + 1 <= last {
        samples.push(build_sample(series, externals, t, cfg)?);
        t += 1;
    }
    let n = samples.len();
    if n < 3 {
        return Err(Error::data(format!(
            "only {n} usable samples; need at least 3 for a train/val/test split"
        )));
    }
    let trainval = n * 8 / 10;
    let train = trainval * 8 / 10;
    let test_set = samples.split_off(trainval);
    let val_set = samples.split_off(train);
    Ok(DatasetSplits { train: samples, val: val_set, test: test_set })
}

//! Feature pipeline: frame stacking with subsampling, and spectral masking.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Rng, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrontendConfig {
    /// Consecutive frames concatenated into one output frame.
    pub stack: usize,
    /// Input frames between consecutive output frames.
    pub subsample: usize,
    pub freq_mask_width: usize,
    pub freq_mask_count: usize,
    pub time_mask_width: usize,
    pub time_mask_count: usize,
    pub augment: bool,
}

impl Default for FrontendConfig {
    fn default() -> Self {
        Self {
            stack: 1,
            subsample: 1,
            freq_mask_width: 0,
            freq_mask_count: 0,
            time_mask_width: 0,
            time_mask_count: 0,
            augment: false,
        }
    }
}

impl FrontendConfig {
    /// 4-frame stacking at stride 3, F=50 ×2 frequency masks, T=30 ×10 time
    /// masks.
    pub fn large() -> Self {
        Self {
            stack: 4,
            subsample: 3,
            freq_mask_width: 50,
            freq_mask_count: 2,
            time_mask_width: 30,
            time_mask_count: 10,
            augment: true,
        }
    }

    pub fn validate(&self, key: &str) -> Result<()> {
        if self.stack == 0 {
            return Err(Error::config(format!("{key}.stack"), "must be at least 1"));
        }
        if self.subsample == 0 {
            return Err(Error::config(format!("{key}.subsample"), "must be at least 1"));
        }
        Ok(())
    }

    /// Feature width after stacking `input_dim`-wide frames.
    pub fn output_dim(&self, input_dim: usize) -> usize {
        self.stack * input_dim
    }
}

/// Output row `i` concatenates input rows `i·subsample .. i·subsample + stack`,
/// repeating the last input row past the end. Produces `ceil(n / subsample)`
/// rows.
pub fn stack_subsample(frames: &Tensor, stack: usize, subsample: usize) -> Result<Tensor> {
    if stack == 0 || subsample == 0 {
        return Err(Error::invalid("stack and subsample must be at least 1"));
    }
    let n = frames.rows();
    if n == 0 {
        return Err(Error::invalid("cannot stack an empty feature matrix"));
    }
    let d = frames.cols();
    let m = n.div_ceil(subsample);
    let mut out = Vec::with_capacity(m * stack * d);
    for i in 0..m {
        for j in 0..stack {
            out.extend_from_slice(frames.row((i * subsample + j).min(n - 1)));
        }
    }
    Tensor::new([m, stack * d], out)
}

/// A zeroed band: `start..start + width` along one axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MaskBand {
    pub start: usize,
    pub width: usize,
}

/// Frequency and time bands drawn for one utterance.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct MaskPlan {
    pub freq: Vec<MaskBand>,
    pub time: Vec<MaskBand>,
}

fn draw_band(rng: &mut Rng, max_width: usize, extent: usize) -> MaskBand {
    let width = rng.range_inclusive(0, max_width).min(extent);
    let start = rng.range_inclusive(0, extent - width);
    MaskBand { start, width }
}

/// Draws masks for an `[n × d]` matrix: frequency bands first, then time
/// bands, widths uniform in `[0, max]` clamped to the axis.
pub fn plan_masks(n: usize, d: usize, config: &FrontendConfig, rng: &mut Rng) -> MaskPlan {
    let freq = (0..config.freq_mask_count)
        .map(|_| draw_band(rng, config.freq_mask_width, d))
        .collect();
    let time = (0..config.time_mask_count)
        .map(|_| draw_band(rng, config.time_mask_width, n))
        .collect();
    MaskPlan { freq, time }
}

pub fn apply_masks(features: &Tensor, plan: &MaskPlan) -> Tensor {
    let mut out = features.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        for b in &plan.freq {
            row[b.start..b.start + b.width].fill(0.0);
        }
    }
    for b in &plan.time {
        for r in b.start..b.start + b.width {
            out.row_mut(r).fill(0.0);
        }
    }
    out
}

/// Zeroes random frequency and time bands. Identity when augmentation is
/// disabled.
pub fn spec_augment(features: &Tensor, config: &FrontendConfig, rng: &mut Rng) -> Tensor {
    if !config.augment {
        return features.clone();
    }
    let plan = plan_masks(features.rows(), features.cols(), config, rng);
    apply_masks(features, &plan)
}

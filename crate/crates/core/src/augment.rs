//! Stochastic IMU view generation: random scaling followed by optional time
//! reversal.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentConfig {
    pub scale_low: f64,
    pub scale_high: f64,
    pub p_reverse: f64,
    /// One factor per channel instead of one global factor.
    #[serde(rename = "per_channel")]
    pub per_channel_scale: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            scale_low: 0.5,
            scale_high: 2.0,
            p_reverse: 0.5,
            per_channel_scale: false,
        }
    }
}

impl AugmentConfig {
    /// Leaves every segment untouched.
    pub fn identity() -> Self {
        Self {
            scale_low: 1.0,
            scale_high: 1.0,
            p_reverse: 0.0,
            per_channel_scale: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scale_low > 0.0) || !self.scale_low.is_finite() {
            return Err(Error::config("augment.scale_low", "must be a positive real"));
        }
        if !(self.scale_high >= self.scale_low) || !self.scale_high.is_finite() {
            return Err(Error::config("augment.scale_high", "must be >= scale_low"));
        }
        if !(0.0..=1.0).contains(&self.p_reverse) {
            return Err(Error::config("augment.p_reverse", "must lie in [0, 1]"));
        }
        Ok(())
    }

    /// RNG draws consumed by one [`apply_h`] call on a `channels`-channel segment.
    pub fn draws_per_call(&self, channels: usize) -> usize {
        self.scale_draws(channels) + 1
    }

    fn scale_draws(&self, channels: usize) -> usize {
        if self.per_channel_scale {
            channels
        } else {
            1
        }
    }
}

fn log_uniform(rng: &mut SeededRng, low: f64, high: f64) -> f64 {
    let u = rng.uniform();
    if low == high {
        return low;
    }
    (low.ln() + u * (high.ln() - low.ln())).exp()
}

/// Multiplies the segment by a log-uniform factor from
/// `[scale_low, scale_high]`; per channel when configured. Consumes exactly
/// one uniform draw per factor.
pub fn random_scale(segment: &Tensor, rng: &mut SeededRng, cfg: &AugmentConfig) -> Result<Tensor> {
    let (c, t) = segment.dims2("random_scale")?;
    let factors: Vec<f64> = (0..cfg.scale_draws(c))
        .map(|_| log_uniform(rng, cfg.scale_low, cfg.scale_high))
        .collect();
    let mut out = segment.clone();
    for ch in 0..c {
        let s = if cfg.per_channel_scale { factors[ch] } else { factors[0] };
        out.data_mut()[ch * t..(ch + 1) * t].iter_mut().for_each(|v| *v *= s);
    }
    Ok(out)
}

/// Reverses the sample order of every channel of a `[C × T]` segment.
pub fn time_reverse(segment: &Tensor) -> Result<Tensor> {
    let (c, t) = segment.dims2("time_reverse")?;
    let mut out = segment.clone();
    for ch in 0..c {
        out.data_mut()[ch * t..(ch + 1) * t].reverse();
    }
    Ok(out)
}

/// The full view generator: scaling always, then time reversal with
/// probability `p_reverse`.
///
/// Draw budget is fixed per config: the scale factor(s), then one uniform for
/// the reversal decision even when `p_reverse` is 0 or 1, so parallel streams
/// stay aligned.
pub fn apply_h(segment: &Tensor, rng: &mut SeededRng, cfg: &AugmentConfig) -> Result<Tensor> {
    let scaled = random_scale(segment, rng, cfg)?;
    let u = rng.uniform();
    if u < cfg.p_reverse {
        time_reverse(&scaled)
    } else {
        Ok(scaled)
    }
}

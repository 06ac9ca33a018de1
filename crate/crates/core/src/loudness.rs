//! Integrated loudness per ITU-R BS.1770-4 for mono signals.

use serde::{Deserialize, Serialize};

use crate::error::{input_err, Result};
use crate::signal::AudioClip;

const BLOCK_SECS: f64 = 0.4;
const STEP_SECS: f64 = 0.1;
const ABSOLUTE_GATE_LKFS: f64 = -70.0;
const RELATIVE_GATE_LU: f64 = -10.0;
const OFFSET: f64 = -0.691;

/// Result of an integrated loudness measurement.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LoudnessReading {
    Measured {
        lufs: f64,
        gated_block_count: usize,
    },
    /// No block survived the absolute gate.
    Silent,
}

impl LoudnessReading {
    pub fn lufs(&self) -> Option<f64> {
        match self {
            LoudnessReading::Measured { lufs, .. } => Some(*lufs),
            LoudnessReading::Silent => None,
        }
    }

    pub fn is_silent(&self) -> bool {
        matches!(self, LoudnessReading::Silent)
    }

    pub fn gated_block_count(&self) -> usize {
        match self {
            LoudnessReading::Measured { gated_block_count, .. } => *gated_block_count,
            LoudnessReading::Silent => 0,
        }
    }
}

/// Direct form I biquad with `a0` normalised to one.
#[derive(Debug, Clone, Copy)]
struct Biquad {
    b: [f64; 3],
    a: [f64; 2],
}

impl Biquad {
    /// Stage one: the head-related high shelf, bilinear-transformed for `rate`.
    fn high_shelf(rate: f64) -> Self {
        let gain_db = 3.999_843_853_973_347;
        let q = 0.707_175_236_955_419_3;
        let fc = 1_681.974_450_955_532;
        let k = (std::f64::consts::PI * fc / rate).tan();
        let vh = 10f64.powf(gain_db / 20.0);
        let vb = vh.powf(0.499_666_774_154_541_6);
        let a0 = 1.0 + k / q + k * k;
        Self {
            b: [(vh + vb * k / q + k * k) / a0, 2.0 * (k * k - vh) / a0, (vh - vb * k / q + k * k) / a0],
            a: [2.0 * (k * k - 1.0) / a0, (1.0 - k / q + k * k) / a0],
        }
    }

    /// Stage two: the RLB high-pass.
    fn high_pass(rate: f64) -> Self {
        let q = 0.500_327_037_325_395_3;
        let fc = 38.135_470_876_139_82;
        let k = (std::f64::consts::PI * fc / rate).tan();
        let a0 = 1.0 + k / q + k * k;
        Self { b: [1.0, -2.0, 1.0], a: [2.0 * (k * k - 1.0) / a0, (1.0 - k / q + k * k) / a0] }
    }

    fn filter(&self, x: &[f64]) -> Vec<f64> {
        let (mut x1, mut x2, mut y1, mut y2) = (0.0, 0.0, 0.0, 0.0);
        x.iter()
            .map(|&x0| {
                let y0 = self.b[0] * x0 + self.b[1] * x1 + self.b[2] * x2 - self.a[0] * y1 - self.a[1] * y2;
                x2 = x1;
                x1 = x0;
                y2 = y1;
                y1 = y0;
                y0
            })
            .collect()
    }
}

/// K-weighted copy of the signal.
pub fn k_weight(clip: &AudioClip) -> Vec<f64> {
    let rate = clip.sample_rate() as f64;
    let stage1 = Biquad::high_shelf(rate).filter(clip.samples());
    Biquad::high_pass(rate).filter(&stage1)
}

fn block_loudness(mean_square: f64) -> f64 {
    OFFSET + 10.0 * mean_square.log10()
}

/// Gated integrated loudness of a mono clip.
pub fn integrated_loudness(clip: &AudioClip) -> Result<LoudnessReading> {
    let rate = clip.sample_rate() as f64;
    let block = (BLOCK_SECS * rate).round() as usize;
    let step = (STEP_SECS * rate).round() as usize;
    if clip.len() < block {
        return Err(input_err!("loudness needs at least {block} samples (400 ms), clip has {}", clip.len()));
    }
    let weighted = k_weight(clip);
    let mut prefix = Vec::with_capacity(weighted.len() + 1);
    prefix.push(0.0);
    let mut acc = 0.0;
    for v in &weighted {
        acc += v * v;
        prefix.push(acc);
    }
    let n_blocks = (clip.len() - block) / step + 1;
    let powers: Vec<f64> = (0..n_blocks)
        .map(|j| {
            let lo = j * step;
            ((prefix[lo + block] - prefix[lo]) / block as f64).max(0.0)
        })
        .collect();

    let above_absolute: Vec<f64> =
        powers.iter().copied().filter(|&p| p > 0.0 && block_loudness(p) > ABSOLUTE_GATE_LKFS).collect();
    if above_absolute.is_empty() {
        return Ok(LoudnessReading::Silent);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let relative_gate = block_loudness(mean(&above_absolute)) + RELATIVE_GATE_LU;
    let gated: Vec<f64> = above_absolute.into_iter().filter(|&p| block_loudness(p) > relative_gate).collect();
    Ok(LoudnessReading::Measured { lufs: block_loudness(mean(&gated)), gated_block_count: gated.len() })
}

/// Gain in dB that moves `current` onto `target_lufs`.
pub fn gain_to_target(current: &LoudnessReading, target_lufs: f64) -> Result<f64> {
    match current.lufs() {
        Some(lufs) => Ok(target_lufs - lufs),
        None => Err(input_err!("cannot compute a loudness gain for a silent signal")),
    }
}

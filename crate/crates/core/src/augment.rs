//! Length-preserving signal augmentations applied before mixup.

use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::SpeechSample;
use crate::error::{Error, Result};

pub const DEFAULT_APPLY_PROBABILITY: f64 = 0.3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Augmentation {
    GaussianNoise { sigma: f64 },
    Gain { db: f64 },
    PolarityInversion,
    /// Zero one contiguous span of at most `max_fraction * length` frames.
    TimeMask { max_fraction: f64 },
    /// Clamp magnitudes above the given percentile of `|signal|`.
    ClippingDistortion { percentile: f64 },
}

impl Augmentation {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Augmentation::GaussianNoise { sigma } if !(sigma >= 0.0 && sigma.is_finite()) => {
                Err(Error::validation(format!("noise sigma must be >= 0, got {sigma}")))
            }
            Augmentation::Gain { db } if !db.is_finite() => {
                Err(Error::validation("gain must be finite"))
            }
            Augmentation::TimeMask { max_fraction } if !(0.0..1.0).contains(&max_fraction) => {
                Err(Error::validation(format!(
                    "time mask fraction must lie in [0, 1), got {max_fraction}"
                )))
            }
            Augmentation::ClippingDistortion { percentile }
                if !(percentile > 50.0 && percentile <= 100.0) =>
            {
                Err(Error::validation(format!(
                    "clipping percentile must lie in (50, 100], got {percentile}"
                )))
            }
            _ => Ok(()),
        }
    }

    /// Apply unconditionally to a `length × d_in` signal.
    pub fn apply_to<R: Rng + ?Sized>(&self, signal: &mut Array2<f64>, rng: &mut R) {
        match *self {
            Augmentation::GaussianNoise { sigma } => {
                if sigma > 0.0 {
                    for v in signal.iter_mut() {
                        let z: f64 = rng.sample(StandardNormal);
                        *v += sigma * z;
                    }
                }
            }
            Augmentation::Gain { db } => {
                let scale = 10f64.powf(db / 20.0);
                signal.mapv_inplace(|v| v * scale);
            }
            Augmentation::PolarityInversion => signal.mapv_inplace(|v| -v),
            Augmentation::TimeMask { max_fraction } => {
                let length = signal.nrows();
                let max_span = (max_fraction * length as f64).floor() as usize;
                let span = rng.random_range(0..=max_span);
                let start = rng.random_range(0..=length - span);
                signal
                    .slice_mut(ndarray::s![start..start + span, ..])
                    .fill(0.0);
            }
            Augmentation::ClippingDistortion { percentile } => {
                let threshold = abs_percentile(signal, percentile);
                signal.mapv_inplace(|v| v.clamp(-threshold, threshold));
            }
        }
    }
}

/// Nearest-rank percentile of the absolute values.
fn abs_percentile(signal: &Array2<f64>, percentile: f64) -> f64 {
    let mut mags: Vec<f64> = signal.iter().map(|v| v.abs()).collect();
    mags.sort_by(f64::total_cmp);
    let rank = ((percentile / 100.0) * mags.len() as f64).ceil() as usize;
    mags[rank.clamp(1, mags.len()) - 1]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentStep {
    #[serde(flatten)]
    pub op: Augmentation,
    #[serde(default = "default_probability")]
    pub probability: f64,
}

fn default_probability() -> f64 {
    DEFAULT_APPLY_PROBABILITY
}

impl AugmentStep {
    pub fn new(op: Augmentation, probability: f64) -> Self {
        Self { op, probability }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentChain {
    pub steps: Vec<AugmentStep>,
    pub seed: u64,
}

impl AugmentChain {
    pub fn validate(&self) -> Result<()> {
        for step in &self.steps {
            step.op.validate()?;
            if !(0.0..=1.0).contains(&step.probability) {
                return Err(Error::validation(format!(
                    "augmentation probability must lie in [0, 1], got {}",
                    step.probability
                )));
            }
        }
        Ok(())
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Run every step in order, each gated by its own probability draw.
    pub fn apply<R: Rng + ?Sized>(&self, sample: &SpeechSample, rng: &mut R) -> SpeechSample {
        if self.steps.is_empty() {
            return sample.clone();
        }
        let mut signal = sample.signal().to_owned();
        for step in &self.steps {
            if rng.random::<f64>() < step.probability {
                step.op.apply_to(&mut signal, rng);
            }
        }
        sample.with_signal(signal)
    }
}

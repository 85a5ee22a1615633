//! Conventional and label-adaptive mixup over variable-length frame sequences.
//!
//! Signals of unequal length are zero-padded at the tail to the longer length
//! before the convex combination. In label-adaptive mode the label of the mix
//! is weighted by each source's original length:
//!
//! ```text
//! w_i = λ·l_i / (λ·l_i + (1-λ)·l_j),   y = w_i·y_i + (1-w_i)·y_j
//! ```

use ndarray::{Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::data::{one_hot_n, SoftLabel, SpeechSample};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MixupMode {
    Conventional,
    LabelAdaptive,
    Off,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MixupPolicy {
    pub mode: MixupMode,
    /// Beta(alpha, alpha) parameter, conventional mode only.
    pub alpha: f64,
    /// Constant mixing coefficient for label-adaptive mode.
    pub lambda_fixed: f64,
}

impl Default for MixupPolicy {
    fn default() -> Self {
        Self {
            mode: MixupMode::LabelAdaptive,
            alpha: 1.0,
            lambda_fixed: 0.5,
        }
    }
}

impl MixupPolicy {
    pub fn off() -> Self {
        Self {
            mode: MixupMode::Off,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::validation(format!(
                "mixup alpha must be > 0, got {}",
                self.alpha
            )));
        }
        check_lambda(self.lambda_fixed)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixedSample {
    pub signal: Array2<f64>,
    pub length: usize,
    pub label: SoftLabel,
    pub source_lengths: (usize, usize),
    pub lambda_used: f64,
    /// Batch positions of the two sources.
    pub sources: (usize, usize),
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::validation(format!(
            "mixup lambda must lie in [0, 1], got {lambda}"
        )));
    }
    Ok(())
}

/// `λ·x_i + (1-λ)·x_j` after zero-padding both to `max(l_i, l_j)` frames.
pub fn mix_signals(
    x_i: ArrayView2<'_, f64>,
    x_j: ArrayView2<'_, f64>,
    lambda: f64,
) -> Result<Array2<f64>> {
    check_lambda(lambda)?;
    if x_i.ncols() != x_j.ncols() {
        return Err(Error::validation(format!(
            "cannot mix frame dims {} and {}",
            x_i.ncols(),
            x_j.ncols()
        )));
    }
    let length = x_i.nrows().max(x_j.nrows());
    let mut out = Array2::<f64>::zeros((length, x_i.ncols()));
    out.slice_mut(ndarray::s![..x_i.nrows(), ..])
        .scaled_add(lambda, &x_i);
    out.slice_mut(ndarray::s![..x_j.nrows(), ..])
        .scaled_add(1.0 - lambda, &x_j);
    Ok(out)
}

fn combine(y_i: &SoftLabel, w_i: f64, y_j: &SoftLabel, w_j: f64) -> Result<SoftLabel> {
    if y_i.len() != y_j.len() {
        return Err(Error::validation(format!(
            "cannot mix labels over {} and {} classes",
            y_i.len(),
            y_j.len()
        )));
    }
    let probs = y_i
        .probs()
        .iter()
        .zip(y_j.probs())
        .map(|(a, b)| (w_i * a + w_j * b).clamp(0.0, 1.0))
        .collect();
    Ok(SoftLabel::from_raw(probs))
}

/// `λ·y_i + (1-λ)·y_j`.
pub fn mix_labels_conventional(y_i: &SoftLabel, y_j: &SoftLabel, lambda: f64) -> Result<SoftLabel> {
    check_lambda(lambda)?;
    combine(y_i, lambda, y_j, 1.0 - lambda)
}

/// Length-weighted label combination. Returns `(weight_i, weight_j)`.
/// `λ = 1` and `λ = 0` are pure passthrough of `y_i` and `y_j`.
pub fn adaptive_weights(l_i: usize, l_j: usize, lambda: f64) -> Result<(f64, f64)> {
    check_lambda(lambda)?;
    if l_i == 0 || l_j == 0 {
        return Err(Error::validation(format!(
            "sequence lengths must be positive, got ({l_i}, {l_j})"
        )));
    }
    if lambda == 1.0 {
        return Ok((1.0, 0.0));
    }
    if lambda == 0.0 {
        return Ok((0.0, 1.0));
    }
    let a = lambda * l_i as f64;
    let b = (1.0 - lambda) * l_j as f64;
    let w_i = a / (a + b);
    Ok((w_i, 1.0 - w_i))
}

pub fn mix_labels_adaptive(
    y_i: &SoftLabel,
    l_i: usize,
    y_j: &SoftLabel,
    l_j: usize,
    lambda: f64,
) -> Result<SoftLabel> {
    let (w_i, w_j) = adaptive_weights(l_i, l_j, lambda)?;
    combine(y_i, w_i, y_j, w_j)
}

/// Mix a batch: sample `k` is paired with `perm[k]` for a seeded permutation.
pub fn mix_batch(
    samples: &[SpeechSample],
    policy: &MixupPolicy,
    n_classes: usize,
    rng_seed: u64,
) -> Result<Vec<MixedSample>> {
    policy.validate()?;
    let labels = samples
        .iter()
        .map(|s| one_hot_n(s.label, n_classes))
        .collect::<Result<Vec<_>>>()?;

    if policy.mode == MixupMode::Off {
        return Ok(samples
            .iter()
            .zip(labels)
            .enumerate()
            .map(|(k, (s, label))| MixedSample {
                signal: s.signal().to_owned(),
                length: s.length(),
                label,
                source_lengths: (s.length(), s.length()),
                lambda_used: 1.0,
                sources: (k, k),
            })
            .collect());
    }
    if samples.len() < 2 {
        return Err(Error::validation(format!(
            "mixup needs at least 2 samples, got {}",
            samples.len()
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut perm: Vec<usize> = (0..samples.len()).collect();
    perm.shuffle(&mut rng);
    let beta = Beta::new(policy.alpha, policy.alpha)
        .map_err(|e| Error::validation(format!("beta distribution: {e}")))?;

    let mut out = Vec::with_capacity(samples.len());
    for (i, &j) in perm.iter().enumerate() {
        let (a, b) = (&samples[i], &samples[j]);
        let lambda = match policy.mode {
            MixupMode::Conventional => beta.sample(&mut rng),
            _ => policy.lambda_fixed,
        };
        let label = match policy.mode {
            MixupMode::Conventional => mix_labels_conventional(&labels[i], &labels[j], lambda)?,
            _ => mix_labels_adaptive(&labels[i], a.length(), &labels[j], b.length(), lambda)?,
        };
        let signal = mix_signals(a.signal(), b.signal(), lambda)?;
        out.push(MixedSample {
            length: signal.nrows(),
            signal,
            label,
            source_lengths: (a.length(), b.length()),
            lambda_used: lambda,
            sources: (i, j),
        });
    }
    Ok(out)
}

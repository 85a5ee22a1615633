//! Recognition (log-softmax KL), argmax-gated center loss, and their sum.

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::data::SoftLabel;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Weight of the center loss in the joint objective (best reported value 0.002).
    pub lambda_center: f64,
    /// Floor on predicted probabilities inside the log.
    pub epsilon: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_center: 0.002,
            epsilon: 1e-12,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_center >= 0.0 && self.lambda_center.is_finite()) {
            return Err(Error::validation("lambda_center must be >= 0"));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::validation("epsilon must be > 0"));
        }
        Ok(())
    }
}

/// Per-class centroids of the `f0` embedding, updated by their own delta rule.
#[derive(Debug, Clone, PartialEq)]
pub struct CenterBank {
    pub centers: Array2<f64>,
    pub center_lr: f64,
}

impl CenterBank {
    /// Zero-initialised centers.
    pub fn new(n_classes: usize, dim: usize, center_lr: f64) -> Self {
        Self {
            centers: Array2::zeros((n_classes, dim)),
            center_lr,
        }
    }

    pub fn n_classes(&self) -> usize {
        self.centers.nrows()
    }

    pub fn dim(&self) -> usize {
        self.centers.ncols()
    }
}

fn check_pair(target: &SoftLabel, n: usize) -> Result<()> {
    if target.len() != n {
        return Err(Error::validation(format!(
            "target has {} classes, prediction has {n}",
            target.len()
        )));
    }
    let sum: f64 = target.probs().iter().sum();
    if target.probs().iter().any(|z| *z < 0.0) || (sum - 1.0).abs() > 1e-9 {
        return Err(Error::validation("target is not a probability vector"));
    }
    Ok(())
}

/// `Σ z_k · ln(z_k / ẑ_k)` with `ẑ` floored at `epsilon` and `0·ln 0 = 0`.
/// The gradient is reported with respect to the logits that produced `predicted`.
pub fn recognition_loss(
    target: &SoftLabel,
    predicted: &SoftLabel,
    epsilon: f64,
) -> Result<(f64, Vec<f64>)> {
    check_pair(target, predicted.len())?;
    let loss = target
        .probs()
        .iter()
        .zip(predicted.probs())
        .filter(|(z, _)| **z > 0.0)
        .map(|(z, q)| z * (z.ln() - q.max(epsilon).ln()))
        .sum::<f64>()
        .max(0.0);
    let grad = predicted
        .probs()
        .iter()
        .zip(target.probs())
        .map(|(q, z)| q - z)
        .collect();
    Ok((loss, grad))
}

/// Same objective evaluated through log-softmax of the logits directly.
pub fn recognition_loss_from_logits(target: &SoftLabel, logits: &[f64]) -> Result<(f64, Vec<f64>)> {
    check_pair(target, logits.len())?;
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let log_sum = logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln() + max;
    let loss = target
        .probs()
        .iter()
        .zip(logits)
        .filter(|(z, _)| **z > 0.0)
        .map(|(z, l)| z * (z.ln() - (l - log_sum)))
        .sum::<f64>();
    let grad = logits
        .iter()
        .zip(target.probs())
        .map(|(l, z)| (l - log_sum).exp() - z)
        .collect();
    Ok((loss, grad))
}

fn check_batch(features: &[Array1<f64>], targets: &[SoftLabel], bank: &CenterBank) -> Result<()> {
    if features.is_empty() {
        return Err(Error::validation("center loss needs a non-empty batch"));
    }
    if features.len() != targets.len() {
        return Err(Error::validation(format!(
            "{} features but {} targets",
            features.len(),
            targets.len()
        )));
    }
    for (f, t) in features.iter().zip(targets) {
        if f.len() != bank.dim() {
            return Err(Error::validation(format!(
                "feature dim {} does not match center dim {}",
                f.len(),
                bank.dim()
            )));
        }
        if t.len() != bank.n_classes() {
            return Err(Error::validation(format!(
                "target has {} classes, bank has {}",
                t.len(),
                bank.n_classes()
            )));
        }
    }
    Ok(())
}

/// `(1/N) Σ ‖v_i − μ_{argmax y_i}‖²` and its gradient `(2/N)(v_i − μ)`.
/// The bank is read, never written.
pub fn center_loss(
    features: &[Array1<f64>],
    targets: &[SoftLabel],
    bank: &CenterBank,
) -> Result<(f64, Vec<Array1<f64>>)> {
    check_batch(features, targets, bank)?;
    let n = features.len() as f64;
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(features.len());
    for (f, t) in features.iter().zip(targets) {
        let diff = f - &bank.centers.row(t.argmax());
        loss += diff.dot(&diff);
        grads.push(diff * (2.0 / n));
    }
    Ok((loss / n, grads))
}

/// Count-normalised delta rule: `μ_c ← μ_c − lr · Σ_{i∈c}(μ_c − v_i) / (1 + n_c)`.
/// Classes without batch members keep their centers.
pub fn update_centers(
    features: &[Array1<f64>],
    targets: &[SoftLabel],
    bank: &CenterBank,
) -> Result<CenterBank> {
    check_batch(features, targets, bank)?;
    let mut sums = Array2::<f64>::zeros(bank.centers.raw_dim());
    let mut counts = vec![0usize; bank.n_classes()];
    for (f, t) in features.iter().zip(targets) {
        let c = t.argmax();
        let mut row = sums.row_mut(c);
        row += &(&bank.centers.row(c) - f);
        counts[c] += 1;
    }
    let mut next = bank.clone();
    for (c, &n_c) in counts.iter().enumerate() {
        if n_c == 0 {
            continue;
        }
        let delta = &sums.row(c) / (1.0 + n_c as f64);
        let mut row = next.centers.row_mut(c);
        row.scaled_add(-bank.center_lr, &delta);
    }
    Ok(next)
}

/// Joint objective on a batch with per-sample gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct JointLoss {
    pub loss: f64,
    pub recognition: f64,
    pub center: f64,
    pub d_logits: Vec<Vec<f64>>,
    pub d_features: Vec<Array1<f64>>,
}

pub fn combine_losses(recognition: f64, center: f64, lambda_center: f64) -> f64 {
    recognition + lambda_center * center
}

/// `L = mean_i L_r(i) + λ_c · L_c` over a batch, with gradients with respect
/// to each sample's logits and `f0` embedding.
pub fn joint_loss(
    targets: &[SoftLabel],
    logits: &[Array1<f64>],
    features: &[Array1<f64>],
    bank: &CenterBank,
    config: &LossConfig,
) -> Result<JointLoss> {
    if logits.len() != targets.len() {
        return Err(Error::validation(format!(
            "{} logits but {} targets",
            logits.len(),
            targets.len()
        )));
    }
    let n = targets.len() as f64;
    let mut recognition = 0.0;
    let mut d_logits = Vec::with_capacity(targets.len());
    for (t, l) in targets.iter().zip(logits) {
        let (loss, grad) =
            recognition_loss_from_logits(t, l.as_slice().expect("contiguous logits"))?;
        recognition += loss;
        d_logits.push(grad.into_iter().map(|g| g / n).collect());
    }
    recognition /= n;

    let (center, mut d_features) = center_loss(features, targets, bank)?;
    for g in d_features.iter_mut() {
        *g *= config.lambda_center;
    }
    let loss = combine_losses(recognition, center, config.lambda_center);
    if !loss.is_finite() {
        return Err(Error::numeric(format!(
            "non-finite joint loss (recognition {recognition}, center {center})"
        )));
    }
    Ok(JointLoss {
        loss,
        recognition,
        center,
        d_logits,
        d_features,
    })
}

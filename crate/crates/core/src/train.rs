//! Minibatch training: augmentation, mixup, joint loss, Adam with an
//! epoch-decayed learning rate, per-batch center updates and early stopping
//! on a stratified validation split.

use std::collections::BTreeMap;

use ndarray::Array1;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::AugmentChain;
use crate::data::{SoftLabel, SpeechSample};
use crate::error::{Error, Result};
use crate::eval::{evaluate, unweighted_accuracy, weighted_accuracy};
use crate::losses::{joint_loss, update_centers, CenterBank, LossConfig};
use crate::mixup::{mix_batch, MixupMode, MixupPolicy};
use crate::model::{backward, forward_cached, ModelConfig, Params};
use crate::optim::Adam;

/// `lr0 / factor^min(epoch, until)`.
pub fn lr_at_epoch(lr0: f64, epoch: usize, factor: f64, until: usize) -> f64 {
    lr0 / factor.powi(epoch.min(until) as i32)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    /// Initial Adam learning rate for the model (1e-4).
    pub lr_model: f64,
    /// Initial center update rate (1e-3).
    pub lr_center: f64,
    /// Both rates are divided by this factor each epoch (1.25)...
    pub lr_decay_factor: f64,
    /// ...until this epoch (20).
    pub lr_decay_until_epoch: usize,
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping (10).
    pub early_stop_patience: usize,
    /// Fraction of training data held out for validation (0.1).
    pub val_fraction: f64,
    pub seed: u64,
    pub mixup: MixupPolicy,
    pub augment: AugmentChain,
    pub loss: LossConfig,
    /// Only update the final projection layer `f1`.
    pub head_only: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            lr_model: 1e-4,
            lr_center: 1e-3,
            lr_decay_factor: 1.25,
            lr_decay_until_epoch: 20,
            max_epochs: 50,
            early_stop_patience: 10,
            val_fraction: 0.1,
            seed: 0,
            mixup: MixupPolicy::default(),
            augment: AugmentChain::default(),
            loss: LossConfig::default(),
            head_only: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::validation("batch_size must be >= 1"));
        }
        for (name, v) in [
            ("lr_model", self.lr_model),
            ("lr_center", self.lr_center),
            ("lr_decay_factor", self.lr_decay_factor),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::validation(format!("{name} must be > 0, got {v}")));
            }
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::validation(format!(
                "val_fraction must lie in (0, 1), got {}",
                self.val_fraction
            )));
        }
        if self.early_stop_patience == 0 {
            return Err(Error::validation("early_stop_patience must be >= 1"));
        }
        self.mixup.validate()?;
        self.augment.validate()?;
        self.loss.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr_model: f64,
    pub train_loss: f64,
    pub train_recognition_loss: f64,
    pub train_center_loss: f64,
    pub val_wa: f64,
    pub val_ua: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub records: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_wa: f64,
    pub best_val_ua: f64,
    pub stopped_early: bool,
    pub n_train: usize,
    pub n_val: usize,
    pub checkpoint: Option<String>,
}

impl TrainReport {
    /// One JSON object per epoch followed by a summary object.
    pub fn to_jsonl(&self) -> String {
        #[derive(Serialize)]
        struct Summary<'a> {
            record: &'static str,
            epochs_run: usize,
            best_epoch: usize,
            best_val_wa: f64,
            best_val_ua: f64,
            stopped_early: bool,
            n_train: usize,
            n_val: usize,
            checkpoint: &'a Option<String>,
        }
        #[derive(Serialize)]
        struct Line<'a> {
            record: &'static str,
            #[serde(flatten)]
            epoch: &'a EpochRecord,
        }
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(&Line { record: "epoch", epoch: r }).unwrap());
            out.push('\n');
        }
        let summary = Summary {
            record: "summary",
            epochs_run: self.records.len(),
            best_epoch: self.best_epoch,
            best_val_wa: self.best_val_wa,
            best_val_ua: self.best_val_ua,
            stopped_early: self.stopped_early,
            n_train: self.n_train,
            n_val: self.n_val,
            checkpoint: &self.checkpoint,
        };
        out.push_str(&serde_json::to_string(&summary).unwrap());
        out.push('\n');
        out
    }
}

/// Result of a training run: best-epoch parameters and centers plus the log.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: Params,
    pub centers: CenterBank,
    pub report: TrainReport,
    pub train_ids: Vec<String>,
    pub val_ids: Vec<String>,
}

/// Seeded split that holds out `round(val_fraction * n_c)` samples of each
/// class, at least one, while keeping at least one for training.
pub fn stratified_split(
    data: &[SpeechSample],
    val_fraction: f64,
    seed: u64,
) -> (Vec<usize>, Vec<usize>) {
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, s) in data.iter().enumerate() {
        by_class.entry(s.label).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_0F_5B11);
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for (_, mut idx) in by_class {
        idx.shuffle(&mut rng);
        let n_val = if idx.len() < 2 {
            0
        } else {
            ((val_fraction * idx.len() as f64).round() as usize).clamp(1, idx.len() - 1)
        };
        val.extend_from_slice(&idx[..n_val]);
        train.extend_from_slice(&idx[n_val..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    (train, val)
}

fn with_context(err: Error, epoch: usize, step: usize) -> Error {
    match err {
        Error::Numeric(msg) => Error::numeric(format!("epoch {epoch} step {step}: {msg}")),
        other => other,
    }
}

/// Train `params` on `data`. The returned parameters are those of the epoch
/// with the best validation WA (ties by UA, then the earlier epoch).
pub fn train(
    model: &ModelConfig,
    params: Params,
    data: &[SpeechSample],
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    model.validate()?;
    config.validate()?;
    if data.is_empty() {
        return Err(Error::validation("training data is empty"));
    }
    let n_classes = model.n_classes;
    let (train_idx, val_idx) = stratified_split(data, config.val_fraction, config.seed);
    for class in 0..n_classes {
        if !train_idx.iter().any(|&i| data[i].label == class) {
            return Err(Error::validation(format!(
                "class {class} has no samples in the training portion"
            )));
        }
    }
    if val_idx.is_empty() {
        return Err(Error::validation("validation split is empty"));
    }
    let val_set: Vec<SpeechSample> = val_idx.iter().map(|&i| data[i].clone()).collect();

    let mut params = params;
    let mut bank = CenterBank::new(n_classes, model.d_proj, config.lr_center);
    let mut adam = Adam::new(&params);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut aug_rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(config.augment.seed));
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_mul(0x9E37_79B9).wrapping_add(1));
    let trainable = |name: &str| !config.head_only || name.starts_with("f1.");

    let mut records = Vec::new();
    let mut best: Option<(f64, f64, usize, Params, CenterBank)> = None;
    let mut stopped_early = false;

    for epoch in 0..config.max_epochs {
        let lr_model = lr_at_epoch(
            config.lr_model,
            epoch,
            config.lr_decay_factor,
            config.lr_decay_until_epoch,
        );
        bank.center_lr = lr_at_epoch(
            config.lr_center,
            epoch,
            config.lr_decay_factor,
            config.lr_decay_until_epoch,
        );

        let mut order = train_idx.clone();
        order.shuffle(&mut rng);
        let (mut sum_loss, mut sum_rec, mut sum_center, mut seen) = (0.0, 0.0, 0.0, 0usize);

        for (step, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<SpeechSample> = chunk
                .iter()
                .map(|&i| config.augment.apply(&data[i], &mut aug_rng))
                .collect();
            let mix_seed: u64 = rng.random();
            let policy = if batch.len() < 2 && config.mixup.mode != MixupMode::Off {
                MixupPolicy::off()
            } else {
                config.mixup.clone()
            };
            let mixed = mix_batch(&batch, &policy, n_classes, mix_seed)?;

            let mut caches = Vec::with_capacity(mixed.len());
            for m in &mixed {
                let cache = forward_cached(model, &params, m.signal.view(), true, &mut dropout_rng)
                    .map_err(|e| with_context(e, epoch, step))?;
                caches.push(cache);
            }
            let targets: Vec<SoftLabel> = mixed.iter().map(|m| m.label.clone()).collect();
            let logits: Vec<Array1<f64>> =
                caches.iter().map(|c| c.output.prediction.logits.clone()).collect();
            let features: Vec<Array1<f64>> =
                caches.iter().map(|c| c.output.pooled.vec.clone()).collect();
            let joint = joint_loss(&targets, &logits, &features, &bank, &config.loss)
                .map_err(|e| with_context(e, epoch, step))?;

            let mut grads = params.zeros_like();
            for ((cache, dl), df) in caches.iter().zip(&joint.d_logits).zip(&joint.d_features) {
                backward(model, &params, cache, dl, df.as_slice().unwrap(), &mut grads);
            }
            adam.step(&mut params, &grads, lr_model, trainable);
            if !params.is_finite() {
                return Err(Error::numeric(format!(
                    "epoch {epoch} step {step}: parameters diverged"
                )));
            }
            bank = update_centers(&features, &targets, &bank)?;

            let n = mixed.len() as f64;
            sum_loss += joint.loss * n;
            sum_rec += joint.recognition * n;
            sum_center += joint.center * n;
            seen += mixed.len();
        }

        let cm = evaluate(model, &params, &val_set)?;
        let val_wa = weighted_accuracy(&cm)?;
        let val_ua = unweighted_accuracy(&cm)?;
        let denom = seen.max(1) as f64;
        let record = EpochRecord {
            epoch,
            lr_model,
            train_loss: sum_loss / denom,
            train_recognition_loss: sum_rec / denom,
            train_center_loss: sum_center / denom,
            val_wa,
            val_ua,
        };
        log::info!(
            "epoch {epoch}: loss {:.5} val WA {val_wa:.4} UA {val_ua:.4}",
            record.train_loss
        );
        records.push(record);

        let improved = match &best {
            None => true,
            Some((wa, ua, ..)) => val_wa > *wa || (val_wa == *wa && val_ua > *ua),
        };
        if improved {
            best = Some((val_wa, val_ua, epoch, params.clone(), bank.clone()));
        }
        let best_epoch = best.as_ref().map_or(0, |b| b.2);
        if epoch - best_epoch >= config.early_stop_patience {
            stopped_early = true;
            break;
        }
    }

    let (best_val_wa, best_val_ua, best_epoch, best_params, best_bank) = match best {
        Some(b) => b,
        None => (0.0, 0.0, 0, params, bank),
    };
    Ok(TrainOutcome {
        params: best_params,
        centers: best_bank,
        report: TrainReport {
            records,
            best_epoch,
            best_val_wa,
            best_val_ua,
            stopped_early,
            n_train: train_idx.len(),
            n_val: val_idx.len(),
            checkpoint: None,
        },
        train_ids: train_idx.iter().map(|&i| data[i].id.clone()).collect(),
        val_ids: val_idx.iter().map(|&i| data[i].id.clone()).collect(),
    })
}

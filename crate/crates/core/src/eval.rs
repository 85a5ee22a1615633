//! WA/UA metrics, confusion matrices and Leave-One-Session-Out evaluation.

use std::collections::{BTreeMap, BTreeSet};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::SpeechSample;
use crate::error::{Error, Result};
use crate::model::{forward, init_params, ModelConfig, Params};
use crate::train::{train, TrainConfig};

/// Rows are true classes, columns predicted classes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(n_classes: usize) -> Self {
        Self {
            counts: vec![vec![0; n_classes]; n_classes],
        }
    }

    pub fn from_counts(counts: Vec<Vec<u64>>) -> Result<Self> {
        let n = counts.len();
        if counts.iter().any(|row| row.len() != n) {
            return Err(Error::validation("confusion matrix must be square"));
        }
        Ok(Self { counts })
    }

    pub fn record(&mut self, truth: usize, predicted: usize) {
        self.counts[truth][predicted] += 1;
    }

    pub fn n_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn correct(&self) -> u64 {
        (0..self.n_classes()).map(|c| self.counts[c][c]).sum()
    }
}

/// Overall accuracy: `trace / total`.
pub fn weighted_accuracy(cm: &ConfusionMatrix) -> Result<f64> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::validation("confusion matrix is empty"));
    }
    Ok(cm.correct() as f64 / total as f64)
}

/// Mean per-class recall over classes that have at least one sample.
pub fn unweighted_accuracy(cm: &ConfusionMatrix) -> Result<f64> {
    let mut recalls = Vec::new();
    for (c, row) in cm.counts.iter().enumerate() {
        let n: u64 = row.iter().sum();
        if n == 0 {
            log::warn!("class {c} absent from evaluation set; excluded from UA");
            continue;
        }
        recalls.push(row[c] as f64 / n as f64);
    }
    if recalls.is_empty() {
        return Err(Error::validation("confusion matrix has no populated rows"));
    }
    Ok(recalls.iter().sum::<f64>() / recalls.len() as f64)
}

/// Predict every sample in eval mode and tally the confusion matrix.
pub fn evaluate(model: &ModelConfig, params: &Params, samples: &[SpeechSample]) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::new(model.n_classes);
    // Eval mode never draws from the generator.
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for s in samples {
        let out = forward(model, params, s.signal(), false, &mut rng)?;
        cm.record(s.label, out.prediction.probs.argmax());
    }
    Ok(cm)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub fold_id: usize,
    pub train_sessions: BTreeSet<String>,
    pub test_session: String,
    pub train_indices: Vec<usize>,
    pub test_indices: Vec<usize>,
}

/// One fold per session, in sorted session order.
pub fn make_loso_folds(data: &[SpeechSample]) -> Result<Vec<FoldPlan>> {
    let mut speaker_session: BTreeMap<&str, &str> = BTreeMap::new();
    for s in data {
        match speaker_session.insert(&s.speaker_id, &s.session_id) {
            Some(prev) if prev != s.session_id => {
                return Err(Error::validation(format!(
                    "speaker '{}' appears in sessions '{prev}' and '{}'",
                    s.speaker_id, s.session_id
                )));
            }
            _ => {}
        }
    }
    let sessions: BTreeSet<&str> = data.iter().map(|s| s.session_id.as_str()).collect();
    if sessions.len() < 2 {
        return Err(Error::validation(format!(
            "leave-one-session-out needs at least 2 sessions, found {}",
            sessions.len()
        )));
    }
    let plans = sessions
        .iter()
        .enumerate()
        .map(|(fold_id, &test)| {
            let (test_indices, train_indices): (Vec<usize>, Vec<usize>) =
                (0..data.len()).partition(|&i| data[i].session_id == test);
            FoldPlan {
                fold_id,
                train_sessions: sessions
                    .iter()
                    .filter(|&&s| s != test)
                    .map(|s| s.to_string())
                    .collect(),
                test_session: test.to_string(),
                train_indices,
                test_indices,
            }
        })
        .collect();
    Ok(plans)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold_id: usize,
    pub test_session: String,
    pub wa: f64,
    pub ua: f64,
    pub n_test: usize,
    pub best_epoch: usize,
    pub confusion: ConfusionMatrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LosoReport {
    pub plans: Vec<FoldPlan>,
    pub folds: Vec<FoldResult>,
    pub mean_wa: f64,
    pub mean_ua: f64,
}

impl LosoReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("fold,WA,UA\n");
        for f in &self.folds {
            out.push_str(&format!("{},{},{}\n", f.fold_id, f.wa, f.ua));
        }
        out.push_str(&format!("mean,{},{}\n", self.mean_wa, self.mean_ua));
        out
    }
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Train a fresh model per fold (seed = base seed + fold id) and evaluate it
/// on the held-out session.
pub fn run_loso(
    data: &[SpeechSample],
    model: &ModelConfig,
    config: &TrainConfig,
) -> Result<LosoReport> {
    let plans = make_loso_folds(data)?;
    let mut folds = Vec::with_capacity(plans.len());
    for plan in &plans {
        let seed = config.seed.wrapping_add(plan.fold_id as u64);
        let fold_config = TrainConfig {
            seed,
            ..config.clone()
        };
        let train_set: Vec<SpeechSample> =
            plan.train_indices.iter().map(|&i| data[i].clone()).collect();
        let test_set: Vec<SpeechSample> =
            plan.test_indices.iter().map(|&i| data[i].clone()).collect();
        let outcome = train(model, init_params(model, seed), &train_set, &fold_config)?;
        let cm = evaluate(model, &outcome.params, &test_set)?;
        let result = FoldResult {
            fold_id: plan.fold_id,
            test_session: plan.test_session.clone(),
            wa: weighted_accuracy(&cm)?,
            ua: unweighted_accuracy(&cm)?,
            n_test: test_set.len(),
            best_epoch: outcome.report.best_epoch,
            confusion: cm,
        };
        log::info!(
            "fold {} (test {}): WA {:.4} UA {:.4}",
            result.fold_id,
            result.test_session,
            result.wa,
            result.ua
        );
        folds.push(result);
    }
    let was: Vec<f64> = folds.iter().map(|f| f.wa).collect();
    let uas: Vec<f64> = folds.iter().map(|f| f.ua).collect();
    Ok(LosoReport {
        plans,
        mean_wa: mean(&was),
        mean_ua: mean(&uas),
        folds,
    })
}

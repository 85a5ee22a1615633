//! Analytic-versus-numeric gradient verification.
//!
//! Every analytic gradient in the crate is compared against central finite
//! differences of the corresponding loss value, over seeded random inputs.

use ndarray::Array1;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{SoftLabel, SpeechSample};
use crate::error::Result;
use crate::losses::{center_loss, joint_loss, recognition_loss, CenterBank, LossConfig};
use crate::mixup::{mix_batch, MixedSample, MixupMode, MixupPolicy};
use crate::model::{backward, forward, forward_cached, init_params, softmax, Frontend, ModelConfig, Params, Reduction};

/// Denominator floor of the relative error, so that gradients at the level
/// of finite-difference noise are compared absolutely.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradcheckConfig {
    pub seed: u64,
    pub trials: usize,
    pub step: f64,
    pub tolerance: f64,
    /// Fault injection: perturb every analytic gradient before comparing.
    pub corrupt: bool,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            trials: 100,
            step: 1e-5,
            tolerance: 1e-4,
            corrupt: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentResult {
    pub name: String,
    pub trials: usize,
    pub coordinates: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub step: f64,
    pub tolerance: f64,
    pub components: Vec<ComponentResult>,
    pub passed: bool,
}

impl GradcheckReport {
    pub fn to_text(&self) -> String {
        let mut out = format!("gradcheck step={:e} tolerance={:e}\n", self.step, self.tolerance);
        for c in &self.components {
            out.push_str(&format!(
                "{:<18} {} trials={} coords={} max_rel_error={:.3e}\n",
                c.name,
                if c.passed { "PASS" } else { "FAIL" },
                c.trials,
                c.coordinates,
                c.max_rel_error
            ));
        }
        out.push_str(if self.passed { "overall PASS\n" } else { "overall FAIL\n" });
        out
    }
}

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR);
    (analytic - numeric).abs() / scale
}

/// Central differences of `f` at `x`, one coordinate at a time.
pub fn numeric_gradient(x: &[f64], step: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + step;
            let up = f(&probe);
            probe[i] = x[i] - step;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * step)
        })
        .collect()
}

#[derive(Default)]
struct Tracker {
    trials: usize,
    coordinates: usize,
    max_rel_error: f64,
}

impl Tracker {
    fn compare(&mut self, analytic: &[f64], numeric: &[f64], corrupt: bool) {
        assert_eq!(analytic.len(), numeric.len());
        self.trials += 1;
        self.coordinates += analytic.len();
        for (i, (a, n)) in analytic.iter().zip(numeric).enumerate() {
            let a = if corrupt && i == 0 { a + 1e-2 * (1.0 + a.abs()) } else { *a };
            let e = rel_error(a, *n);
            if e > self.max_rel_error || e.is_nan() {
                self.max_rel_error = if e.is_nan() { f64::INFINITY } else { e };
            }
        }
    }

    fn finish(self, name: &str, tolerance: f64) -> ComponentResult {
        ComponentResult {
            name: name.to_string(),
            trials: self.trials,
            coordinates: self.coordinates,
            max_rel_error: self.max_rel_error,
            passed: self.max_rel_error < tolerance,
        }
    }
}

fn normal_vec<R: Rng>(rng: &mut R, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
}

/// A random soft label: either a two-source mix or a dense distribution.
fn random_soft_label<R: Rng>(rng: &mut R, n: usize) -> SoftLabel {
    if rng.random_bool(0.5) {
        let (i, j) = (rng.random_range(0..n), rng.random_range(0..n));
        let w: f64 = rng.random_range(0.05..0.95);
        let mut p = vec![0.0; n];
        p[i] += w;
        p[j] += 1.0 - w;
        SoftLabel::new(p).expect("two-point mix is a distribution")
    } else {
        let raw: Vec<f64> = (0..n).map(|_| rng.random_range(0.01..1.0)).collect();
        let s: f64 = raw.iter().sum();
        SoftLabel::new(raw.into_iter().map(|v| v / s).collect()).expect("normalised")
    }
}

fn random_bank<R: Rng>(rng: &mut R, n_classes: usize, dim: usize) -> CenterBank {
    let mut bank = CenterBank::new(n_classes, dim, 1e-3);
    for v in bank.centers.iter_mut() {
        *v = 0.5 * rng.sample::<f64, _>(StandardNormal);
    }
    bank
}

fn check_recognition(cfg: &GradcheckConfig, rng: &mut ChaCha8Rng) -> ComponentResult {
    let mut t = Tracker::default();
    for _ in 0..cfg.trials {
        let n = rng.random_range(2..=6);
        let logits = normal_vec(rng, n, 2.0);
        let target = random_soft_label(rng, n);
        let predicted = SoftLabel::new(softmax(&logits)).expect("softmax");
        let (_, analytic) = recognition_loss(&target, &predicted, 1e-12).expect("valid");
        let numeric = numeric_gradient(&logits, cfg.step, |l| {
            let p = SoftLabel::new(softmax(l)).expect("softmax");
            recognition_loss(&target, &p, 1e-12).expect("valid").0
        });
        t.compare(&analytic, &numeric, cfg.corrupt);
    }
    t.finish("recognition_loss", cfg.tolerance)
}

fn flatten(vs: &[Array1<f64>]) -> Vec<f64> {
    vs.iter().flat_map(|v| v.iter().copied()).collect()
}

fn unflatten(flat: &[f64], n: usize, dim: usize) -> Vec<Array1<f64>> {
    (0..n)
        .map(|i| Array1::from(flat[i * dim..(i + 1) * dim].to_vec()))
        .collect()
}

fn check_center(cfg: &GradcheckConfig, rng: &mut ChaCha8Rng) -> ComponentResult {
    let mut t = Tracker::default();
    for _ in 0..cfg.trials {
        let (n, dim, classes) = (rng.random_range(1..=5), rng.random_range(2..=5), 4);
        let bank = random_bank(rng, classes, dim);
        let features: Vec<Array1<f64>> = (0..n).map(|_| Array1::from(normal_vec(rng, dim, 1.0))).collect();
        let targets: Vec<SoftLabel> = (0..n).map(|_| random_soft_label(rng, classes)).collect();
        let (_, grads) = center_loss(&features, &targets, &bank).expect("valid");
        let numeric = numeric_gradient(&flatten(&features), cfg.step, |x| {
            center_loss(&unflatten(x, n, dim), &targets, &bank).expect("valid").0
        });
        t.compare(&flatten(&grads), &numeric, cfg.corrupt);
    }
    t.finish("center_loss", cfg.tolerance)
}

fn check_joint(cfg: &GradcheckConfig, rng: &mut ChaCha8Rng) -> ComponentResult {
    let mut t = Tracker::default();
    for _ in 0..cfg.trials {
        let (n, dim, classes) = (rng.random_range(1..=4), rng.random_range(2..=4), rng.random_range(2..=5));
        let bank = random_bank(rng, classes, dim);
        let loss_cfg = LossConfig {
            lambda_center: rng.random_range(0.0..1.0),
            ..LossConfig::default()
        };
        let targets: Vec<SoftLabel> = (0..n).map(|_| random_soft_label(rng, classes)).collect();
        let logits: Vec<Array1<f64>> = (0..n).map(|_| Array1::from(normal_vec(rng, classes, 1.5))).collect();
        let features: Vec<Array1<f64>> = (0..n).map(|_| Array1::from(normal_vec(rng, dim, 1.0))).collect();
        let joint = joint_loss(&targets, &logits, &features, &bank, &loss_cfg).expect("valid");
        let mut analytic: Vec<f64> = joint.d_logits.iter().flatten().copied().collect();
        analytic.extend(flatten(&joint.d_features));

        let mut x = flatten(&logits);
        x.extend(flatten(&features));
        let split = n * classes;
        let numeric = numeric_gradient(&x, cfg.step, |x| {
            let l = unflatten(&x[..split], n, classes);
            let f = unflatten(&x[split..], n, dim);
            joint_loss(&targets, &l, &f, &bank, &loss_cfg).expect("valid").loss
        });
        t.compare(&analytic, &numeric, cfg.corrupt);
    }
    t.finish("joint_loss", cfg.tolerance)
}

struct ModelCase {
    config: ModelConfig,
    params: Params,
    batch: Vec<MixedSample>,
    bank: CenterBank,
    loss: LossConfig,
    dropout_seed: u64,
}

fn model_case(trial: usize, rng: &mut ChaCha8Rng) -> ModelCase {
    let config = ModelConfig {
        d_in: 3,
        d_model: if trial % 2 == 0 { 4 } else { 6 },
        n_layers: 1 + trial % 2,
        n_heads: 2,
        d_ff: 6,
        projection_dropout: if trial % 3 == 0 { 0.0 } else { 0.3 },
        reduction: if trial % 4 < 2 {
            Reduction::FirstVector
        } else {
            Reduction::AveragePool
        },
        d_proj: 3,
        n_classes: 4,
        conv_frontend: if trial % 5 == 4 {
            Frontend::Strided { kernel: 2, stride: 1 }
        } else {
            Frontend::None
        },
        max_len: 8,
    };
    let mut params = init_params(&config, rng.random());
    // Non-trivial layer-norm and bias values so every path carries gradient.
    for (name, values) in params.tensors_mut() {
        if name.ends_with(".bias") || name.ends_with(".beta") || name.ends_with(".gamma") {
            for v in values.iter_mut() {
                *v += 0.3 * rng.sample::<f64, _>(StandardNormal);
            }
        }
    }
    let n_samples = rng.random_range(2..=3);
    let samples: Vec<SpeechSample> = (0..n_samples)
        .map(|k| {
            let len = rng.random_range(1..=6);
            let signal = ndarray::Array2::from_shape_simple_fn((len, 3), || rng.sample(StandardNormal));
            SpeechSample::new(format!("g{k}"), signal, rng.random_range(0..4), 4, "s", "t")
                .expect("finite")
        })
        .collect();
    let policy = MixupPolicy {
        mode: if trial % 2 == 0 { MixupMode::LabelAdaptive } else { MixupMode::Off },
        ..MixupPolicy::default()
    };
    let batch = mix_batch(&samples, &policy, 4, rng.random()).expect("valid batch");
    let bank = random_bank(rng, 4, config.d_proj);
    let loss = LossConfig {
        lambda_center: rng.random_range(0.05..1.0),
        ..LossConfig::default()
    };
    ModelCase {
        config,
        params,
        batch,
        bank,
        loss,
        dropout_seed: rng.random(),
    }
}

fn model_loss(case: &ModelCase, params: &Params) -> Result<f64> {
    let mut drng = ChaCha8Rng::seed_from_u64(case.dropout_seed);
    let mut logits = Vec::new();
    let mut features = Vec::new();
    for m in &case.batch {
        let out = forward(&case.config, params, m.signal.view(), true, &mut drng)?;
        logits.push(out.prediction.logits);
        features.push(out.pooled.vec);
    }
    let targets: Vec<SoftLabel> = case.batch.iter().map(|m| m.label.clone()).collect();
    Ok(joint_loss(&targets, &logits, &features, &case.bank, &case.loss)?.loss)
}

fn model_gradient(case: &ModelCase) -> Result<Params> {
    let mut drng = ChaCha8Rng::seed_from_u64(case.dropout_seed);
    let caches = case
        .batch
        .iter()
        .map(|m| forward_cached(&case.config, &case.params, m.signal.view(), true, &mut drng))
        .collect::<Result<Vec<_>>>()?;
    let targets: Vec<SoftLabel> = case.batch.iter().map(|m| m.label.clone()).collect();
    let logits: Vec<Array1<f64>> = caches.iter().map(|c| c.output.prediction.logits.clone()).collect();
    let features: Vec<Array1<f64>> = caches.iter().map(|c| c.output.pooled.vec.clone()).collect();
    let joint = joint_loss(&targets, &logits, &features, &case.bank, &case.loss)?;
    let mut grads = case.params.zeros_like();
    for ((c, dl), df) in caches.iter().zip(&joint.d_logits).zip(&joint.d_features) {
        backward(&case.config, &case.params, c, dl, df.as_slice().unwrap(), &mut grads);
    }
    Ok(grads)
}

fn check_model(cfg: &GradcheckConfig, rng: &mut ChaCha8Rng) -> ComponentResult {
    let mut t = Tracker::default();
    for trial in 0..cfg.trials {
        let case = model_case(trial, rng);
        let analytic = model_gradient(&case).expect("finite forward").to_flat();
        let mut scratch = case.params.clone();
        let numeric = numeric_gradient(&case.params.to_flat(), cfg.step, |x| {
            scratch.set_flat(x);
            model_loss(&case, &scratch).expect("finite forward")
        });
        t.compare(&analytic, &numeric, cfg.corrupt);
    }
    t.finish("model_composition", cfg.tolerance)
}

/// Run every component check, each on its own seeded stream.
pub fn run_gradcheck(cfg: &GradcheckConfig) -> GradcheckReport {
    let stream = |k: u64| ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(31).wrapping_add(k));
    let components = vec![
        check_recognition(cfg, &mut stream(1)),
        check_center(cfg, &mut stream(2)),
        check_joint(cfg, &mut stream(3)),
        check_model(cfg, &mut stream(4)),
    ];
    let passed = components.iter().all(|c| c.passed);
    GradcheckReport {
        step: cfg.step,
        tolerance: cfg.tolerance,
        components,
        passed,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn numeric_gradient_of_quadratic() {
        let g = numeric_gradient(&[1.0, -2.0], 1e-5, |x| x[0] * x[0] + 3.0 * x[1]);
        assert!((g[0] - 2.0).abs() < 1e-8);
        assert!((g[1] - 3.0).abs() < 1e-8);
    }

    #[test]
    fn rel_error_floors_tiny_values() {
        assert_eq!(rel_error(0.0, 0.0), 0.0);
        assert!(rel_error(1e-12, 2e-12) < 1e-5);
        assert!((rel_error(1.0, 1.1) - 0.1 / 1.1).abs() < 1e-12);
    }

    #[test]
    fn small_run_passes_and_corruption_fails() {
        let cfg = GradcheckConfig {
            trials: 6,
            ..GradcheckConfig::default()
        };
        let report = run_gradcheck(&cfg);
        assert!(report.passed, "{}", report.to_text());
        let bad = run_gradcheck(&GradcheckConfig { corrupt: true, ..cfg });
        assert!(!bad.passed);
        assert!(bad.components.iter().all(|c| !c.passed));
    }
}

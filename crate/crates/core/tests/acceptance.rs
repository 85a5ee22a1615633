//! Acceptance suite. Each test prints one `criterion N: PASS|FAIL` line.
//!
//! Run with `cargo test -p emomix --test acceptance -- --nocapture` to see
//! the lines and measured values.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use ndarray::Array1;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use emomix::data::{generate_synthetic, EmotionSet, SoftLabel, SpeechSample, SynthSpec};
use emomix::eval::{evaluate, make_loso_folds, run_loso, unweighted_accuracy, weighted_accuracy};
use emomix::gradcheck::{run_gradcheck, GradcheckConfig};
use emomix::losses::{center_loss, recognition_loss, CenterBank};
use emomix::mixup::{adaptive_weights, mix_labels_adaptive, mix_labels_conventional, MixupMode, MixupPolicy};
use emomix::model::{init_params, ModelConfig};
use emomix::train::{lr_at_epoch, train, TrainConfig};

fn report(n: usize, ok: bool, detail: String) {
    println!("criterion {n}: {} | {detail}", if ok { "PASS" } else { "FAIL" });
}

fn within(elapsed: Duration, secs: u64) -> bool {
    elapsed <= Duration::from_secs(secs)
}

fn random_label<R: Rng>(rng: &mut R, n: usize) -> SoftLabel {
    let raw: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
    let s: f64 = raw.iter().sum();
    SoftLabel::new(raw.iter().map(|v| v / s).collect()).unwrap()
}

// 1. Gradient oracle

#[test]
fn criterion_1_gradient_oracle() {
    let start = Instant::now();
    let cfg = GradcheckConfig::default();
    assert!(cfg.trials >= 100 && cfg.step == 1e-5 && cfg.tolerance == 1e-4);
    let result = run_gradcheck(&cfg);
    let elapsed = start.elapsed();
    let detail = result
        .components
        .iter()
        .map(|c| format!("{} max_rel={:.2e} trials={}", c.name, c.max_rel_error, c.trials))
        .collect::<Vec<_>>()
        .join(", ");
    let ok = result.passed
        && result.components.len() == 4
        && result.components.iter().all(|c| c.trials >= 100 && c.max_rel_error < 1e-4)
        && within(elapsed, 60);
    report(1, ok, format!("{detail}; {:.1}s", elapsed.as_secs_f64()));
    assert!(ok);
}

// 2. Mixup algebra

#[test]
fn criterion_2_mixup_algebra() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let lambdas = [0.0, 0.1, 0.25, 0.5, 0.7, 0.9, 1.0];
    let mut worst_simplex = 0.0f64;
    let mut worst_equal = 0.0f64;
    let mut worst_sym = 0.0f64;

    for l_i in 1..=20usize {
        for l_j in 1..=20usize {
            for &lambda in &lambdas {
                let y_i = random_label(&mut rng, 4);
                let y_j = random_label(&mut rng, 4);
                let ab = mix_labels_adaptive(&y_i, l_i, &y_j, l_j, lambda).unwrap();
                let ba = mix_labels_adaptive(&y_j, l_j, &y_i, l_i, 1.0 - lambda).unwrap();
                worst_simplex = worst_simplex.max((ab.probs().iter().sum::<f64>() - 1.0).abs());
                assert!(ab.probs().iter().all(|&p| p >= 0.0));
                for (a, b) in ab.probs().iter().zip(ba.probs()) {
                    worst_sym = worst_sym.max((a - b).abs());
                }
                let (w_i, w_j) = adaptive_weights(l_i, l_j, lambda).unwrap();
                let (v_j, v_i) = adaptive_weights(l_j, l_i, 1.0 - lambda).unwrap();
                worst_sym = worst_sym.max((w_i - v_i).abs()).max((w_j - v_j).abs());
                if l_i == l_j {
                    let conv = mix_labels_conventional(&y_i, &y_j, lambda).unwrap();
                    for (a, b) in ab.probs().iter().zip(conv.probs()) {
                        worst_equal = worst_equal.max((a - b).abs());
                    }
                }
            }
        }
    }

    // Monotone in each length with the other fixed, for interior mixing ratios.
    let mut monotone = true;
    for &lambda in &[0.1, 0.25, 0.5, 0.7, 0.9] {
        for l_j in 1..=20usize {
            for l_i in 1..20usize {
                let (a, _) = adaptive_weights(l_i, l_j, lambda).unwrap();
                let (b, _) = adaptive_weights(l_i + 1, l_j, lambda).unwrap();
                monotone &= b > a;
            }
        }
        for l_i in 1..=20usize {
            for l_j in 1..20usize {
                let (a, _) = adaptive_weights(l_i, l_j, lambda).unwrap();
                let (b, _) = adaptive_weights(l_i, l_j + 1, lambda).unwrap();
                monotone &= b < a;
            }
        }
    }
    let elapsed = start.elapsed();
    let ok = worst_simplex <= 1e-12
        && worst_equal <= 1e-12
        && worst_sym <= 1e-12
        && monotone
        && within(elapsed, 10);
    report(
        2,
        ok,
        format!(
            "simplex {worst_simplex:.1e}, equal-length {worst_equal:.1e}, symmetry {worst_sym:.1e}, monotone {monotone}; {:.2}s",
            elapsed.as_secs_f64()
        ),
    );
    assert!(ok);
}

// 3. Argmax-gating invariance

#[test]
fn criterion_3_argmax_gating_invariance() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (n_classes, dim) = (4, 3);
    let mut bank = CenterBank::new(n_classes, dim, 1e-3);
    bank.centers.mapv_inplace(|_| rng.random_range(-1.0..1.0));
    let mut identical = 0;
    for _ in 0..1000 {
        let label = random_label(&mut rng, n_classes);
        let top = label.argmax();
        // Shrink every non-argmax entry by a random factor and hand the mass
        // to the argmax, which can only widen its lead.
        let mut p = label.probs().to_vec();
        let mut moved = 0.0;
        for (k, v) in p.iter_mut().enumerate() {
            if k != top {
                let cut = *v * rng.random_range(0.0..1.0);
                *v -= cut;
                moved += cut;
            }
        }
        p[top] += moved;
        let s: f64 = p.iter().sum();
        let perturbed = SoftLabel::new(p.iter().map(|v| v / s).collect()).unwrap();
        assert_eq!(perturbed.argmax(), top);

        let feature = vec![Array1::from((0..dim).map(|_| rng.random_range(-2.0..2.0)).collect::<Vec<f64>>())];
        let (l0, g0) = center_loss(&feature, &[label], &bank).unwrap();
        let (l1, g1) = center_loss(&feature, &[perturbed], &bank).unwrap();
        if l0.to_bits() == l1.to_bits() && g0 == g1 {
            identical += 1;
        }
    }
    let elapsed = start.elapsed();
    let ok = identical == 1000 && within(elapsed, 5);
    report(3, ok, format!("{identical}/1000 bit-identical; {:.2}s", elapsed.as_secs_f64()));
    assert!(ok);
}

// 4. Hand values

#[test]
fn criterion_4_hand_values() {
    let target = SoftLabel::new(vec![1.0, 0.0, 0.0, 0.0]).unwrap();
    let uniform = SoftLabel::new(vec![0.25; 4]).unwrap();
    let (rec, _) = recognition_loss(&target, &uniform, 1e-12).unwrap();

    let mut bank = CenterBank::new(4, 2, 1e-3);
    bank.centers.row_mut(2).assign(&ndarray::array![0.0, 1.0]);
    let class2 = SoftLabel::new(vec![0.0, 0.0, 1.0, 0.0]).unwrap();
    let (center, grad) = center_loss(&[ndarray::array![1.0, 2.0]], &[class2], &bank).unwrap();

    let lr = lr_at_epoch(1e-4, 1, 1.25, 20);
    let (w_i, w_j) = adaptive_weights(300, 100, 0.5).unwrap();

    let checks = [
        (rec - 4f64.ln()).abs() <= 1e-9,
        (center - 2.0).abs() <= 1e-12 && grad[0] == ndarray::array![2.0, 2.0],
        (lr - 8e-5).abs() <= 1e-15,
        (w_i - 0.75).abs() <= 1e-12 && (w_j - 0.25).abs() <= 1e-12,
    ];
    let ok = checks.iter().all(|&c| c);
    report(
        4,
        ok,
        format!("recognition {rec:.12}, center {center}, lr {lr:e}, weights ({w_i}, {w_j})"),
    );
    assert!(ok);
}

// Shared setup for the learning experiments.

/// Hold out one session as the test set so no test speaker is seen in training.
fn session_split(data: &[SpeechSample], test_session: &str) -> (Vec<SpeechSample>, Vec<SpeechSample>) {
    data.iter().cloned().partition(|s| s.session_id != test_session)
}

fn experiment_model() -> ModelConfig {
    ModelConfig::default()
}

fn experiment_train(seed: u64, mode: MixupMode, max_epochs: usize) -> TrainConfig {
    // A from-scratch encoder needs a larger step than the fine-tuning default.
    TrainConfig {
        lr_model: 3e-3,
        lr_center: 1e-3,
        max_epochs,
        seed,
        mixup: MixupPolicy {
            mode,
            ..MixupPolicy::default()
        },
        ..TrainConfig::default()
    }
}

fn train_and_test(
    data: &[SpeechSample],
    model: &ModelConfig,
    config: &TrainConfig,
) -> (f64, f64, usize) {
    let (train_set, test_set) = session_split(data, "ses04");
    let outcome = train(model, init_params(model, config.seed), &train_set, config).unwrap();
    let cm = evaluate(model, &outcome.params, &test_set).unwrap();
    (
        weighted_accuracy(&cm).unwrap(),
        unweighted_accuracy(&cm).unwrap(),
        outcome.report.records.len(),
    )
}

// 5. End-to-end learnability

#[test]
fn criterion_5_end_to_end_learnability() {
    let start = Instant::now();
    let spec = SynthSpec {
        n_per_class: 100,
        class_separation: 1.0,
        noise_scale: 0.25,
        n_speakers: 10,
        n_sessions: 5,
        ..SynthSpec::default()
    };
    assert!(spec.class_separation / spec.noise_scale >= 4.0);
    let data = generate_synthetic(&spec, &EmotionSet::default()).unwrap();
    let model = experiment_model();
    let config = experiment_train(0, MixupMode::LabelAdaptive, 30);
    let (wa, ua, epochs) = train_and_test(&data, &model, &config);
    let elapsed = start.elapsed();
    let ok = wa >= 0.95 && ua >= 0.95 && epochs <= 30 && within(elapsed, 300);
    report(
        5,
        ok,
        format!("test WA {wa:.4} UA {ua:.4} after {epochs} epochs; {:.1}s", elapsed.as_secs_f64()),
    );
    assert!(ok);
}

// 6. LOSO protocol integrity

#[test]
fn criterion_6_loso_integrity() {
    let spec = SynthSpec {
        n_per_class: 20,
        length_range: (4, 10),
        ..SynthSpec::default()
    };
    let data = generate_synthetic(&spec, &EmotionSet::default()).unwrap();
    let model = ModelConfig {
        d_model: 8,
        n_layers: 1,
        n_heads: 2,
        d_ff: 16,
        d_proj: 4,
        ..ModelConfig::default()
    };
    let config = TrainConfig {
        max_epochs: 1,
        ..TrainConfig::default()
    };
    let loso = run_loso(&data, &model, &config).unwrap();
    let plans = make_loso_folds(&data).unwrap();
    assert_eq!(plans, loso.plans);

    let mut partition_ok = loso.plans.len() == 5 && loso.folds.len() == 5;
    let mut covered = vec![0usize; data.len()];
    let mut overlap = 0usize;
    for plan in &loso.plans {
        for &i in &plan.test_indices {
            covered[i] += 1;
            partition_ok &= data[i].session_id == plan.test_session;
        }
        let train_speakers: BTreeSet<&str> =
            plan.train_indices.iter().map(|&i| data[i].speaker_id.as_str()).collect();
        let test_speakers: BTreeSet<&str> =
            plan.test_indices.iter().map(|&i| data[i].speaker_id.as_str()).collect();
        overlap += train_speakers.intersection(&test_speakers).count();
        partition_ok &= plan.train_indices.len() + plan.test_indices.len() == data.len();
        partition_ok &= plan.train_indices.iter().all(|&i| data[i].session_id != plan.test_session);
    }
    partition_ok &= covered.iter().all(|&c| c == 1);
    let means_ok = (loso.mean_wa - loso.folds.iter().map(|f| f.wa).sum::<f64>() / 5.0).abs() < 1e-12;
    let ok = partition_ok && overlap == 0 && means_ok;
    report(
        6,
        ok,
        format!(
            "{} folds, partition {partition_ok}, speaker overlaps {overlap}",
            loso.folds.len()
        ),
    );
    assert!(ok);
}

// 7. Directional ablation

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

#[test]
fn criterion_7_directional_ablation() {
    let start = Instant::now();
    let model = experiment_model();
    let (mut adaptive, mut off) = (Vec::new(), Vec::new());
    for seed in 0..5u64 {
        let spec = SynthSpec {
            class_separation: 1.0,
            noise_scale: 1.0 / 1.5,
            // Widely varying lengths, so mixed pairs are usually unequal.
            length_range: (2, 30),
            seed: 100 + seed,
            ..SynthSpec::default()
        };
        let data = generate_synthetic(&spec, &EmotionSet::default()).unwrap();
        adaptive.push(train_and_test(&data, &model, &experiment_train(seed, MixupMode::LabelAdaptive, 30)).1);
        off.push(train_and_test(&data, &model, &experiment_train(seed, MixupMode::Off, 30)).1);
    }
    let elapsed = start.elapsed();
    let (m_adaptive, m_off) = (median(adaptive.clone()), median(off.clone()));
    // UA is a ratio of small integers, so real differences are far above 1e-12;
    // the slack only absorbs summation-order rounding between equal values.
    let ok = m_adaptive >= m_off - 1e-12 && within(elapsed, 900);
    report(
        7,
        ok,
        format!(
            "median UA label_adaptive {m_adaptive:.17} vs off {m_off:.17} (per seed {adaptive:.4?} vs {off:.4?}); {:.1}s",
            elapsed.as_secs_f64()
        ),
    );
    assert!(ok);
}

// 8. Determinism of every command

fn emomix(args: &[&str]) {
    let out = Command::new(env!("CARGO_BIN_EXE_emomix"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap();
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

const TINY_CONFIG: &str = r#"
output_dir = "out"

[synth]
n_per_class = 8
length_range = [3, 7]
seed = 4

[model]
d_model = 8
n_layers = 1
n_heads = 2
d_ff = 16
d_proj = 4

[train]
max_epochs = 2
batch_size = 8
lr_model = 0.003

[gradcheck]
trials = 3
"#;

fn snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(dir).unwrap().display().to_string();
                files.push((rel, fs::read(&path).unwrap()));
            }
        }
    }
    files.sort();
    files
}

fn run_all_commands(root: &Path) -> Vec<(String, Vec<u8>)> {
    let config = root.join("run.toml");
    fs::write(&config, TINY_CONFIG).unwrap();
    let c = config.to_str().unwrap();
    for cmd in ["synth", "train", "eval", "loso", "gradcheck"] {
        emomix(&[cmd, "--config", c]);
    }
    snapshot(&root.join("out"))
}

#[test]
fn criterion_8_determinism() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let first = run_all_commands(a.path());
    let second = run_all_commands(b.path());
    let names: Vec<&str> = first.iter().map(|(n, _)| n.as_str()).collect();
    let expected = [
        "checkpoint.bin",
        "eval.json",
        "gradcheck.json",
        "gradcheck.txt",
        "loso.csv",
        "loso_summary.json",
        "manifest.csv",
        "model.json",
        "report.jsonl",
    ];
    let present = expected.iter().all(|e| names.contains(e));
    let differing: Vec<&str> = first
        .iter()
        .zip(&second)
        .filter(|(x, y)| x != y)
        .map(|(x, _)| x.0.as_str())
        .collect();
    let ok = present && first.len() == second.len() && differing.is_empty();
    report(
        8,
        ok,
        format!("{} files compared across two runs, differing: {differing:?}", first.len()),
    );
    assert!(ok);
}

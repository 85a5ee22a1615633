use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::ModelConfig;

/// `y = x · weight + bias`, with `weight` stored `fan_in × fan_out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Linear {
    fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: Array2::zeros((fan_in, fan_out)),
            bias: Array1::zeros(fan_out),
        }
    }

    fn glorot<R: Rng>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        Self {
            weight: glorot_matrix(fan_in, fan_out, rng),
            bias: Array1::zeros(fan_out),
        }
    }

    fn count(fan_in: usize, fan_out: usize) -> usize {
        fan_in * fan_out + fan_out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
}

impl LayerNorm {
    fn identity(dim: usize) -> Self {
        Self {
            gamma: Array1::ones(dim),
            beta: Array1::zeros(dim),
        }
    }

    fn zeros(dim: usize) -> Self {
        Self {
            gamma: Array1::zeros(dim),
            beta: Array1::zeros(dim),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderBlock {
    pub ln_attn: LayerNorm,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub ln_ff: LayerNorm,
    pub ff_in: Linear,
    pub ff_out: Linear,
}

/// Every learnable tensor of the model. Gradients use the same layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub frontend: Linear,
    pub positions: Array2<f64>,
    pub blocks: Vec<EncoderBlock>,
    pub f0: Linear,
    pub f1: Linear,
}

fn glorot_matrix<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Array2<f64> {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-bound..=bound))
}

/// Glorot-uniform weights, zero biases, unit layer-norm gains.
pub fn init_params(config: &ModelConfig, seed: u64) -> Params {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = config.d_model;
    let frontend = Linear::glorot(config.frontend_in(), d, &mut rng);
    let positions = glorot_matrix(config.max_len, d, &mut rng);
    let blocks = (0..config.n_layers)
        .map(|_| EncoderBlock {
            ln_attn: LayerNorm::identity(d),
            query: Linear::glorot(d, d, &mut rng),
            key: Linear::glorot(d, d, &mut rng),
            value: Linear::glorot(d, d, &mut rng),
            out: Linear::glorot(d, d, &mut rng),
            ln_ff: LayerNorm::identity(d),
            ff_in: Linear::glorot(d, config.d_ff, &mut rng),
            ff_out: Linear::glorot(config.d_ff, d, &mut rng),
        })
        .collect();
    let f0 = Linear::glorot(d, config.d_proj, &mut rng);
    let f1 = Linear::glorot(config.d_proj, config.n_classes, &mut rng);
    Params {
        frontend,
        positions,
        blocks,
        f0,
        f1,
    }
}

/// Closed-form parameter count.
pub fn count_params(config: &ModelConfig) -> usize {
    let d = config.d_model;
    let per_block = 2 * d + 4 * Linear::count(d, d) + 2 * d
        + Linear::count(d, config.d_ff)
        + Linear::count(config.d_ff, d);
    Linear::count(config.frontend_in(), d)
        + config.max_len * d
        + config.n_layers * per_block
        + Linear::count(d, config.d_proj)
        + Linear::count(config.d_proj, config.n_classes)
}

impl Params {
    pub fn zeros(config: &ModelConfig) -> Self {
        let d = config.d_model;
        Params {
            frontend: Linear::zeros(config.frontend_in(), d),
            positions: Array2::zeros((config.max_len, d)),
            blocks: (0..config.n_layers)
                .map(|_| EncoderBlock {
                    ln_attn: LayerNorm::zeros(d),
                    query: Linear::zeros(d, d),
                    key: Linear::zeros(d, d),
                    value: Linear::zeros(d, d),
                    out: Linear::zeros(d, d),
                    ln_ff: LayerNorm::zeros(d),
                    ff_in: Linear::zeros(d, config.d_ff),
                    ff_out: Linear::zeros(config.d_ff, d),
                })
                .collect(),
            f0: Linear::zeros(d, config.d_proj),
            f1: Linear::zeros(config.d_proj, config.n_classes),
        }
    }

    pub fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        out.fill(0.0);
        out
    }

    pub fn fill(&mut self, value: f64) {
        for (_, t) in self.tensors_mut() {
            t.fill(value);
        }
    }

    /// `(name, shape, values)` in a fixed canonical order.
    pub fn tensors(&self) -> Vec<(String, Vec<usize>, &[f64])> {
        let mut out = Vec::new();
        fn lin<'a>(out: &mut Vec<(String, Vec<usize>, &'a [f64])>, name: &str, l: &'a Linear) {
            out.push((format!("{name}.weight"), l.weight.shape().to_vec(), slice(&l.weight)));
            out.push((format!("{name}.bias"), l.bias.shape().to_vec(), slice1(&l.bias)));
        }
        fn ln<'a>(out: &mut Vec<(String, Vec<usize>, &'a [f64])>, name: &str, l: &'a LayerNorm) {
            out.push((format!("{name}.gamma"), l.gamma.shape().to_vec(), slice1(&l.gamma)));
            out.push((format!("{name}.beta"), l.beta.shape().to_vec(), slice1(&l.beta)));
        }
        lin(&mut out, "frontend", &self.frontend);
        out.push((
            "positions".into(),
            self.positions.shape().to_vec(),
            slice(&self.positions),
        ));
        for (i, b) in self.blocks.iter().enumerate() {
            ln(&mut out, &format!("blocks.{i}.ln_attn"), &b.ln_attn);
            lin(&mut out, &format!("blocks.{i}.query"), &b.query);
            lin(&mut out, &format!("blocks.{i}.key"), &b.key);
            lin(&mut out, &format!("blocks.{i}.value"), &b.value);
            lin(&mut out, &format!("blocks.{i}.out"), &b.out);
            ln(&mut out, &format!("blocks.{i}.ln_ff"), &b.ln_ff);
            lin(&mut out, &format!("blocks.{i}.ff_in"), &b.ff_in);
            lin(&mut out, &format!("blocks.{i}.ff_out"), &b.ff_out);
        }
        lin(&mut out, "f0", &self.f0);
        lin(&mut out, "f1", &self.f1);
        out
    }

    /// Mutable views in the same order as [`Params::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out = Vec::new();
        fn lin<'a>(out: &mut Vec<(String, &'a mut [f64])>, name: &str, l: &'a mut Linear) {
            out.push((format!("{name}.weight"), slice_mut(&mut l.weight)));
            out.push((format!("{name}.bias"), slice1_mut(&mut l.bias)));
        }
        fn ln<'a>(out: &mut Vec<(String, &'a mut [f64])>, name: &str, l: &'a mut LayerNorm) {
            out.push((format!("{name}.gamma"), slice1_mut(&mut l.gamma)));
            out.push((format!("{name}.beta"), slice1_mut(&mut l.beta)));
        }
        lin(&mut out, "frontend", &mut self.frontend);
        out.push(("positions".into(), slice_mut(&mut self.positions)));
        for (i, b) in self.blocks.iter_mut().enumerate() {
            ln(&mut out, &format!("blocks.{i}.ln_attn"), &mut b.ln_attn);
            lin(&mut out, &format!("blocks.{i}.query"), &mut b.query);
            lin(&mut out, &format!("blocks.{i}.key"), &mut b.key);
            lin(&mut out, &format!("blocks.{i}.value"), &mut b.value);
            lin(&mut out, &format!("blocks.{i}.out"), &mut b.out);
            ln(&mut out, &format!("blocks.{i}.ln_ff"), &mut b.ln_ff);
            lin(&mut out, &format!("blocks.{i}.ff_in"), &mut b.ff_in);
            lin(&mut out, &format!("blocks.{i}.ff_out"), &mut b.ff_out);
        }
        lin(&mut out, "f0", &mut self.f0);
        lin(&mut out, "f1", &mut self.f1);
        out
    }

    /// All values concatenated in canonical order.
    pub fn to_flat(&self) -> Vec<f64> {
        self.tensors()
            .into_iter()
            .flat_map(|(_, _, v)| v.iter().copied())
            .collect()
    }

    /// Inverse of [`Params::to_flat`]; `values` must hold [`Params::num_values`] entries.
    pub fn set_flat(&mut self, values: &[f64]) {
        let mut offset = 0;
        for (_, dst) in self.tensors_mut() {
            dst.copy_from_slice(&values[offset..offset + dst.len()]);
            offset += dst.len();
        }
        assert_eq!(offset, values.len(), "flat parameter length mismatch");
    }

    pub fn num_values(&self) -> usize {
        self.tensors().iter().map(|(_, _, v)| v.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|(_, _, v)| v.iter().all(|x| x.is_finite()))
    }

    /// `self += scale * other`, tensor by tensor.
    pub fn add_scaled(&mut self, scale: f64, other: &Params) {
        for ((_, dst), (_, _, src)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += scale * s;
            }
        }
    }
}

fn slice(a: &Array2<f64>) -> &[f64] {
    a.as_slice().expect("parameters are kept in standard layout")
}

fn slice1(a: &Array1<f64>) -> &[f64] {
    a.as_slice().expect("parameters are kept in standard layout")
}

fn slice_mut(a: &mut Array2<f64>) -> &mut [f64] {
    a.as_slice_mut().expect("parameters are kept in standard layout")
}

fn slice1_mut(a: &mut Array1<f64>) -> &mut [f64] {
    a.as_slice_mut().expect("parameters are kept in standard layout")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Frontend;

    #[test]
    fn init_is_deterministic() {
        let cfg = ModelConfig::default();
        assert_eq!(init_params(&cfg, 3), init_params(&cfg, 3));
        assert_ne!(init_params(&cfg, 3), init_params(&cfg, 4));
    }

    #[test]
    fn biases_zero_and_weights_bounded() {
        let cfg = ModelConfig::default();
        let p = init_params(&cfg, 1);
        for (name, shape, values) in p.tensors() {
            if name.ends_with(".bias") || name.ends_with(".beta") {
                assert!(values.iter().all(|v| *v == 0.0), "{name}");
            } else if name.ends_with(".gamma") {
                assert!(values.iter().all(|v| *v == 1.0), "{name}");
            } else {
                let bound = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
                assert!(values.iter().all(|v| v.abs() <= bound), "{name}");
            }
        }
    }

    #[test]
    fn count_matches_allocation() {
        for n_layers in [0, 1, 3] {
            for frontend in [Frontend::None, Frontend::Strided { kernel: 3, stride: 2 }] {
                let cfg = ModelConfig {
                    n_layers,
                    conv_frontend: frontend,
                    ..ModelConfig::default()
                };
                assert_eq!(count_params(&cfg), init_params(&cfg, 0).num_values());
                assert_eq!(count_params(&cfg), Params::zeros(&cfg).num_values());
            }
        }
    }

    #[test]
    fn count_base_case_and_layer_additivity() {
        let base = ModelConfig {
            n_layers: 0,
            ..ModelConfig::default()
        };
        let d = base.d_model;
        let head_and_frontend = (base.d_in * d + d)
            + base.max_len * d
            + (d * base.d_proj + base.d_proj)
            + (base.d_proj * base.n_classes + base.n_classes);
        assert_eq!(count_params(&base), head_and_frontend);

        let one = count_params(&ModelConfig { n_layers: 1, ..base.clone() });
        let two = count_params(&ModelConfig { n_layers: 2, ..base.clone() });
        let four = count_params(&ModelConfig { n_layers: 4, ..base.clone() });
        let per_layer = one - head_and_frontend;
        assert_eq!(two, head_and_frontend + 2 * per_layer);
        assert_eq!(four - head_and_frontend, 2 * (two - head_and_frontend));
    }

    #[test]
    fn count_feed_forward_difference() {
        let a = ModelConfig {
            n_layers: 3,
            d_ff: 64,
            ..ModelConfig::default()
        };
        let b = ModelConfig { d_ff: 40, ..a.clone() };
        let d = a.d_model;
        // Hand count of one feed-forward block: two weight matrices plus both biases.
        let ff = |d_ff: usize| 2 * d * d_ff + d_ff + d;
        assert_eq!(
            count_params(&a) - count_params(&b),
            a.n_layers * (ff(a.d_ff) - ff(b.d_ff))
        );
    }

    #[test]
    fn tensor_views_agree() {
        let cfg = ModelConfig {
            n_layers: 1,
            ..ModelConfig::default()
        };
        let mut p = init_params(&cfg, 0);
        let names: Vec<String> = p.tensors().into_iter().map(|(n, _, _)| n).collect();
        let names_mut: Vec<String> = p.tensors_mut().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names, names_mut);
        assert!(names.contains(&"blocks.0.ff_out.weight".to_string()));
    }
}

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::Rng;

use super::layers::{
    gelu, gelu_grad, layer_norm, layer_norm_backward, linear, linear_backward, softmax,
    softmax_rows, LayerNormCache,
};
use super::params::{EncoderBlock, Params};
use super::{Frontend, ModelConfig, Reduction};
use crate::data::SoftLabel;
use crate::error::{Error, Result};

/// Encoder output `F_e`: one `d_model` row per encoder position.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    pub frames: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PooledFeature {
    /// `f0(pre_proj)`, the embedding used by the center loss.
    pub vec: Array1<f64>,
    /// First frame or average of the encoder output.
    pub pre_proj: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub logits: Array1<f64>,
    pub probs: SoftLabel,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    pub features: FeatureSequence,
    pub pooled: PooledFeature,
    pub prediction: Prediction,
}

#[derive(Debug, Clone)]
struct BlockCache {
    ln_attn: LayerNormCache,
    normed_attn: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    attn_probs: Vec<Array2<f64>>,
    heads: Array2<f64>,
    dropout_mask: Option<Array2<f64>>,
    ln_ff: LayerNormCache,
    normed_ff: Array2<f64>,
    ff_pre: Array2<f64>,
    ff_act: Array2<f64>,
}

/// Intermediate activations retained for [`backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    windows: Array2<f64>,
    blocks: Vec<BlockCache>,
    pub output: ForwardOutput,
}

fn frontend_windows(frontend: &Frontend, signal: ArrayView2<'_, f64>) -> Array2<f64> {
    match *frontend {
        Frontend::None => signal.to_owned(),
        Frontend::Strided { kernel, stride } => {
            let (length, d_in) = signal.dim();
            let t_out = frontend.output_len(length);
            let mut windows = Array2::zeros((t_out, kernel * d_in));
            for t in 0..t_out {
                for j in 0..kernel {
                    let src = t * stride + j;
                    if src < length {
                        windows
                            .slice_mut(s![t, j * d_in..(j + 1) * d_in])
                            .assign(&signal.row(src));
                    }
                }
            }
            windows
        }
    }
}

fn check_finite(values: &Array2<f64>, layer: &str) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::numeric(format!("non-finite activation in {layer}")))
    }
}

fn block_forward<R: Rng + ?Sized>(
    config: &ModelConfig,
    block: &EncoderBlock,
    input: Array2<f64>,
    dropout: Option<(f64, &mut R)>,
) -> (Array2<f64>, BlockCache) {
    let (t_len, d) = input.dim();
    let dh = config.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();

    let (normed_attn, ln_attn) = layer_norm(input.view(), &block.ln_attn);
    let q = linear(normed_attn.view(), &block.query);
    let k = linear(normed_attn.view(), &block.key);
    let v = linear(normed_attn.view(), &block.value);

    let mut heads = Array2::zeros((t_len, d));
    let mut attn_probs = Vec::with_capacity(config.n_heads);
    for h in 0..config.n_heads {
        let cols = s![.., h * dh..(h + 1) * dh];
        let mut scores = q.slice(cols).dot(&k.slice(cols).t()) * scale;
        softmax_rows(&mut scores);
        heads.slice_mut(cols).assign(&scores.dot(&v.slice(cols)));
        attn_probs.push(scores);
    }
    let mut attn_out = linear(heads.view(), &block.out);

    let dropout_mask = match dropout {
        Some((p, rng)) if p > 0.0 => {
            let keep = 1.0 / (1.0 - p);
            let mask = Array2::from_shape_simple_fn((t_len, d), || {
                if rng.random::<f64>() < p {
                    0.0
                } else {
                    keep
                }
            });
            attn_out *= &mask;
            Some(mask)
        }
        _ => None,
    };

    let mid = &input + &attn_out;
    let (normed_ff, ln_ff) = layer_norm(mid.view(), &block.ln_ff);
    let ff_pre = linear(normed_ff.view(), &block.ff_in);
    let ff_act = ff_pre.mapv(gelu);
    let output = &mid + &linear(ff_act.view(), &block.ff_out);

    let cache = BlockCache {
        ln_attn,
        normed_attn,
        q,
        k,
        v,
        attn_probs,
        heads,
        dropout_mask,
        ln_ff,
        normed_ff,
        ff_pre,
        ff_act,
    };
    (output, cache)
}

fn block_backward(
    config: &ModelConfig,
    block: &EncoderBlock,
    cache: &BlockCache,
    d_output: Array2<f64>,
    grad: &mut EncoderBlock,
) -> Array2<f64> {
    let dh = config.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();

    // Feed-forward branch.
    let d_act = linear_backward(cache.ff_act.view(), d_output.view(), &block.ff_out, &mut grad.ff_out);
    let d_pre = &d_act * &cache.ff_pre.mapv(gelu_grad);
    let d_normed_ff = linear_backward(cache.normed_ff.view(), d_pre.view(), &block.ff_in, &mut grad.ff_in);
    let d_mid = &d_output
        + &layer_norm_backward(d_normed_ff.view(), &cache.ln_ff, &block.ln_ff, &mut grad.ln_ff);

    // Attention branch.
    let d_attn_out = match &cache.dropout_mask {
        Some(mask) => &d_mid * mask,
        None => d_mid.clone(),
    };
    let d_heads = linear_backward(cache.heads.view(), d_attn_out.view(), &block.out, &mut grad.out);
    let mut dq = Array2::zeros(cache.q.raw_dim());
    let mut dk = Array2::zeros(cache.k.raw_dim());
    let mut dv = Array2::zeros(cache.v.raw_dim());
    for (h, probs) in cache.attn_probs.iter().enumerate() {
        let cols = s![.., h * dh..(h + 1) * dh];
        let d_head = d_heads.slice(cols);
        let d_probs = d_head.dot(&cache.v.slice(cols).t());
        dv.slice_mut(cols).assign(&probs.t().dot(&d_head));
        let row_dot = (&d_probs * probs).sum_axis(Axis(1)).insert_axis(Axis(1));
        let d_scores = probs * &(&d_probs - &row_dot) * scale;
        dq.slice_mut(cols).assign(&d_scores.dot(&cache.k.slice(cols)));
        dk.slice_mut(cols).assign(&d_scores.t().dot(&cache.q.slice(cols)));
    }
    let x = cache.normed_attn.view();
    let d_normed = linear_backward(x, dq.view(), &block.query, &mut grad.query)
        + linear_backward(x, dk.view(), &block.key, &mut grad.key)
        + linear_backward(x, dv.view(), &block.value, &mut grad.value);
    d_mid + layer_norm_backward(d_normed.view(), &cache.ln_attn, &block.ln_attn, &mut grad.ln_attn)
}

/// Forward pass retaining activations. `dropout_rng` is only drawn from when
/// `train_mode` is set and the projection dropout is positive.
pub fn forward_cached<R: Rng + ?Sized>(
    config: &ModelConfig,
    params: &Params,
    signal: ArrayView2<'_, f64>,
    train_mode: bool,
    dropout_rng: &mut R,
) -> Result<ForwardCache> {
    if signal.ncols() != config.d_in {
        return Err(Error::validation(format!(
            "signal frame dim {} does not match model d_in {}",
            signal.ncols(),
            config.d_in
        )));
    }
    if signal.nrows() == 0 {
        return Err(Error::validation("signal has no frames"));
    }
    let windows = frontend_windows(&config.conv_frontend, signal);
    let t_len = windows.nrows();
    if t_len > config.max_len {
        return Err(Error::validation(format!(
            "sequence of {t_len} encoder positions exceeds max_len {}",
            config.max_len
        )));
    }
    let mut hidden = linear(windows.view(), &params.frontend) + &params.positions.slice(s![..t_len, ..]);
    check_finite(&hidden, "frontend")?;

    let mut blocks = Vec::with_capacity(params.blocks.len());
    for (i, block) in params.blocks.iter().enumerate() {
        let dropout = if train_mode {
            Some((config.projection_dropout, &mut *dropout_rng))
        } else {
            None
        };
        let (out, cache) = block_forward(config, block, hidden, dropout);
        check_finite(&out, &format!("encoder block {i}"))?;
        hidden = out;
        blocks.push(cache);
    }

    let pre_proj = match config.reduction {
        Reduction::FirstVector => hidden.row(0).to_owned(),
        Reduction::AveragePool => hidden.mean_axis(Axis(0)).expect("non-empty sequence"),
    };
    let vec = (pre_proj.dot(&params.f0.weight) + &params.f0.bias).mapv(f64::tanh);
    let logits = vec.dot(&params.f1.weight) + &params.f1.bias;
    if !logits.iter().all(|v| v.is_finite()) {
        return Err(Error::numeric("non-finite activation in projection head"));
    }
    let probs = SoftLabel::from_raw(softmax(logits.as_slice().expect("contiguous")));

    Ok(ForwardCache {
        windows,
        blocks,
        output: ForwardOutput {
            features: FeatureSequence { frames: hidden },
            pooled: PooledFeature { vec, pre_proj },
            prediction: Prediction { logits, probs },
        },
    })
}

pub fn forward<R: Rng + ?Sized>(
    config: &ModelConfig,
    params: &Params,
    signal: ArrayView2<'_, f64>,
    train_mode: bool,
    dropout_rng: &mut R,
) -> Result<ForwardOutput> {
    forward_cached(config, params, signal, train_mode, dropout_rng).map(|c| c.output)
}

/// Backpropagate loss gradients with respect to the logits and to the pooled
/// embedding `vec`, accumulating parameter gradients into `grad`.
pub fn backward(
    config: &ModelConfig,
    params: &Params,
    cache: &ForwardCache,
    d_logits: &[f64],
    d_vec: &[f64],
    grad: &mut Params,
) {
    let out = &cache.output;
    let vec = &out.pooled.vec;
    let d_logits = Array1::from(d_logits.to_vec());

    // f1
    grad.f1.weight += &outer(vec, &d_logits);
    grad.f1.bias += &d_logits;
    let d_vec_total = params.f1.weight.dot(&d_logits) + &Array1::from(d_vec.to_vec());

    // f0 (tanh)
    let d_f0_pre = &d_vec_total * &vec.mapv(|v| 1.0 - v * v);
    grad.f0.weight += &outer(&out.pooled.pre_proj, &d_f0_pre);
    grad.f0.bias += &d_f0_pre;
    let d_pre_proj = params.f0.weight.dot(&d_f0_pre);

    let hidden = &out.features.frames;
    let mut d_hidden = Array2::zeros(hidden.raw_dim());
    match config.reduction {
        Reduction::FirstVector => d_hidden.row_mut(0).assign(&d_pre_proj),
        Reduction::AveragePool => {
            let scaled = &d_pre_proj / hidden.nrows() as f64;
            for mut row in d_hidden.rows_mut() {
                row.assign(&scaled);
            }
        }
    }

    for ((block, bcache), bgrad) in params
        .blocks
        .iter()
        .zip(&cache.blocks)
        .zip(grad.blocks.iter_mut())
        .rev()
    {
        d_hidden = block_backward(config, block, bcache, d_hidden, bgrad);
    }

    let t_len = d_hidden.nrows();
    let mut d_pos = grad.positions.slice_mut(s![..t_len, ..]);
    d_pos += &d_hidden;
    linear_backward(cache.windows.view(), d_hidden.view(), &params.frontend, &mut grad.frontend);
}

fn outer(a: &Array1<f64>, b: &Array1<f64>) -> Array2<f64> {
    let col = a.view().insert_axis(Axis(1));
    let row = b.view().insert_axis(Axis(0));
    col.dot(&row)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_params;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn config() -> ModelConfig {
        ModelConfig {
            d_in: 3,
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            d_ff: 12,
            d_proj: 4,
            max_len: 32,
            ..ModelConfig::default()
        }
    }

    fn signal(t: usize) -> Array2<f64> {
        Array2::from_shape_fn((t, 3), |(i, j)| ((i * 3 + j) as f64 * 0.37).sin())
    }

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(9)
    }

    #[test]
    fn eval_mode_is_deterministic() {
        let cfg = config();
        let p = init_params(&cfg, 1);
        let a = forward(&cfg, &p, signal(7).view(), false, &mut rng()).unwrap();
        let b = forward(&cfg, &p, signal(7).view(), false, &mut ChaCha8Rng::seed_from_u64(77)).unwrap();
        assert_eq!(a, b);
        assert!((a.prediction.probs.probs().iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn reductions_agree_for_single_frame() {
        let cfg = config();
        let p = init_params(&cfg, 2);
        let first = forward(&cfg, &p, signal(1).view(), false, &mut rng()).unwrap();
        let avg_cfg = ModelConfig {
            reduction: Reduction::AveragePool,
            ..cfg.clone()
        };
        let avg = forward(&avg_cfg, &p, signal(1).view(), false, &mut rng()).unwrap();
        assert_eq!(first, avg);
    }

    #[test]
    fn empty_stack_reduces_projected_input() {
        let cfg = ModelConfig {
            n_layers: 0,
            ..config()
        };
        let p = init_params(&cfg, 3);
        let x = signal(5);
        let out = forward(&cfg, &p, x.view(), false, &mut rng()).unwrap();
        let projected = x.dot(&p.frontend.weight) + &p.frontend.bias + &p.positions.slice(s![..5, ..]);
        assert_eq!(out.pooled.pre_proj, projected.row(0).to_owned());
        assert_eq!(out.features.frames, projected);
    }

    #[test]
    fn zero_dropout_train_equals_eval() {
        let cfg = ModelConfig {
            projection_dropout: 0.0,
            ..config()
        };
        let p = init_params(&cfg, 4);
        let a = forward(&cfg, &p, signal(6).view(), true, &mut rng()).unwrap();
        let b = forward(&cfg, &p, signal(6).view(), false, &mut rng()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn dropout_changes_train_outputs() {
        let cfg = config();
        let p = init_params(&cfg, 4);
        let a = forward(&cfg, &p, signal(6).view(), true, &mut rng()).unwrap();
        let b = forward(&cfg, &p, signal(6).view(), false, &mut rng()).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn first_vector_reads_row_zero() {
        let cfg = config();
        let p = init_params(&cfg, 5);
        let out = forward(&cfg, &p, signal(9).view(), false, &mut rng()).unwrap();
        assert_eq!(out.pooled.pre_proj, out.features.frames.row(0).to_owned());
    }

    #[test]
    fn strided_frontend_output_length() {
        let f = Frontend::Strided { kernel: 4, stride: 2 };
        assert_eq!(f.output_len(1), 1);
        assert_eq!(f.output_len(4), 1);
        assert_eq!(f.output_len(10), 4);
        let cfg = ModelConfig {
            conv_frontend: f,
            ..config()
        };
        let p = init_params(&cfg, 6);
        let out = forward(&cfg, &p, signal(10).view(), false, &mut rng()).unwrap();
        assert_eq!(out.features.frames.nrows(), 4);
    }

    #[test]
    fn rejects_dim_mismatch_and_overlong_input() {
        let cfg = config();
        let p = init_params(&cfg, 0);
        let bad = Array2::<f64>::zeros((4, 2));
        assert!(matches!(
            forward(&cfg, &p, bad.view(), false, &mut rng()),
            Err(Error::Validation(_))
        ));
        assert!(forward(&cfg, &p, signal(33).view(), false, &mut rng()).is_err());
    }

    #[test]
    fn non_finite_activation_names_layer() {
        let cfg = config();
        let mut p = init_params(&cfg, 0);
        p.blocks[1].ff_out.bias[0] = f64::NAN;
        let err = forward(&cfg, &p, signal(3).view(), false, &mut rng()).unwrap_err();
        assert!(matches!(err, Error::Numeric(_)));
        assert!(err.to_string().contains("encoder block 1"), "{err}");
    }
}

//! Forward and backward passes of the primitive layers. Every `*_backward`
//! accumulates parameter gradients into its `grad` argument and returns the
//! gradient with respect to the layer input.

use ndarray::{Array1, Array2, ArrayView2, Axis};

use super::params::{LayerNorm, Linear};

pub(crate) const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub(crate) fn linear(x: ArrayView2<'_, f64>, lin: &Linear) -> Array2<f64> {
    x.dot(&lin.weight) + &lin.bias
}

pub(crate) fn linear_backward(
    x: ArrayView2<'_, f64>,
    dy: ArrayView2<'_, f64>,
    lin: &Linear,
    grad: &mut Linear,
) -> Array2<f64> {
    grad.weight += &x.t().dot(&dy);
    grad.bias += &dy.sum_axis(Axis(0));
    dy.dot(&lin.weight.t())
}

#[derive(Debug, Clone)]
pub(crate) struct LayerNormCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
}

pub(crate) fn layer_norm(x: ArrayView2<'_, f64>, ln: &LayerNorm) -> (Array2<f64>, LayerNormCache) {
    let d = x.ncols() as f64;
    let mut xhat = x.to_owned();
    let mut inv_std = Array1::zeros(x.nrows());
    for (mut row, s) in xhat.rows_mut().into_iter().zip(inv_std.iter_mut()) {
        let mean = row.sum() / d;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().map(|v| v * v).sum::<f64>() / d;
        *s = 1.0 / (var + LN_EPS).sqrt();
        row *= *s;
    }
    let y = &xhat * &ln.gamma + &ln.beta;
    (y, LayerNormCache { xhat, inv_std })
}

pub(crate) fn layer_norm_backward(
    dy: ArrayView2<'_, f64>,
    cache: &LayerNormCache,
    ln: &LayerNorm,
    grad: &mut LayerNorm,
) -> Array2<f64> {
    grad.gamma += &(&dy * &cache.xhat).sum_axis(Axis(0));
    grad.beta += &dy.sum_axis(Axis(0));
    let d = dy.ncols() as f64;
    let dxhat = &dy * &ln.gamma;
    let mut dx = Array2::zeros(dy.raw_dim());
    for (t, mut out) in dx.rows_mut().into_iter().enumerate() {
        let g = dxhat.row(t);
        let xh = cache.xhat.row(t);
        let mean_g = g.sum() / d;
        let mean_gx = g.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / d;
        let s = cache.inv_std[t];
        for k in 0..out.len() {
            out[k] = s * (g[k] - mean_g - xh[k] * mean_gx);
        }
    }
    dx
}

/// Tanh approximation of GELU.
pub(crate) fn gelu(z: f64) -> f64 {
    0.5 * z * (1.0 + (GELU_C * (z + GELU_A * z * z * z)).tanh())
}

pub(crate) fn gelu_grad(z: f64) -> f64 {
    let t = (GELU_C * (z + GELU_A * z * z * z)).tanh();
    0.5 * (1.0 + t) + 0.5 * z * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * z * z)
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

pub(crate) fn softmax_rows(scores: &mut Array2<f64>) {
    for mut row in scores.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
}

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use rand::Rng;

use super::params::{Linear, Norm, Tensor};

const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Exact GELU: `x * Phi(x)`.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2))
}

pub fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2));
    cdf + x * FRAC_1_SQRT_2PI * (-0.5 * x * x).exp()
}

pub(crate) fn linear(x: &ArrayView2<f64>, lin: &Linear<f64>) -> Array2<f64> {
    let mut y = x.dot(&lin.weight.mat());
    y += &lin.bias.vec();
    y
}

/// Accumulates parameter gradients of `y = x W + b` and returns `dx`.
pub(crate) fn linear_backward(
    x: &ArrayView2<f64>,
    dy: &ArrayView2<f64>,
    lin: &Linear<f64>,
    grad: &mut Linear<f64>,
) -> Array2<f64> {
    accumulate(&mut grad.weight, &x.t().dot(dy));
    accumulate_vec(&mut grad.bias, &dy.sum_axis(Axis(0)));
    dy.dot(&lin.weight.mat().t())
}

pub(crate) fn accumulate(t: &mut Tensor<f64>, m: &Array2<f64>) {
    let src = m.as_standard_layout();
    for (a, b) in t.data.iter_mut().zip(src.iter()) {
        *a += b;
    }
}

pub(crate) fn accumulate_vec(t: &mut Tensor<f64>, v: &Array1<f64>) {
    for (a, b) in t.data.iter_mut().zip(v.iter()) {
        *a += b;
    }
}

pub(crate) struct NormCache {
    xhat: Array2<f64>,
    rstd: Array1<f64>,
}

pub(crate) fn layer_norm(x: &ArrayView2<f64>, norm: &Norm<f64>, eps: f64) -> (Array2<f64>, NormCache) {
    let h = x.ncols() as f64;
    let mean = x.sum_axis(Axis(1)) / h;
    let mut xhat = x.to_owned();
    xhat -= &mean.view().insert_axis(Axis(1));
    let var = xhat.mapv(|v| v * v).sum_axis(Axis(1)) / h;
    let rstd = var.mapv(|v| 1.0 / (v + eps).sqrt());
    xhat *= &rstd.view().insert_axis(Axis(1));
    let mut y = &xhat * &norm.gamma.vec();
    y += &norm.beta.vec();
    (y, NormCache { xhat, rstd })
}

pub(crate) fn layer_norm_backward(
    dy: &ArrayView2<f64>,
    cache: &NormCache,
    norm: &Norm<f64>,
    grad: &mut Norm<f64>,
) -> Array2<f64> {
    let h = dy.ncols() as f64;
    accumulate_vec(&mut grad.gamma, &(dy * &cache.xhat).sum_axis(Axis(0)));
    accumulate_vec(&mut grad.beta, &dy.sum_axis(Axis(0)));
    let dxhat = dy * &norm.gamma.vec();
    let sum_d = dxhat.sum_axis(Axis(1));
    let sum_dx = (&dxhat * &cache.xhat).sum_axis(Axis(1));
    let mut dx = Array2::zeros(dy.raw_dim());
    Zip::indexed(&mut dx).for_each(|(i, j), v| {
        *v = cache.rstd[i] / h * (h * dxhat[[i, j]] - sum_d[i] - cache.xhat[[i, j]] * sum_dx[i]);
    });
    dx
}

/// Row-wise softmax of `scores + key_bias`, where masked keys carry a bias
/// of minus infinity. A row with every key masked comes out all zeros.
pub(crate) fn masked_softmax(scores: &mut Array2<f64>, key_bias: &ArrayView1<f64>) {
    for mut row in scores.rows_mut() {
        row += key_bias;
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        if max == f64::NEG_INFINITY {
            row.fill(0.0);
            continue;
        }
        row.mapv_inplace(|v| (v - max).exp());
        let s = row.sum();
        row /= s;
    }
}

/// `dS = P * (dP - rowsum(dP * P))`.
pub(crate) fn softmax_backward(probs: &ArrayView2<f64>, dprobs: &ArrayView2<f64>) -> Array2<f64> {
    let dot = (probs * dprobs).sum_axis(Axis(1));
    let mut ds = dprobs.to_owned();
    ds -= &dot.view().insert_axis(Axis(1));
    ds *= probs;
    ds
}

/// Inverted-dropout mask: entries are 0 or `1/(1-p)`.
pub(crate) fn dropout_mask(shape: (usize, usize), p: f64, rng: &mut impl Rng) -> Array2<f64> {
    let keep = 1.0 / (1.0 - p);
    Array2::from_shape_simple_fn(shape, || if rng.gen::<f64>() < p { 0.0 } else { keep })
}

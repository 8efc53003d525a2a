use serde::{Deserialize, Serialize};

use super::rng::Rng;
use super::tensor::Tensor;
use super::Mode;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Softmax,
}

pub fn apply_activation(kind: Activation, x: &Tensor) -> Tensor {
    match kind {
        Activation::Relu => x.map(|v| v.max(0.0)),
        Activation::Softmax => softmax_last_axis(x),
    }
}

/// Row-wise softmax over the last axis with max subtraction.
pub fn softmax_last_axis(x: &Tensor) -> Tensor {
    let k = *x.shape().last().expect("tensor rank >= 1");
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(k) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        row.iter_mut().for_each(|v| *v /= total);
    }
    out
}

/// Gradient of an activation given its input and output.
pub fn activation_backward(kind: Activation, input: &Tensor, output: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    grad_out.expect_shape("activation backward", input.shape())?;
    let mut dx = grad_out.clone();
    match kind {
        Activation::Relu => {
            for (d, &x) in dx.data_mut().iter_mut().zip(input.data()) {
                if x <= 0.0 {
                    *d = 0.0;
                }
            }
        }
        Activation::Softmax => {
            let k = *input.shape().last().expect("tensor rank >= 1");
            for (d, y) in dx.data_mut().chunks_mut(k).zip(output.data().chunks(k)) {
                let dot: f64 = d.iter().zip(y).map(|(g, p)| g * p).sum();
                for (g, p) in d.iter_mut().zip(y) {
                    *g = p * (*g - dot);
                }
            }
        }
    }
    Ok(dx)
}

/// Inverted dropout. Returns the output and, in train mode with a nonzero
/// rate, the per-entry scale mask (0 or `1/(1-rate)`) used.
pub fn inverted_dropout(
    x: &Tensor,
    rate: f64,
    mode: Mode,
    rng: &mut Rng,
) -> Result<(Tensor, Option<Vec<f64>>)> {
    check_rate(rate)?;
    if mode == Mode::Infer || rate == 0.0 {
        return Ok((x.clone(), None));
    }
    let mask = dropout_mask(x.len(), rate, rng);
    let mut y = x.clone();
    for (v, m) in y.data_mut().iter_mut().zip(&mask) {
        *v *= m;
    }
    Ok((y, Some(mask)))
}

pub(crate) fn check_rate(rate: f64) -> Result<()> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Parameter(format!("dropout rate must lie in [0, 1), got {rate}")));
    }
    Ok(())
}

/// Entries are dropped independently with probability `rate`.
pub(crate) fn dropout_mask(len: usize, rate: f64, rng: &mut Rng) -> Vec<f64> {
    let keep = 1.0 / (1.0 - rate);
    (0..len)
        .map(|_| if rng.uniform() < rate { 0.0 } else { keep })
        .collect()
}

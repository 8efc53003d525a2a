use super::params::LayerParams;
use super::tensor::Tensor;
use super::Mode;
use crate::error::{Error, Result};

pub const BN_EPSILON: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

/// Values retained by [`batchnorm_forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct BatchNormCache {
    pub normalized: Tensor,
    pub inv_std: Vec<f64>,
    pub mode: Mode,
}

/// Per-channel normalization over every axis except the last.
///
/// Train mode uses batch statistics (biased variance) and folds them into
/// the running statistics with momentum [`BN_MOMENTUM`].
pub fn batchnorm_forward(
    x: &Tensor,
    params: &mut LayerParams,
    mode: Mode,
) -> Result<(Tensor, BatchNormCache)> {
    let c = *x.shape().last().expect("tensor rank >= 1");
    for role in ["gamma", "beta", "running_mean", "running_var"] {
        let t = params.get(role)?;
        if t.shape() != [c] {
            return Err(Error::dim("batchnorm", x.shape(), t.shape()));
        }
    }
    if x.rank() < 2 {
        return Err(Error::dim("batchnorm", x.shape(), &[0, c]));
    }
    let n = x.len() / c;
    let (mean, var) = match mode {
        Mode::Train => {
            if x.shape()[0] < 2 {
                return Err(Error::Parameter(
                    "batch normalization in train mode needs a batch of at least 2".into(),
                ));
            }
            let mut mean = vec![0.0; c];
            for row in x.data().chunks(c) {
                for (m, v) in mean.iter_mut().zip(row) {
                    *m += v;
                }
            }
            mean.iter_mut().for_each(|m| *m /= n as f64);
            let mut var = vec![0.0; c];
            for row in x.data().chunks(c) {
                for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                    *s += (v - m) * (v - m);
                }
            }
            var.iter_mut().for_each(|s| *s /= n as f64);

            let rm = params.get_mut("running_mean")?.data_mut();
            for (r, m) in rm.iter_mut().zip(&mean) {
                *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * m;
            }
            let rv = params.get_mut("running_var")?.data_mut();
            for (r, v) in rv.iter_mut().zip(&var) {
                *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * v;
            }
            (mean, var)
        }
        Mode::Infer => (
            params.get("running_mean")?.data().to_vec(),
            params.get("running_var")?.data().to_vec(),
        ),
    };
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPSILON).sqrt()).collect();
    let gamma = params.get("gamma")?.data();
    let beta = params.get("beta")?.data();
    let mut normalized = Vec::with_capacity(x.len());
    let mut y = Vec::with_capacity(x.len());
    for row in x.data().chunks(c) {
        for ch in 0..c {
            let xh = (row[ch] - mean[ch]) * inv_std[ch];
            normalized.push(xh);
            y.push(gamma[ch] * xh + beta[ch]);
        }
    }
    let shape = x.shape().to_vec();
    Ok((
        Tensor::new(shape.clone(), y)?.ensure_finite("batchnorm_forward")?,
        BatchNormCache {
            normalized: Tensor::new(shape, normalized)?,
            inv_std,
            mode,
        },
    ))
}

pub fn batchnorm_backward(
    cache: &BatchNormCache,
    params: &mut LayerParams,
    grad_out: &Tensor,
) -> Result<Tensor> {
    grad_out.expect_shape("batchnorm backward", cache.normalized.shape())?;
    let c = cache.inv_std.len();
    let n = grad_out.len() / c;
    let xh = cache.normalized.data();
    let gy = grad_out.data();
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for (gr, xr) in gy.chunks(c).zip(xh.chunks(c)) {
        for ch in 0..c {
            dgamma[ch] += gr[ch] * xr[ch];
            dbeta[ch] += gr[ch];
        }
    }
    let gamma = params.get("gamma")?.data().to_vec();
    let mut dx = vec![0.0; gy.len()];
    match cache.mode {
        Mode::Train => {
            // dx = γ·inv_std/n · (n·dy − Σdy − x̂·Σ(dy·x̂))
            let nf = n as f64;
            for ((d, gr), xr) in dx.chunks_mut(c).zip(gy.chunks(c)).zip(xh.chunks(c)) {
                for ch in 0..c {
                    d[ch] = gamma[ch] * cache.inv_std[ch] / nf
                        * (nf * gr[ch] - dbeta[ch] - xr[ch] * dgamma[ch]);
                }
            }
        }
        Mode::Infer => {
            for (d, gr) in dx.chunks_mut(c).zip(gy.chunks(c)) {
                for ch in 0..c {
                    d[ch] = gamma[ch] * cache.inv_std[ch] * gr[ch];
                }
            }
        }
    }
    params.accumulate_grad("gamma", &Tensor::new(vec![c], dgamma)?)?;
    params.accumulate_grad("beta", &Tensor::new(vec![c], dbeta)?)?;
    Tensor::new(grad_out.shape().to_vec(), dx)?.ensure_finite("batchnorm_backward")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bn(c: usize) -> LayerParams {
        LayerParams::new("bn")
            .with_trainable("gamma", Tensor::full(&[c], 1.0))
            .with_trainable("beta", Tensor::zeros(&[c]))
            .with_frozen("running_mean", Tensor::zeros(&[c]))
            .with_frozen("running_var", Tensor::full(&[c], 1.0))
    }

    #[test]
    fn normalizes_plus_minus_one() {
        let mut p = bn(1);
        let x = Tensor::new(vec![2, 1], vec![-1.0, 1.0]).unwrap();
        let (y, _) = batchnorm_forward(&x, &mut p, Mode::Train).unwrap();
        let s = 1.0 / (1.0 + BN_EPSILON).sqrt();
        assert!((y.data()[0] + s).abs() < 1e-12 && (y.data()[1] - s).abs() < 1e-12);
        assert!((y.data()[0] + 1.0).abs() < 1e-4);
        // running stats: 0.9·0 + 0.1·0 and 0.9·1 + 0.1·1
        assert_eq!(p.get("running_mean").unwrap().data(), &[0.0]);
        assert!((p.get("running_var").unwrap().data()[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn standardized_input_is_unchanged() {
        let mut p = bn(2);
        let x = Tensor::new(vec![4, 2], vec![1.0, -1.0, -1.0, 1.0, 1.0, 1.0, -1.0, -1.0]).unwrap();
        let (y, _) = batchnorm_forward(&x, &mut p, Mode::Train).unwrap();
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-4);
        }
    }

    #[test]
    fn infer_with_batch_stats_matches_train() {
        let x = Tensor::new(vec![3, 2, 2], vec![0.3, 1.0, -2.0, 4.0, 0.1, 0.7, 1.5, -0.5, 2.0, 2.0, -1.0, 0.0]).unwrap();
        let mut train = bn(2);
        train.get_mut("gamma").unwrap().data_mut().copy_from_slice(&[1.5, -0.5]);
        train.get_mut("beta").unwrap().data_mut().copy_from_slice(&[0.2, 0.1]);
        let mut infer = train.clone();
        let (yt, _) = batchnorm_forward(&x, &mut train, Mode::Train).unwrap();

        let c = 2;
        let n = (x.len() / c) as f64;
        let mut mean = [0.0; 2];
        let mut var = [0.0; 2];
        for row in x.data().chunks(c) {
            for ch in 0..c {
                mean[ch] += row[ch] / n;
            }
        }
        for row in x.data().chunks(c) {
            for ch in 0..c {
                var[ch] += (row[ch] - mean[ch]).powi(2) / n;
            }
        }
        infer.get_mut("running_mean").unwrap().data_mut().copy_from_slice(&mean);
        infer.get_mut("running_var").unwrap().data_mut().copy_from_slice(&var);
        let (yi, _) = batchnorm_forward(&x, &mut infer, Mode::Infer).unwrap();
        for (a, b) in yt.data().iter().zip(yi.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn single_sample_train_batch_rejected() {
        let mut p = bn(1);
        let x = Tensor::new(vec![1, 3, 1], vec![1.0, 2.0, 3.0]).unwrap();
        assert!(batchnorm_forward(&x, &mut p, Mode::Train).is_err());
        assert!(batchnorm_forward(&x, &mut p, Mode::Infer).is_ok());
    }
}

use super::linalg::gemm;
use super::params::LayerParams;
use super::tensor::Tensor;
use crate::error::{Error, Result};

fn check_shapes(x: &Tensor, params: &LayerParams) -> Result<(usize, usize, usize)> {
    let w = params.get("weight")?;
    let b = params.get("bias")?;
    if x.rank() != 2 || w.rank() != 2 || x.shape()[1] != w.shape()[1] {
        return Err(Error::dim("dense", x.shape(), w.shape()));
    }
    if b.shape() != [w.shape()[0]] {
        return Err(Error::dim("dense bias", b.shape(), &w.shape()[..1]));
    }
    Ok((x.shape()[0], w.shape()[1], w.shape()[0]))
}

/// `y[b, o] = Σ_i W[o, i]·x[b, i] + bias[o]` with `W: [out, in]`.
pub fn dense_forward(x: &Tensor, params: &LayerParams) -> Result<Tensor> {
    let (batch, in_dim, out_dim) = check_shapes(x, params)?;
    let w = params.get("weight")?;
    let bias = params.get("bias")?.data();
    let mut y = Vec::with_capacity(batch * out_dim);
    for _ in 0..batch {
        y.extend_from_slice(bias);
    }
    gemm(batch, in_dim, out_dim, x.data(), false, w.data(), true, 1.0, &mut y);
    Tensor::new(vec![batch, out_dim], y)?.ensure_finite("dense_forward")
}

/// Accumulates weight and bias gradients and returns the input gradient.
pub fn dense_backward(x: &Tensor, params: &mut LayerParams, grad_out: &Tensor) -> Result<Tensor> {
    let (batch, in_dim, out_dim) = check_shapes(x, params)?;
    grad_out.expect_shape("dense backward", &[batch, out_dim])?;
    let g = grad_out.data();

    let mut grad_w = vec![0.0; out_dim * in_dim];
    gemm(out_dim, batch, in_dim, g, true, x.data(), false, 0.0, &mut grad_w);
    let mut grad_b = vec![0.0; out_dim];
    for row in g.chunks(out_dim) {
        for (acc, v) in grad_b.iter_mut().zip(row) {
            *acc += v;
        }
    }
    let mut grad_x = vec![0.0; batch * in_dim];
    gemm(batch, out_dim, in_dim, g, false, params.get("weight")?.data(), false, 0.0, &mut grad_x);

    params.accumulate_grad("weight", &Tensor::new(vec![out_dim, in_dim], grad_w)?)?;
    params.accumulate_grad("bias", &Tensor::new(vec![out_dim], grad_b)?)?;
    Tensor::new(vec![batch, in_dim], grad_x)?.ensure_finite("dense_backward")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layer(w: Tensor, b: Tensor) -> LayerParams {
        LayerParams::new("dense")
            .with_trainable("weight", w)
            .with_trainable("bias", b)
    }

    #[test]
    fn identity_weights() {
        let p = layer(Tensor::matrix(&[&[1.0, 0.0], &[0.0, 1.0]]), Tensor::vector(&[0.0, 0.0]));
        let y = dense_forward(&Tensor::matrix(&[&[3.0, 4.0]]), &p).unwrap();
        assert_eq!(y.data(), &[3.0, 4.0]);
    }

    #[test]
    fn hand_matrix_multiply() {
        let p = layer(Tensor::matrix(&[&[1.0, 2.0], &[3.0, 4.0]]), Tensor::vector(&[0.0, 0.0]));
        let y = dense_forward(&Tensor::matrix(&[&[1.0, 1.0]]), &p).unwrap();
        assert_eq!(y.data(), &[3.0, 7.0]);
    }

    #[test]
    fn zero_weights_give_bias() {
        let p = layer(Tensor::zeros(&[2, 3]), Tensor::vector(&[5.0, 6.0]));
        let y = dense_forward(&Tensor::matrix(&[&[0.3, -9.0, 2.0]]), &p).unwrap();
        assert_eq!(y.data(), &[5.0, 6.0]);
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let p = layer(Tensor::zeros(&[2, 3]), Tensor::zeros(&[2]));
        let err = dense_forward(&Tensor::zeros(&[1, 4]), &p).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[1, 4]") && msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn sum_loss_weight_gradient_is_input() {
        let mut p = layer(Tensor::matrix(&[&[1.0, 0.0], &[0.0, 1.0]]), Tensor::zeros(&[2]));
        let x = Tensor::matrix(&[&[3.0, -4.0]]);
        dense_backward(&x, &mut p, &Tensor::full(&[1, 2], 1.0)).unwrap();
        // dL/dW[o, i] = x[i] for every o.
        assert_eq!(p.grad("weight").unwrap().data(), &[3.0, -4.0, 3.0, -4.0]);
        assert_eq!(p.grad("bias").unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn zero_seed_gives_zero_gradients() {
        let mut p = layer(Tensor::matrix(&[&[1.0, 2.0], &[3.0, 4.0]]), Tensor::zeros(&[2]));
        let gx = dense_backward(&Tensor::matrix(&[&[1.0, 2.0]]), &mut p, &Tensor::zeros(&[1, 2])).unwrap();
        assert_eq!(gx.max_abs(), 0.0);
        assert_eq!(p.grad("weight").unwrap().max_abs(), 0.0);
    }
}

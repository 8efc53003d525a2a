//! Stride-1 "same" convolution over NHWC tensors, and 2×2 max pooling.

use super::linalg::gemm;
use super::params::LayerParams;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Upper bound on im2col buffer elements processed per chunk of samples.
const COLS_BUDGET: usize = 1 << 22;

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    batch: usize,
    h: usize,
    w: usize,
    c_in: usize,
    c_out: usize,
    k: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.k * self.k * self.c_in
    }

    fn samples_per_chunk(&self) -> usize {
        (COLS_BUDGET / (self.h * self.w * self.patch()).max(1)).clamp(1, self.batch)
    }
}

fn conv_geom(x: &Tensor, params: &LayerParams) -> Result<ConvGeom> {
    let kernel = params.get("weight")?;
    let bias = params.get("bias")?;
    if x.rank() != 4 {
        return Err(Error::dim("conv2d input", x.shape(), &[0, 0, 0, 0]));
    }
    let ks = kernel.shape();
    if ks.len() != 4 || ks[1] != ks[2] || !(ks[1] == 1 || ks[1] == 3) {
        return Err(Error::Parameter(format!(
            "conv2d kernel must be [c_out, 3, 3, c_in] or [c_out, 1, 1, c_in], got {ks:?}"
        )));
    }
    if ks[3] != x.shape()[3] {
        return Err(Error::dim("conv2d channels", x.shape(), ks));
    }
    if bias.shape() != [ks[0]] {
        return Err(Error::dim("conv2d bias", bias.shape(), &ks[..1]));
    }
    let s = x.shape();
    Ok(ConvGeom {
        batch: s[0],
        h: s[1],
        w: s[2],
        c_in: s[3],
        c_out: ks[0],
        k: ks[1],
    })
}

/// Rows are output positions of samples `[b0, b0 + n)`; columns are
/// `(ky, kx, c)` patch entries with zero padding.
fn im2col(x: &[f64], g: &ConvGeom, b0: usize, n: usize, cols: &mut [f64]) {
    let pad = g.k / 2;
    let patch = g.patch();
    let mut row = 0;
    for b in b0..b0 + n {
        let sample = &x[b * g.h * g.w * g.c_in..(b + 1) * g.h * g.w * g.c_in];
        for y in 0..g.h {
            for xx in 0..g.w {
                let dst = &mut cols[row * patch..(row + 1) * patch];
                for ky in 0..g.k {
                    let iy = y as isize + ky as isize - pad as isize;
                    for kx in 0..g.k {
                        let ix = xx as isize + kx as isize - pad as isize;
                        let o = (ky * g.k + kx) * g.c_in;
                        let slot = &mut dst[o..o + g.c_in];
                        if iy < 0 || ix < 0 || iy >= g.h as isize || ix >= g.w as isize {
                            slot.fill(0.0);
                        } else {
                            let s = (iy as usize * g.w + ix as usize) * g.c_in;
                            slot.copy_from_slice(&sample[s..s + g.c_in]);
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

fn col2im(cols: &[f64], g: &ConvGeom, b0: usize, n: usize, dx: &mut [f64]) {
    let pad = g.k / 2;
    let patch = g.patch();
    let mut row = 0;
    for b in b0..b0 + n {
        let sample = &mut dx[b * g.h * g.w * g.c_in..(b + 1) * g.h * g.w * g.c_in];
        for y in 0..g.h {
            for xx in 0..g.w {
                let src = &cols[row * patch..(row + 1) * patch];
                for ky in 0..g.k {
                    let iy = y as isize + ky as isize - pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for kx in 0..g.k {
                        let ix = xx as isize + kx as isize - pad as isize;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        let o = (ky * g.k + kx) * g.c_in;
                        let s = (iy as usize * g.w + ix as usize) * g.c_in;
                        for (d, v) in sample[s..s + g.c_in].iter_mut().zip(&src[o..o + g.c_in]) {
                            *d += v;
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Cross-correlation of the zero-padded input with each kernel plus a
/// per-channel bias. Spatial size is preserved.
pub fn conv2d_same_forward(x: &Tensor, params: &LayerParams) -> Result<Tensor> {
    let g = conv_geom(x, params)?;
    let kernel = params.get("weight")?.data();
    let bias = params.get("bias")?.data();
    let hw = g.h * g.w;
    let patch = g.patch();
    let mut out = vec![0.0; g.batch * hw * g.c_out];
    for row in out.chunks_mut(g.c_out) {
        row.copy_from_slice(bias);
    }
    let chunk = g.samples_per_chunk();
    let mut cols = vec![0.0; chunk * hw * patch];
    let mut b0 = 0;
    while b0 < g.batch {
        let n = chunk.min(g.batch - b0);
        let rows = n * hw;
        im2col(x.data(), &g, b0, n, &mut cols);
        let dst = &mut out[b0 * hw * g.c_out..(b0 + n) * hw * g.c_out];
        gemm(rows, patch, g.c_out, &cols, false, kernel, true, 1.0, dst);
        b0 += n;
    }
    Tensor::new(vec![g.batch, g.h, g.w, g.c_out], out)?.ensure_finite("conv2d_same_forward")
}

/// Accumulates kernel and bias gradients and returns the input gradient.
pub fn conv2d_same_backward(
    x: &Tensor,
    params: &mut LayerParams,
    grad_out: &Tensor,
) -> Result<Tensor> {
    let g = conv_geom(x, params)?;
    grad_out.expect_shape("conv2d backward", &[g.batch, g.h, g.w, g.c_out])?;
    let hw = g.h * g.w;
    let patch = g.patch();
    let gy = grad_out.data();

    let mut grad_k = vec![0.0; g.c_out * patch];
    let mut grad_b = vec![0.0; g.c_out];
    for row in gy.chunks(g.c_out) {
        for (acc, v) in grad_b.iter_mut().zip(row) {
            *acc += v;
        }
    }
    let mut dx = vec![0.0; x.len()];
    let chunk = g.samples_per_chunk();
    let mut cols = vec![0.0; chunk * hw * patch];
    let mut dcols = vec![0.0; chunk * hw * patch];
    let kernel = params.get("weight")?.data();
    let mut b0 = 0;
    while b0 < g.batch {
        let n = chunk.min(g.batch - b0);
        let rows = n * hw;
        let gchunk = &gy[b0 * hw * g.c_out..(b0 + n) * hw * g.c_out];
        im2col(x.data(), &g, b0, n, &mut cols);
        gemm(g.c_out, rows, patch, gchunk, true, &cols, false, 1.0, &mut grad_k);
        gemm(rows, g.c_out, patch, gchunk, false, kernel, false, 0.0, &mut dcols);
        col2im(&dcols[..rows * patch], &g, b0, n, &mut dx);
        b0 += n;
    }
    params.accumulate_grad("weight", &Tensor::new(vec![g.c_out, g.k, g.k, g.c_in], grad_k)?)?;
    params.accumulate_grad("bias", &Tensor::new(vec![g.c_out], grad_b)?)?;
    Tensor::new(x.shape().to_vec(), dx)?.ensure_finite("conv2d_same_backward")
}

/// Output of [`maxpool2x2`]: pooled values and, for every output cell, the
/// flat index of the input element that produced it.
#[derive(Debug, Clone)]
pub struct Pooled {
    pub output: Tensor,
    pub argmax: Vec<usize>,
}

/// Max over disjoint 2×2 windows. Ties resolve to the first position in
/// row-major window order.
pub fn maxpool2x2(x: &Tensor) -> Result<Pooled> {
    if x.rank() != 4 {
        return Err(Error::dim("maxpool2x2", x.shape(), &[0, 0, 0, 0]));
    }
    let &[batch, h, w, c] = x.shape() else { unreachable!() };
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Geometry(format!(
            "maxpool2x2 needs even spatial dimensions, got {h}x{w}"
        )));
    }
    let (oh, ow) = (h / 2, w / 2);
    let data = x.data();
    let mut out = Vec::with_capacity(batch * oh * ow * c);
    let mut argmax = Vec::with_capacity(out.capacity());
    for b in 0..batch {
        for oy in 0..oh {
            for ox in 0..ow {
                for ch in 0..c {
                    let mut best_idx = ((b * h + 2 * oy) * w + 2 * ox) * c + ch;
                    let mut best = data[best_idx];
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = ((b * h + 2 * oy + dy) * w + 2 * ox + dx) * c + ch;
                        if data[idx] > best {
                            best = data[idx];
                            best_idx = idx;
                        }
                    }
                    out.push(best);
                    argmax.push(best_idx);
                }
            }
        }
    }
    Ok(Pooled {
        output: Tensor::new(vec![batch, oh, ow, c], out)?,
        argmax,
    })
}

/// Routes each upstream gradient entry to the input position that won its window.
pub fn maxpool2x2_backward(
    input_shape: &[usize],
    argmax: &[usize],
    grad_out: &Tensor,
) -> Result<Tensor> {
    if grad_out.len() != argmax.len() {
        return Err(Error::dim("maxpool2x2 backward", grad_out.shape(), &[argmax.len()]));
    }
    let mut dx = Tensor::zeros(input_shape);
    let d = dx.data_mut();
    for (&idx, &g) in argmax.iter().zip(grad_out.data()) {
        d[idx] += g;
    }
    Ok(dx)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn conv_params(kernel: Tensor, bias: Tensor) -> LayerParams {
        LayerParams::new("conv")
            .with_trainable("weight", kernel)
            .with_trainable("bias", bias)
    }

    #[test]
    fn one_by_one_identity_kernel() {
        let x = Tensor::new(vec![1, 2, 3, 1], (0..6).map(|v| v as f64).collect()).unwrap();
        let p = conv_params(Tensor::full(&[1, 1, 1, 1], 1.0), Tensor::zeros(&[1]));
        let y = conv2d_same_forward(&x, &p).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn all_ones_kernel_counts_neighbours() {
        let x = Tensor::full(&[1, 3, 3, 1], 1.0);
        let p = conv_params(Tensor::full(&[1, 3, 3, 1], 1.0), Tensor::zeros(&[1]));
        let y = conv2d_same_forward(&x, &p).unwrap();
        assert_eq!(y.data(), &[4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]);
    }

    #[test]
    fn zero_kernel_gives_bias() {
        let x = Tensor::full(&[2, 4, 4, 3], -7.0);
        let p = conv_params(Tensor::zeros(&[2, 3, 3, 3]), Tensor::full(&[2], 0.5));
        let y = conv2d_same_forward(&x, &p).unwrap();
        assert_eq!(y.shape(), &[2, 4, 4, 2]);
        assert!(y.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn channel_mismatch_is_dimension_error() {
        let x = Tensor::zeros(&[1, 4, 4, 2]);
        let p = conv_params(Tensor::zeros(&[1, 3, 3, 3]), Tensor::zeros(&[1]));
        assert!(matches!(conv2d_same_forward(&x, &p), Err(Error::Dimension { .. })));
    }

    #[test]
    fn pool_single_window() {
        let x = Tensor::new(vec![1, 2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(maxpool2x2(&x).unwrap().output.data(), &[4.0]);
    }

    #[test]
    fn pool_ramp() {
        let x = Tensor::new(vec![1, 4, 4, 1], (0..16).map(|v| v as f64).collect()).unwrap();
        let p = maxpool2x2(&x).unwrap();
        assert_eq!(p.output.data(), &[5.0, 7.0, 13.0, 15.0]);
        assert_eq!(p.argmax, vec![5, 7, 13, 15]);
    }

    #[test]
    fn pool_constant_and_ties() {
        let x = Tensor::full(&[1, 2, 4, 2], 3.0);
        let p = maxpool2x2(&x).unwrap();
        assert!(p.output.data().iter().all(|&v| v == 3.0));
        // first row-major element of each window wins ties
        assert_eq!(p.argmax, vec![0, 1, 4, 5]);
    }

    #[test]
    fn pool_odd_dimension_rejected() {
        assert!(maxpool2x2(&Tensor::zeros(&[1, 3, 4, 1])).is_err());
    }

    #[test]
    fn pool_backward_conserves_window_sums() {
        let x = Tensor::new(vec![1, 4, 4, 1], (0..16).map(|v| ((v * 7) % 11) as f64).collect()).unwrap();
        let p = maxpool2x2(&x).unwrap();
        let g = Tensor::new(vec![1, 2, 2, 1], vec![1.0, -2.0, 3.5, 0.25]).unwrap();
        let dx = maxpool2x2_backward(x.shape(), &p.argmax, &g).unwrap();
        assert_eq!(dx.data().iter().filter(|&&v| v != 0.0).count(), 4);
        assert!((dx.sum() - g.sum()).abs() < 1e-15);
    }
}

//! LSTM with input, forget, output and candidate gates, plus variational
//! recurrent dropout and backpropagation through time.
//!
//! Gate `k ∈ {i, f, o, g}` owns `W_k: [units, features]`,
//! `U_k: [units, units]` and `b_k: [units]`.

use super::activation::{check_rate, dropout_mask};
use super::linalg::gemm;
use super::params::LayerParams;
use super::rng::Rng;
use super::tensor::Tensor;
use super::Mode;
use crate::error::{Error, Result};

pub const GATES: [&str; 4] = ["i", "f", "o", "g"];

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Returns `(features, units)` after validating every gate tensor.
pub(crate) fn lstm_dims(params: &LayerParams) -> Result<(usize, usize)> {
    let w = params.get("W_i")?;
    if w.rank() != 2 {
        return Err(Error::dim("lstm W_i", w.shape(), &[0, 0]));
    }
    let (units, features) = (w.shape()[0], w.shape()[1]);
    for gate in GATES {
        params.get(&format!("W_{gate}"))?.expect_shape("lstm W", &[units, features])?;
        params.get(&format!("U_{gate}"))?.expect_shape("lstm U", &[units, units])?;
        params.get(&format!("b_{gate}"))?.expect_shape("lstm b", &[units])?;
    }
    Ok((features, units))
}

/// Pre-activations for all four gates: `x·W_kᵀ + h·U_kᵀ + b_k`, each `[rows, units]`.
fn gate_preactivations(
    x: &[f64],
    h: &[f64],
    rows: usize,
    features: usize,
    units: usize,
    params: &LayerParams,
) -> Result<[Vec<f64>; 4]> {
    let mut out: [Vec<f64>; 4] = Default::default();
    for (slot, gate) in out.iter_mut().zip(GATES) {
        let bias = params.get(&format!("b_{gate}"))?.data();
        let mut a = Vec::with_capacity(rows * units);
        for _ in 0..rows {
            a.extend_from_slice(bias);
        }
        let w = params.get(&format!("W_{gate}"))?.data();
        let u = params.get(&format!("U_{gate}"))?.data();
        gemm(rows, features, units, x, false, w, true, 1.0, &mut a);
        gemm(rows, units, units, h, false, u, true, 1.0, &mut a);
        *slot = a;
    }
    Ok(out)
}

/// One gated update: `c = f⊙c_prev + i⊙g`, `h = o⊙tanh(c)`.
pub fn lstm_cell_step(
    x_t: &Tensor,
    h_prev: &Tensor,
    c_prev: &Tensor,
    params: &LayerParams,
) -> Result<(Tensor, Tensor)> {
    let (features, units) = lstm_dims(params)?;
    if x_t.rank() != 2 || x_t.shape()[1] != features {
        return Err(Error::dim("lstm_cell_step input", x_t.shape(), &[x_t.shape()[0], features]));
    }
    let batch = x_t.shape()[0];
    h_prev.expect_shape("lstm_cell_step h_prev", &[batch, units])?;
    c_prev.expect_shape("lstm_cell_step c_prev", &[batch, units])?;
    let [ai, af, ao, ag] = gate_preactivations(x_t.data(), h_prev.data(), batch, features, units, params)?;
    let mut h = Vec::with_capacity(batch * units);
    let mut c = Vec::with_capacity(batch * units);
    for j in 0..batch * units {
        let cn = sigmoid(af[j]) * c_prev.data()[j] + sigmoid(ai[j]) * ag[j].tanh();
        c.push(cn);
        h.push(sigmoid(ao[j]) * cn.tanh());
    }
    Ok((
        Tensor::new(vec![batch, units], h)?.ensure_finite("lstm_cell_step")?,
        Tensor::new(vec![batch, units], c)?.ensure_finite("lstm_cell_step")?,
    ))
}

/// Activations recorded during [`lstm_forward_cached`]. Per-step arrays
/// are laid out `[batch, steps, units]`.
#[derive(Debug, Clone)]
pub struct LstmCache {
    input: Tensor,
    mask: Option<Vec<f64>>,
    steps: usize,
    units: usize,
    return_sequences: bool,
    h_used: Vec<f64>,
    c_prev: Vec<f64>,
    gates: [Vec<f64>; 4],
    tanh_c: Vec<f64>,
}

/// Runs the layer over `seq: [batch, steps, features]` from zero state.
pub fn lstm_layer_forward(
    seq: &Tensor,
    params: &LayerParams,
    return_sequences: bool,
    recurrent_dropout: f64,
    mode: Mode,
    rng: &mut Rng,
) -> Result<Tensor> {
    lstm_forward_cached(seq, params, return_sequences, recurrent_dropout, mode, rng).map(|(y, _)| y)
}

pub(crate) fn lstm_forward_cached(
    seq: &Tensor,
    params: &LayerParams,
    return_sequences: bool,
    recurrent_dropout: f64,
    mode: Mode,
    rng: &mut Rng,
) -> Result<(Tensor, LstmCache)> {
    check_rate(recurrent_dropout)?;
    let (features, units) = lstm_dims(params)?;
    if seq.rank() != 3 || seq.shape()[2] != features {
        return Err(Error::dim("lstm_layer_forward", seq.shape(), &[0, 0, features]));
    }
    let (batch, steps) = (seq.shape()[0], seq.shape()[1]);
    if steps == 0 {
        return Err(Error::EmptySequence("lstm_layer_forward"));
    }
    // One mask per sequence, reused at every step.
    let mask = (mode == Mode::Train && recurrent_dropout > 0.0)
        .then(|| dropout_mask(batch * units, recurrent_dropout, rng));

    let total = batch * steps * units;
    let mut gates: [Vec<f64>; 4] = std::array::from_fn(|_| vec![0.0; total]);
    let mut h_used = vec![0.0; total];
    let mut c_prev_all = vec![0.0; total];
    let mut tanh_c = vec![0.0; total];
    let mut hs = vec![0.0; total];

    let mut h = vec![0.0; batch * units];
    let mut c = vec![0.0; batch * units];
    let mut x_t = vec![0.0; batch * features];
    let mut hd = vec![0.0; batch * units];
    for t in 0..steps {
        for b in 0..batch {
            let src = (b * steps + t) * features;
            x_t[b * features..(b + 1) * features].copy_from_slice(&seq.data()[src..src + features]);
        }
        hd.copy_from_slice(&h);
        if let Some(m) = &mask {
            hd.iter_mut().zip(m).for_each(|(v, s)| *v *= s);
        }
        let [ai, af, ao, ag] = gate_preactivations(&x_t, &hd, batch, features, units, params)?;
        for b in 0..batch {
            for u in 0..units {
                let j = b * units + u;
                let slot = (b * steps + t) * units + u;
                let (gi, gf, go, gg) = (sigmoid(ai[j]), sigmoid(af[j]), sigmoid(ao[j]), ag[j].tanh());
                c_prev_all[slot] = c[j];
                h_used[slot] = hd[j];
                let cn = gf * c[j] + gi * gg;
                let tc = cn.tanh();
                c[j] = cn;
                h[j] = go * tc;
                gates[0][slot] = gi;
                gates[1][slot] = gf;
                gates[2][slot] = go;
                gates[3][slot] = gg;
                tanh_c[slot] = tc;
                hs[slot] = h[j];
            }
        }
    }
    let output = if return_sequences {
        Tensor::new(vec![batch, steps, units], hs)?
    } else {
        Tensor::new(vec![batch, units], h)?
    };
    let output = output.ensure_finite("lstm_layer_forward")?;
    Ok((
        output,
        LstmCache {
            input: seq.clone(),
            mask,
            steps,
            units,
            return_sequences,
            h_used,
            c_prev: c_prev_all,
            gates,
            tanh_c,
        },
    ))
}

/// Backpropagation through time. Accumulates all gate gradients and
/// returns the gradient with respect to the input sequence.
pub(crate) fn lstm_backward(
    cache: &LstmCache,
    params: &mut LayerParams,
    grad_out: &Tensor,
) -> Result<Tensor> {
    let (features, units) = lstm_dims(params)?;
    let (batch, steps) = (cache.input.shape()[0], cache.steps);
    debug_assert_eq!(units, cache.units);
    let expected: Vec<usize> = if cache.return_sequences {
        vec![batch, steps, units]
    } else {
        vec![batch, units]
    };
    grad_out.expect_shape("lstm backward", &expected)?;

    let total = batch * steps * units;
    let mut dpre: [Vec<f64>; 4] = std::array::from_fn(|_| vec![0.0; total]);
    let mut dh_next = vec![0.0; batch * units];
    let mut dc_next = vec![0.0; batch * units];
    let mut da_t: [Vec<f64>; 4] = std::array::from_fn(|_| vec![0.0; batch * units]);
    let u_mats: Vec<Vec<f64>> = GATES
        .iter()
        .map(|g| params.get(&format!("U_{g}")).map(|t| t.data().to_vec()))
        .collect::<Result<_>>()?;
    let [gi, gf, go, gg] = &cache.gates;

    for t in (0..steps).rev() {
        for b in 0..batch {
            for u in 0..units {
                let j = b * units + u;
                let slot = (b * steps + t) * units + u;
                let mut dh = dh_next[j];
                if cache.return_sequences {
                    dh += grad_out.data()[slot];
                } else if t == steps - 1 {
                    dh += grad_out.data()[j];
                }
                let tc = cache.tanh_c[slot];
                let d_o = dh * tc;
                let dc = dc_next[j] + dh * go[slot] * (1.0 - tc * tc);
                let d_i = dc * gg[slot];
                let d_g = dc * gi[slot];
                let d_f = dc * cache.c_prev[slot];
                dc_next[j] = dc * gf[slot];
                da_t[0][j] = d_i * gi[slot] * (1.0 - gi[slot]);
                da_t[1][j] = d_f * gf[slot] * (1.0 - gf[slot]);
                da_t[2][j] = d_o * go[slot] * (1.0 - go[slot]);
                da_t[3][j] = d_g * (1.0 - gg[slot] * gg[slot]);
                for k in 0..4 {
                    dpre[k][slot] = da_t[k][j];
                }
            }
        }
        // gradient reaching h_{t-1} through the recurrent weights
        dh_next.fill(0.0);
        for k in 0..4 {
            gemm(batch, units, units, &da_t[k], false, &u_mats[k], false, 1.0, &mut dh_next);
        }
        if let Some(m) = &cache.mask {
            dh_next.iter_mut().zip(m).for_each(|(v, s)| *v *= s);
        }
    }

    let rows = batch * steps;
    let x = cache.input.data();
    let mut dx = vec![0.0; rows * features];
    for (k, gate) in GATES.iter().enumerate() {
        let mut dw = vec![0.0; units * features];
        gemm(units, rows, features, &dpre[k], true, x, false, 0.0, &mut dw);
        let mut du = vec![0.0; units * units];
        gemm(units, rows, units, &dpre[k], true, &cache.h_used, false, 0.0, &mut du);
        let mut db = vec![0.0; units];
        for row in dpre[k].chunks(units) {
            db.iter_mut().zip(row).for_each(|(a, v)| *a += v);
        }
        let w = params.get(&format!("W_{gate}"))?.data();
        gemm(rows, units, features, &dpre[k], false, w, false, 1.0, &mut dx);
        params.accumulate_grad(&format!("W_{gate}"), &Tensor::new(vec![units, features], dw)?)?;
        params.accumulate_grad(&format!("U_{gate}"), &Tensor::new(vec![units, units], du)?)?;
        params.accumulate_grad(&format!("b_{gate}"), &Tensor::new(vec![units], db)?)?;
    }
    Tensor::new(vec![batch, steps, features], dx)?.ensure_finite("lstm_backward")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(features: usize, units: usize, fill: impl Fn(usize) -> f64) -> LayerParams {
        let mut p = LayerParams::new("lstm");
        let mut n = 0;
        let mut next = |shape: &[usize]| {
            let len: usize = shape.iter().product();
            let data = (0..len).map(|i| fill(n + i)).collect();
            n += len;
            Tensor::new(shape.to_vec(), data).unwrap()
        };
        for g in GATES {
            p = p
                .with_trainable(&format!("W_{g}"), next(&[units, features]))
                .with_trainable(&format!("U_{g}"), next(&[units, units]))
                .with_trainable(&format!("b_{g}"), next(&[units]));
        }
        p
    }

    fn pseudo(i: usize) -> f64 {
        ((i as f64 * 12.9898).sin() * 43758.5453).fract() * 0.8
    }

    #[test]
    fn zero_params_zero_state() {
        let p = params(3, 4, |_| 0.0);
        let x = Tensor::full(&[2, 3], 0.7);
        let (h, c) = lstm_cell_step(&x, &Tensor::zeros(&[2, 4]), &Tensor::zeros(&[2, 4]), &p).unwrap();
        assert_eq!(h.max_abs(), 0.0);
        assert_eq!(c.max_abs(), 0.0);
    }

    #[test]
    fn zero_params_halve_previous_cell() {
        // i = f = o = 0.5 and g = 0, so c = 0.5·c_prev.
        let p = params(2, 2, |_| 0.0);
        let c_prev = Tensor::matrix(&[&[0.4, -1.0]]);
        let (h, c) = lstm_cell_step(&Tensor::zeros(&[1, 2]), &Tensor::zeros(&[1, 2]), &c_prev, &p).unwrap();
        assert_eq!(c.data(), &[0.2, -0.5]);
        assert!((h.data()[0] - 0.5 * 0.2f64.tanh()).abs() < 1e-15);
    }

    #[test]
    fn saturated_forget_gate_carries_cell() {
        let mut p = params(2, 3, |_| 0.0);
        p.get_mut("b_f").unwrap().fill(20.0);
        p.get_mut("b_i").unwrap().fill(-20.0);
        let v = [0.3, -1.2, 2.0];
        let c_prev = Tensor::matrix(&[&v]);
        let (h, c) = lstm_cell_step(&Tensor::full(&[1, 2], 5.0), &Tensor::full(&[1, 3], 0.9), &c_prev, &p).unwrap();
        for k in 0..3 {
            assert!((c.data()[k] - v[k]).abs() < 1e-8);
            assert!((h.data()[k] - 0.5 * v[k].tanh()).abs() < 1e-8);
        }
    }

    #[test]
    fn single_step_layer_equals_cell() {
        let p = params(3, 5, pseudo);
        let x = Tensor::new(vec![2, 1, 3], (0..6).map(|i| pseudo(100 + i)).collect()).unwrap();
        let y = lstm_layer_forward(&x, &p, false, 0.0, Mode::Infer, &mut Rng::new(0)).unwrap();
        let x0 = x.clone().reshape(&[2, 3]).unwrap();
        let (h, _) = lstm_cell_step(&x0, &Tensor::zeros(&[2, 5]), &Tensor::zeros(&[2, 5]), &p).unwrap();
        assert_eq!(y, h);
    }

    #[test]
    fn layer_equals_explicit_step_loop() {
        let (batch, steps, features, units) = (3, 6, 3, 4);
        let p = params(features, units, pseudo);
        let x = Tensor::new(
            vec![batch, steps, features],
            (0..batch * steps * features).map(|i| pseudo(1000 + i) * 2.0).collect(),
        )
        .unwrap();
        let seqs = lstm_layer_forward(&x, &p, true, 0.0, Mode::Train, &mut Rng::new(5)).unwrap();
        let last = lstm_layer_forward(&x, &p, false, 0.0, Mode::Train, &mut Rng::new(5)).unwrap();

        let mut h = Tensor::zeros(&[batch, units]);
        let mut c = Tensor::zeros(&[batch, units]);
        for t in 0..steps {
            let mut xt = Vec::new();
            for b in 0..batch {
                let s = (b * steps + t) * features;
                xt.extend_from_slice(&x.data()[s..s + features]);
            }
            let xt = Tensor::new(vec![batch, features], xt).unwrap();
            (h, c) = lstm_cell_step(&xt, &h, &c, &p).unwrap();
            for b in 0..batch {
                let s = (b * steps + t) * units;
                assert_eq!(&seqs.data()[s..s + units], &h.data()[b * units..(b + 1) * units]);
            }
        }
        assert_eq!(last, h);
    }
}

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Bias-corrected Adam. Moment buffers are created lazily on the first step
/// and matched to parameters by position.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub step: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl Default for AdamState {
    fn default() -> Self {
        Self::new(1e-3)
    }
}

impl AdamState {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn first_moments(&self) -> &[Tensor] {
        &self.first
    }

    pub fn second_moments(&self) -> &[Tensor] {
        &self.second
    }
}

/// Applies one Adam update to each parameter from its gradient.
pub fn adam_step(params: &mut [(&mut Tensor, &Tensor)], state: &mut AdamState) -> Result<()> {
    for (p, g) in params.iter() {
        if p.shape() != g.shape() {
            return Err(Error::dim("adam_step", p.shape(), g.shape()));
        }
    }
    if state.first.is_empty() {
        state.first = params.iter().map(|(p, _)| Tensor::zeros(p.shape())).collect();
        state.second = state.first.clone();
    }
    if state.first.len() != params.len() {
        return Err(Error::State(format!(
            "optimizer tracks {} tensors but received {}",
            state.first.len(),
            params.len()
        )));
    }
    for ((p, _), m) in params.iter().zip(&state.first) {
        if p.shape() != m.shape() {
            return Err(Error::dim("adam_step moments", p.shape(), m.shape()));
        }
    }

    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (((p, g), m), v) in params.iter_mut().zip(&mut state.first).zip(&mut state.second) {
        let pd = p.data_mut();
        for (((w, &gr), mi), vi) in pd.iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
            *mi = b1 * *mi + (1.0 - b1) * gr;
            *vi = b2 * *vi + (1.0 - b2) * gr * gr;
            let m_hat = *mi / c1;
            let v_hat = *vi / c2;
            *w -= state.lr * m_hat / (v_hat.sqrt() + state.epsilon);
        }
        if !p.is_finite() {
            return Err(Error::NonFinite("adam_step"));
        }
    }
    Ok(())
}

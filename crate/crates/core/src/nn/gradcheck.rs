//! Finite-difference verification of the analytic gradients.
//!
//! Stochastic layers are frozen by re-seeding the random source before
//! every evaluation, so each perturbed forward pass sees the same dropout
//! masks as the analytic pass.

use super::layer::Sequential;
use super::loss::softmax_cross_entropy;
use super::rng::Rng;
use super::tensor::Tensor;
use super::Mode;
use crate::error::Result;

/// `|a − n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// `(f(x+ε) − f(x−ε)) / 2ε`.
pub fn central_difference(mut f: impl FnMut(f64) -> f64, x: f64, eps: f64) -> f64 {
    (f(x + eps) - f(x - eps)) / (2.0 * eps)
}

/// Scalar objective placed on top of the checked fragment.
#[derive(Debug, Clone, Copy)]
pub enum Objective<'a> {
    /// Two-way cross-entropy on the fragment's logits.
    CrossEntropy(&'a [usize]),
    /// `Σ r ⊙ y` with a fixed pseudo-random `r` drawn from the seed.
    Projection(u64),
}

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// Entries sampled per tensor; `None` checks every entry.
    pub samples_per_tensor: Option<usize>,
    pub mode: Mode,
    pub dropout_seed: u64,
    pub sample_seed: u64,
    pub check_input: bool,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            samples_per_tensor: None,
            mode: Mode::Train,
            dropout_seed: 0,
            sample_seed: 1,
            check_input: true,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub entries_checked: usize,
    /// Tensor key and entry index with the largest error.
    pub worst: Option<(String, usize)>,
}

impl GradCheckReport {
    fn record(&mut self, key: &str, idx: usize, err: f64) {
        self.entries_checked += 1;
        if err > self.max_rel_error || self.worst.is_none() {
            self.max_rel_error = self.max_rel_error.max(err);
            self.worst = Some((key.to_owned(), idx));
        }
    }
}

fn evaluate(model: &mut Sequential, input: &Tensor, objective: Objective, opts: &GradCheckOptions) -> Result<(f64, Tensor)> {
    let mut rng = Rng::new(opts.dropout_seed);
    match objective {
        Objective::CrossEntropy(labels) => {
            let logits = model.forward_logits(input, opts.mode, &mut rng)?;
            softmax_cross_entropy(&logits, labels)
        }
        Objective::Projection(seed) => {
            let y = model.forward(input, opts.mode, &mut rng)?;
            let mut r = Rng::new(seed);
            let mut weights = y.clone();
            weights.data_mut().iter_mut().for_each(|w| *w = r.uniform_range(-1.0, 1.0));
            let loss = y.data().iter().zip(weights.data()).map(|(a, b)| a * b).sum();
            Ok((loss, weights))
        }
    }
}

fn sample_indices(len: usize, opts: &GradCheckOptions, rng: &mut Rng) -> Vec<usize> {
    match opts.samples_per_tensor {
        Some(k) if k < len => {
            let mut all: Vec<usize> = (0..len).collect();
            rng.shuffle(&mut all);
            all.truncate(k);
            all.sort_unstable();
            all
        }
        _ => (0..len).collect(),
    }
}

/// Compares analytic gradients of `objective ∘ model` against central
/// differences for sampled entries of every trainable tensor (and of the
/// input when requested).
pub fn gradient_check(
    model: &mut Sequential,
    input: &Tensor,
    objective: Objective,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    model.zero_grad();
    let (_, seed_grad) = evaluate(model, input, objective, opts)?;
    let input_grad = model.backward(&seed_grad)?;

    let analytic: Vec<(String, Tensor)> = model
        .layers
        .iter()
        .enumerate()
        .flat_map(|(i, layer)| {
            layer.params.tensors.iter().filter_map(move |(role, p)| {
                p.grad
                    .as_ref()
                    .map(|g| (format!("{i:02}.{}.{role}", layer.params.name), g.clone()))
            })
        })
        .collect();

    let mut report = GradCheckReport::default();
    let mut picker = Rng::new(opts.sample_seed);
    for (key, grad) in &analytic {
        for idx in sample_indices(grad.len(), opts, &mut picker) {
            let original = model.tensor_mut(key).expect("tensor key").data()[idx];
            let numeric = central_difference(
                |v| {
                    model.tensor_mut(key).expect("tensor key").data_mut()[idx] = v;
                    evaluate(model, input, objective, opts).map(|(l, _)| l).unwrap_or(f64::NAN)
                },
                original,
                opts.eps,
            );
            model.tensor_mut(key).expect("tensor key").data_mut()[idx] = original;
            report.record(key, idx, relative_error(grad.data()[idx], numeric));
        }
    }

    if opts.check_input {
        let mut x = input.clone();
        for idx in sample_indices(x.len(), opts, &mut picker) {
            let original = x.data()[idx];
            let numeric = central_difference(
                |v| {
                    x.data_mut()[idx] = v;
                    evaluate(model, &x, objective, opts).map(|(l, _)| l).unwrap_or(f64::NAN)
                },
                original,
                opts.eps,
            );
            x.data_mut()[idx] = original;
            report.record("input", idx, relative_error(input_grad.data()[idx], numeric));
        }
    }
    model.clear_caches();
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let n = central_difference(|x| x * x, 3.0, 1e-5);
        assert!((n - 6.0).abs() < 1e-8);
        assert!(relative_error(6.0, n) < 1e-8);
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1e-9, 0.0) - 0.1).abs() < 1e-12);
    }
}

//! Late fusion of per-modality class probabilities.
//!
//! Four aggregation strategies are provided: weighted averaging, majority
//! voting, log-odds (independent evidence) pooling, and a stacked logistic
//! meta-learner. Every strategy accepts any non-empty subset of present
//! modalities and reports a confidence below 1 whenever something is
//! missing.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::modalities::{predicted_label, Modality};

/// Clamp applied to probabilities before taking log-odds.
pub const LOGIT_CLAMP: f64 = 1e-6;
/// Imputed positive-class probability for a missing modality when stacking.
pub const STACKER_IMPUTE: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModalityPrediction {
    pub modality: Modality,
    /// `None` marks the modality as missing for this subject.
    pub probabilities: Option<[f64; 2]>,
}

impl ModalityPrediction {
    pub fn present(modality: Modality, probabilities: [f64; 2]) -> Self {
        Self { modality, probabilities: Some(probabilities) }
    }

    pub fn missing(modality: Modality) -> Self {
        Self { modality, probabilities: None }
    }

    pub fn is_present(&self) -> bool {
        self.probabilities.is_some()
    }

    pub fn positive(&self) -> Option<f64> {
        self.probabilities.map(|p| p[1])
    }
}

/// Per-modality weights, aligned by position with the prediction slice,
/// stored normalized to sum 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionWeights(Vec<f64>);

impl FusionWeights {
    pub fn from_raw(raw: &[f64]) -> Result<Self> {
        if raw.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Parameter(format!("fusion weights must be finite and >= 0: {raw:?}")));
        }
        let total: f64 = raw.iter().sum();
        if total <= 0.0 {
            return Err(Error::Degenerate("all fusion weights are zero".into()));
        }
        Ok(Self(raw.iter().map(|w| w / total).collect()))
    }

    pub fn equal(n: usize) -> Self {
        Self(vec![1.0 / n as f64; n])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Weighted,
    Majority,
    Bayes,
    Stacked,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [Strategy::Weighted, Strategy::Majority, Strategy::Bayes, Strategy::Stacked];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Weighted => "weighted",
            Strategy::Majority => "majority",
            Strategy::Bayes => "bayes",
            Strategy::Stacked => "stacked",
        }
    }

    pub fn display_name(self) -> &'static str {
        match self {
            Strategy::Weighted => "Aggregated (weighted average)",
            Strategy::Majority => "Aggregated (majority vote)",
            Strategy::Bayes => "Aggregated (log-odds pooling)",
            Strategy::Stacked => "Aggregated (stacking)",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::Parameter(format!("unknown fusion strategy {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionResult {
    pub probabilities: [f64; 2],
    pub label: usize,
    pub strategy: String,
    pub confidence: f64,
    /// Present modalities in canonical order.
    pub modalities_used: Vec<Modality>,
}

impl FusionResult {
    fn new(positive: f64, strategy: impl Into<String>, confidence: f64, preds: &[ModalityPrediction]) -> Self {
        let probabilities = [1.0 - positive, positive];
        let mut used: Vec<Modality> = preds.iter().filter(|p| p.is_present()).map(|p| p.modality).collect();
        used.sort();
        Self {
            label: predicted_label(&probabilities),
            probabilities,
            strategy: strategy.into(),
            confidence,
            modalities_used: used,
        }
    }

    pub fn positive(&self) -> f64 {
        self.probabilities[1]
    }
}

fn validate(preds: &[ModalityPrediction]) -> Result<()> {
    for p in preds {
        if let Some(pr) = p.probabilities {
            let ok = pr.iter().all(|v| v.is_finite() && *v >= 0.0) && (pr[0] + pr[1] - 1.0).abs() <= 1e-9;
            if !ok {
                return Err(Error::Data(format!("{} prediction {pr:?} is not a probability vector", p.modality)));
            }
        }
    }
    if !preds.iter().any(ModalityPrediction::is_present) {
        return Err(Error::NoInput);
    }
    Ok(())
}

fn check_weights(preds: &[ModalityPrediction], weights: &FusionWeights) -> Result<()> {
    if preds.len() != weights.len() {
        return Err(Error::dim("fusion weights", &[preds.len()], &[weights.len()]));
    }
    Ok(())
}

/// Weight of each modality proportional to its validation AUC.
pub fn derive_weights(aucs: &[f64]) -> Result<FusionWeights> {
    if let Some(bad) = aucs.iter().find(|a| !(0.0..=1.0).contains(*a)) {
        return Err(Error::Parameter(format!("AUC {bad} outside [0, 1]")));
    }
    if aucs.iter().all(|&a| a == 0.0) {
        return Err(Error::Degenerate("every modality has AUC 0".into()));
    }
    FusionWeights::from_raw(aucs)
}

/// Present-weight mass, i.e. the confidence of weight-based strategies.
fn present_mass(preds: &[ModalityPrediction], weights: &FusionWeights) -> f64 {
    if preds.iter().all(ModalityPrediction::is_present) {
        return 1.0;
    }
    let mass: f64 = preds
        .iter()
        .zip(weights.as_slice())
        .filter(|(p, _)| p.is_present())
        .map(|(_, w)| w)
        .sum();
    mass.min(1.0)
}

fn count_confidence(preds: &[ModalityPrediction]) -> f64 {
    preds.iter().filter(|p| p.is_present()).count() as f64 / preds.len() as f64
}

fn weighted_positive(preds: &[ModalityPrediction], weights: &FusionWeights) -> Result<f64> {
    let mass = present_mass(preds, weights);
    if mass <= 0.0 {
        return Err(Error::Degenerate("every present modality has zero weight".into()));
    }
    let mut acc = 0.0;
    for (p, w) in preds.iter().zip(weights.as_slice()) {
        if let Some(pos) = p.positive() {
            acc += w / mass * pos;
        }
    }
    Ok(acc.clamp(0.0, 1.0))
}

/// Convex combination of present modalities with renormalized weights.
/// Confidence is the stored weight mass of the present modalities.
pub fn fuse_weighted_average(preds: &[ModalityPrediction], weights: &FusionWeights) -> Result<FusionResult> {
    validate(preds)?;
    check_weights(preds, weights)?;
    let positive = weighted_positive(preds, weights)?;
    Ok(FusionResult::new(positive, Strategy::Weighted.name(), present_mass(preds, weights), preds))
}

/// Label chosen by per-modality argmax votes. Probabilities are the mean of
/// the winning voters; a tied vote falls back to the weighted average.
pub fn fuse_majority_vote(preds: &[ModalityPrediction], weights: &FusionWeights) -> Result<FusionResult> {
    validate(preds)?;
    check_weights(preds, weights)?;
    let confidence = present_mass(preds, weights);
    let voters: Vec<([f64; 2], usize)> = preds
        .iter()
        .filter_map(|p| p.probabilities)
        .map(|pr| (pr, predicted_label(&pr)))
        .collect();
    let ones = voters.iter().filter(|(_, v)| *v == 1).count();
    let zeros = voters.len() - ones;
    if ones == zeros {
        let positive = weighted_positive(preds, weights)?;
        return Ok(FusionResult::new(positive, "majority(weighted-fallback)", confidence, preds));
    }
    let winner = usize::from(ones > zeros);
    let winners: Vec<f64> = voters.iter().filter(|(_, v)| *v == winner).map(|(p, _)| p[1]).collect();
    let positive = winners.iter().sum::<f64>() / winners.len() as f64;
    Ok(FusionResult::new(positive, Strategy::Majority.name(), confidence, preds))
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Independent-evidence pooling: posterior log-odds equal the prior
/// log-odds plus each present modality's deviation from it.
pub fn fuse_logit_pool(preds: &[ModalityPrediction], prior: f64) -> Result<FusionResult> {
    if !(prior > 0.0 && prior < 1.0) {
        return Err(Error::Parameter(format!("prior {prior} must lie in (0, 1)")));
    }
    validate(preds)?;
    let base = logit(prior);
    let mut z = base;
    for p in preds.iter().filter_map(ModalityPrediction::positive) {
        z += logit(p.clamp(LOGIT_CLAMP, 1.0 - LOGIT_CLAMP)) - base;
    }
    Ok(FusionResult::new(sigmoid(z), Strategy::Bayes.name(), count_confidence(preds), preds))
}

/// Logistic meta-learner over per-modality positive-class probabilities.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct StackerModel {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub iterations: usize,
    pub final_loss: f64,
    pub trained: bool,
}

pub const STACKER_LR: f64 = 0.1;
pub const STACKER_L2: f64 = 1e-4;
pub const STACKER_MAX_ITER: usize = 5000;
pub const STACKER_GRAD_TOL: f64 = 1e-6;

/// Positive-class probabilities in slot order, missing ones imputed.
pub fn meta_features(preds: &[ModalityPrediction]) -> Vec<f64> {
    preds.iter().map(|p| p.positive().unwrap_or(STACKER_IMPUTE)).collect()
}

impl StackerModel {
    /// Logistic model with fixed parameters.
    pub fn with_parameters(weights: Vec<f64>, bias: f64) -> Self {
        Self { weights, bias, iterations: 0, final_loss: f64::NAN, trained: true }
    }

    pub fn predict(&self, features: &[f64]) -> f64 {
        let z: f64 = self.weights.iter().zip(features).map(|(w, x)| w * x).sum::<f64>() + self.bias;
        sigmoid(z)
    }
}

/// Full-batch gradient descent on mean cross-entropy plus `λ/2·‖w‖²`
/// (bias unregularized).
pub fn train_stacker(features: &[Vec<f64>], labels: &[usize]) -> Result<StackerModel> {
    if features.len() != labels.len() || features.is_empty() {
        return Err(Error::Data(format!("{} feature rows but {} labels", features.len(), labels.len())));
    }
    let dim = features[0].len();
    if features.iter().any(|f| f.len() != dim || f.iter().any(|v| !v.is_finite())) {
        return Err(Error::Data("meta-feature rows must be finite and equally long".into()));
    }
    if labels.iter().any(|&l| l > 1) {
        return Err(Error::Data("labels must be 0 or 1".into()));
    }
    if !(labels.contains(&0) && labels.contains(&1)) {
        return Err(Error::Data("stacker training labels contain a single class".into()));
    }
    let n = features.len() as f64;
    let mut model = StackerModel { weights: vec![0.0; dim], trained: true, ..Default::default() };
    let mut grad_w = vec![0.0; dim];
    for it in 0..=STACKER_MAX_ITER {
        grad_w.iter_mut().for_each(|g| *g = 0.0);
        let mut grad_b = 0.0;
        let mut loss = 0.0;
        for (x, &y) in features.iter().zip(labels) {
            let p = model.predict(x);
            let err = p - y as f64;
            for (g, xi) in grad_w.iter_mut().zip(x) {
                *g += err * xi / n;
            }
            grad_b += err / n;
            let pc = p.clamp(1e-15, 1.0 - 1e-15);
            loss -= (if y == 1 { pc.ln() } else { (1.0 - pc).ln() }) / n;
        }
        loss += 0.5 * STACKER_L2 * model.weights.iter().map(|w| w * w).sum::<f64>();
        for (g, w) in grad_w.iter_mut().zip(&model.weights) {
            *g += STACKER_L2 * w;
        }
        model.final_loss = loss;
        model.iterations = it;
        let norm = grad_w.iter().fold(grad_b.abs(), |m, g| m.max(g.abs()));
        if norm < STACKER_GRAD_TOL || it == STACKER_MAX_ITER {
            break;
        }
        for (w, g) in model.weights.iter_mut().zip(&grad_w) {
            *w -= STACKER_LR * g;
        }
        model.bias -= STACKER_LR * grad_b;
    }
    if !model.bias.is_finite() || model.weights.iter().any(|w| !w.is_finite()) {
        return Err(Error::NonFinite("train_stacker"));
    }
    Ok(model)
}

/// Stacked prediction; missing modalities are imputed exactly as in training.
pub fn fuse_stacked(model: &StackerModel, preds: &[ModalityPrediction]) -> Result<FusionResult> {
    if !model.trained {
        return Err(Error::State("stacker has not been trained".into()));
    }
    validate(preds)?;
    if model.weights.len() != preds.len() {
        return Err(Error::dim("stacker features", &[preds.len()], &[model.weights.len()]));
    }
    let positive = model.predict(&meta_features(preds));
    Ok(FusionResult::new(positive, Strategy::Stacked.name(), count_confidence(preds), preds))
}

#[cfg(test)]
mod tests {
    use super::*;
    use Modality::*;

    fn preds(p: [Option<f64>; 3]) -> Vec<ModalityPrediction> {
        Modality::ALL
            .iter()
            .zip(p)
            .map(|(&m, v)| match v {
                Some(x) => ModalityPrediction::present(m, [1.0 - x, x]),
                None => ModalityPrediction::missing(m),
            })
            .collect()
    }

    #[test]
    fn weights_from_table_aucs() {
        let w = derive_weights(&[0.92, 0.89, 0.88]).unwrap();
        let expect = [0.92 / 2.69, 0.89 / 2.69, 0.88 / 2.69];
        for (a, b) in w.as_slice().iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!((w.as_slice()[0] - 0.3420).abs() < 5e-5);
        assert!((w.as_slice()[1] - 0.3309).abs() < 5e-5);
        assert!((w.as_slice()[2] - 0.3271).abs() < 5e-5);
        for w in derive_weights(&[0.7, 0.7, 0.7]).unwrap().as_slice() {
            assert!((w - 1.0 / 3.0).abs() < 1e-15);
        }
        assert_eq!(derive_weights(&[1.0, 0.0, 0.0]).unwrap().as_slice(), &[1.0, 0.0, 0.0]);
        assert!(matches!(derive_weights(&[0.0, 0.0, 0.0]), Err(Error::Degenerate(_))));
    }

    #[test]
    fn weighted_average_hand_values() {
        let w = FusionWeights::from_raw(&[0.5, 0.25, 0.25]).unwrap();
        let r = fuse_weighted_average(&preds([Some(0.9), Some(0.6), Some(0.7)]), &w).unwrap();
        assert!((r.positive() - 0.775).abs() < 1e-12);
        assert_eq!((r.label, r.confidence), (1, 1.0));

        let r = fuse_weighted_average(&preds([None, Some(0.6), Some(0.7)]), &w).unwrap();
        assert!((r.positive() - 0.65).abs() < 1e-12);
        assert_eq!(r.confidence, 0.5);
        assert_eq!(r.modalities_used, vec![Cognitive, Biomarker]);

        let same = fuse_weighted_average(&preds([Some(0.3); 3]), &FusionWeights::equal(3)).unwrap();
        assert!((same.positive() - 0.3).abs() < 1e-12);
        assert_eq!(same.confidence, 1.0);
    }

    #[test]
    fn all_missing_is_no_input() {
        let w = FusionWeights::equal(3);
        let none = preds([None, None, None]);
        assert!(matches!(fuse_weighted_average(&none, &w), Err(Error::NoInput)));
        assert!(matches!(fuse_majority_vote(&none, &w), Err(Error::NoInput)));
        assert!(matches!(fuse_logit_pool(&none, 0.5), Err(Error::NoInput)));
        let st = StackerModel::with_parameters(vec![1.0; 3], 0.0);
        assert!(matches!(fuse_stacked(&st, &none), Err(Error::NoInput)));
    }

    #[test]
    fn majority_examples() {
        let w = FusionWeights::equal(3);
        let r = fuse_majority_vote(&preds([Some(0.8), Some(0.7), Some(0.1)]), &w).unwrap();
        assert_eq!(r.label, 1);
        assert!((r.positive() - 0.75).abs() < 1e-12);
        let r = fuse_majority_vote(&preds([Some(0.1), Some(0.2), Some(0.3)]), &w).unwrap();
        assert_eq!((r.label, r.confidence), (0, 1.0));

        let r = fuse_majority_vote(&preds([None, Some(0.8), Some(0.2)]), &w).unwrap();
        assert_eq!(r.strategy, "majority(weighted-fallback)");
        assert!((r.positive() - 0.5).abs() < 1e-12);
        assert_eq!(r.label, 1);
        assert!((r.confidence - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn logit_pool_examples() {
        let r = fuse_logit_pool(&preds([Some(0.5); 3]), 0.5).unwrap();
        assert!((r.positive() - 0.5).abs() < 1e-15);
        let r = fuse_logit_pool(&preds([Some(0.8); 3]), 0.5).unwrap();
        assert!((r.positive() - 64.0 / 65.0).abs() < 1e-12);
        let r = fuse_logit_pool(&preds([None, Some(0.37), None]), 0.5).unwrap();
        assert!((r.positive() - 0.37).abs() < 1e-12);
        assert!((r.confidence - 1.0 / 3.0).abs() < 1e-15);
        assert!(fuse_logit_pool(&preds([Some(0.5); 3]), 1.0).is_err());
    }

    #[test]
    fn logit_pool_clamps_certainty() {
        let r = fuse_logit_pool(&preds([Some(1.0), Some(0.0), Some(1.0)]), 0.5).unwrap();
        assert!(r.probabilities.iter().all(|v| v.is_finite()));
        assert!((r.positive() - (1.0 - LOGIT_CLAMP)).abs() < 1e-9);
    }

    #[test]
    fn stacked_examples() {
        let zero = StackerModel::with_parameters(vec![0.0; 3], 0.0);
        let r = fuse_stacked(&zero, &preds([Some(0.9), None, Some(0.1)])).unwrap();
        assert_eq!(r.positive(), 0.5);

        let m = StackerModel::with_parameters(vec![10.0, 0.0, 0.0], -5.0);
        let lo = fuse_stacked(&m, &preds([Some(0.2), Some(0.9), Some(0.9)])).unwrap();
        let hi = fuse_stacked(&m, &preds([Some(0.8), Some(0.1), Some(0.1)])).unwrap();
        assert!((lo.positive() - 1.0 / (1.0 + 3f64.exp())).abs() < 1e-12);
        assert!((lo.positive() - 0.047).abs() < 5e-4);
        assert!((hi.positive() - 0.953).abs() < 5e-4);

        let untrained = StackerModel::default();
        assert!(matches!(fuse_stacked(&untrained, &preds([Some(0.5); 3])), Err(Error::State(_))));
    }

    #[test]
    fn stacker_separable_and_xor() {
        let mut feats = Vec::new();
        let mut labels = Vec::new();
        for i in 0..20 {
            let t = i as f64 / 19.0;
            feats.push(vec![0.6 + 0.4 * t, 0.5, 1.0 - t]);
            labels.push(1);
            feats.push(vec![0.4 * t, 0.5, t]);
            labels.push(0);
        }
        let m = train_stacker(&feats, &labels).unwrap();
        let correct = feats
            .iter()
            .zip(&labels)
            .filter(|(x, &y)| usize::from(m.predict(x) >= 0.5) == y)
            .count();
        assert_eq!(correct, feats.len());

        let xor = vec![vec![0.0, 0.0, 0.5], vec![1.0, 1.0, 0.5], vec![0.0, 1.0, 0.5], vec![1.0, 0.0, 0.5]];
        let m = train_stacker(&xor, &[0, 0, 1, 1]).unwrap();
        let correct = xor
            .iter()
            .zip([0, 0, 1, 1])
            .filter(|(x, y)| usize::from(m.predict(x) >= 0.5) == *y)
            .count();
        assert!(correct <= 3);

        assert!(matches!(train_stacker(&xor, &[1, 1, 1, 1]), Err(Error::Data(_))));
    }
}

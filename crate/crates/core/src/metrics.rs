//! Binary classification metrics and the per-model results table.

use std::fmt::Write as _;

use serde::{Serialize, Serializer};

use crate::error::{Error, Result};

/// Default decision threshold on the positive-class probability.
pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ConfusionMatrix {
    pub true_pos: usize,
    pub false_pos: usize,
    pub false_neg: usize,
    pub true_neg: usize,
}

impl ConfusionMatrix {
    pub fn total(&self) -> usize {
        self.true_pos + self.false_pos + self.false_neg + self.true_neg
    }
}

fn check_inputs(scores: &[f64], labels: &[usize]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::Data(format!("{} scores but {} labels", scores.len(), labels.len())));
    }
    if scores.is_empty() {
        return Err(Error::Data("no scores to evaluate".into()));
    }
    if let Some(i) = labels.iter().position(|&l| l > 1) {
        return Err(Error::Data(format!("label {} at index {i} is not 0 or 1", labels[i])));
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::Data(format!("score at index {i} is not finite")));
    }
    Ok(())
}

fn check_both_classes(labels: &[usize]) -> Result<(usize, usize)> {
    let pos = labels.iter().filter(|&&l| l == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Data("ROC requires both classes among the labels".into()));
    }
    Ok((pos, neg))
}

/// Predicts positive iff `score >= threshold`.
pub fn confusion_at_threshold(scores: &[f64], labels: &[usize], threshold: f64) -> Result<ConfusionMatrix> {
    check_inputs(scores, labels)?;
    let mut cm = ConfusionMatrix { true_pos: 0, false_pos: 0, false_neg: 0, true_neg: 0 };
    for (&s, &l) in scores.iter().zip(labels) {
        match (s >= threshold, l == 1) {
            (true, true) => cm.true_pos += 1,
            (true, false) => cm.false_pos += 1,
            (false, true) => cm.false_neg += 1,
            (false, false) => cm.true_neg += 1,
        }
    }
    Ok(cm)
}

/// Set when the corresponding ratio had a zero denominator and was reported as 0.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct DegenerateFlags {
    pub precision: bool,
    pub recall: bool,
    pub f1: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ClassificationMetrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub degenerate: DegenerateFlags,
}

fn ratio(num: usize, den: usize) -> (f64, bool) {
    if den == 0 {
        (0.0, true)
    } else {
        (num as f64 / den as f64, false)
    }
}

/// Harmonic mean of precision and recall; `(0, true)` when both are zero.
pub fn f1_score(precision: f64, recall: f64) -> (f64, bool) {
    let sum = precision + recall;
    if sum > 0.0 {
        (2.0 * precision * recall / sum, false)
    } else {
        (0.0, true)
    }
}

pub fn classification_metrics(cm: &ConfusionMatrix) -> Result<ClassificationMetrics> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::Data("empty confusion matrix".into()));
    }
    let (precision, p_flag) = ratio(cm.true_pos, cm.true_pos + cm.false_pos);
    let (recall, r_flag) = ratio(cm.true_pos, cm.true_pos + cm.false_neg);
    let (f1, f_flag) = f1_score(precision, recall);
    Ok(ClassificationMetrics {
        accuracy: (cm.true_pos + cm.true_neg) as f64 / total as f64,
        precision,
        recall,
        f1,
        degenerate: DegenerateFlags { precision: p_flag, recall: r_flag, f1: f_flag },
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
}

/// ROC curve from `(0,0)` to `(1,1)`, one step per distinct score.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RocPoints(pub Vec<RocPoint>);

impl RocPoints {
    pub fn points(&self) -> &[RocPoint] {
        &self.0
    }

    /// Trapezoidal area under the curve.
    pub fn area(&self) -> f64 {
        self.0
            .windows(2)
            .map(|w| (w[1].fpr - w[0].fpr) * (w[0].tpr + w[1].tpr) / 2.0)
            .sum()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("fpr,tpr\n");
        for p in &self.0 {
            let _ = writeln!(out, "{},{}", p.fpr, p.tpr);
        }
        out
    }
}

/// Thresholds swept over distinct scores in descending order; tied scores
/// move along a single diagonal step.
pub fn roc_points(scores: &[f64], labels: &[usize]) -> Result<RocPoints> {
    check_inputs(scores, labels)?;
    let (pos, neg) = check_both_classes(labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = vec![RocPoint { fpr: 0.0, tpr: 0.0 }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(RocPoint { fpr: fp as f64 / neg as f64, tpr: tp as f64 / pos as f64 });
    }
    Ok(RocPoints(points))
}

pub fn auc_score(scores: &[f64], labels: &[usize]) -> Result<f64> {
    Ok(roc_points(scores, labels)?.area())
}

/// Scores and labels for one named model.
#[derive(Debug, Clone, Copy)]
pub struct ScoredSet<'a> {
    pub name: &'a str,
    pub scores: &'a [f64],
    pub labels: &'a [usize],
}

fn rounded<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.serialize_f64((v * 1e6).round() / 1e6)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsRow {
    pub model: String,
    #[serde(serialize_with = "rounded")]
    pub accuracy: f64,
    #[serde(serialize_with = "rounded")]
    pub precision: f64,
    #[serde(serialize_with = "rounded")]
    pub recall: f64,
    #[serde(serialize_with = "rounded")]
    pub f1: f64,
    #[serde(serialize_with = "rounded")]
    pub auc_roc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub dataset: String,
    pub seed: u64,
    pub threshold: f64,
    pub rows: Vec<MetricsRow>,
}

impl MetricsReport {
    pub fn row(&self, model: &str) -> Option<&MetricsRow> {
        self.rows.iter().find(|r| r.model == model)
    }

    /// Aligned plain-text table.
    pub fn to_text(&self) -> String {
        let width = self.rows.iter().map(|r| r.model.len()).max().unwrap_or(0).max("Model".len());
        let mut out = format!(
            "{:<width$}  {:>8}  {:>9}  {:>6}  {:>6}  {:>7}\n",
            "Model", "Accuracy", "Precision", "Recall", "F1", "AUC-ROC"
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<width$}  {:>8.4}  {:>9.4}  {:>6.4}  {:>6.4}  {:>7.4}",
                r.model, r.accuracy, r.precision, r.recall, r.f1, r.auc_roc
            );
        }
        out
    }
}

/// One row per set, in the order given.
pub fn build_report(sets: &[ScoredSet], threshold: f64, dataset: &str, seed: u64) -> Result<MetricsReport> {
    let rows = sets
        .iter()
        .map(|set| {
            let cm = confusion_at_threshold(set.scores, set.labels, threshold)?;
            let m = classification_metrics(&cm)?;
            Ok(MetricsRow {
                model: set.name.to_owned(),
                accuracy: m.accuracy,
                precision: m.precision,
                recall: m.recall,
                f1: m.f1,
                auc_roc: auc_score(set.scores, set.labels)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricsReport { dataset: dataset.to_owned(), seed, threshold, rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn confusion_examples() {
        let cm = confusion_at_threshold(&[0.9, 0.4, 0.6, 0.2], &[1, 1, 0, 0], 0.5).unwrap();
        assert_eq!(cm, ConfusionMatrix { true_pos: 1, false_pos: 1, false_neg: 1, true_neg: 1 });
        let all = confusion_at_threshold(&[0.9, 0.0, 0.6], &[1, 1, 0], 0.0).unwrap();
        assert_eq!((all.false_neg, all.true_neg), (0, 0));
        assert_eq!(classification_metrics(&all).unwrap().recall, 1.0);
        let none = confusion_at_threshold(&[0.9, 1.0, 0.6], &[1, 1, 0], 1.5).unwrap();
        assert_eq!((none.true_pos, none.false_pos), (0, 0));
        assert!(matches!(confusion_at_threshold(&[0.1], &[1, 0], 0.5), Err(Error::Data(_))));
    }

    #[test]
    fn ratios_by_hand() {
        let cm = ConfusionMatrix { true_pos: 3, false_pos: 1, false_neg: 2, true_neg: 4 };
        let m = classification_metrics(&cm).unwrap();
        assert_eq!((m.precision, m.recall, m.accuracy), (0.75, 0.6, 0.7));
        assert!((m.f1 - 0.9 / 1.35).abs() < 1e-12);
        assert_eq!(m.degenerate, DegenerateFlags::default());

        let cm = ConfusionMatrix { true_pos: 0, false_pos: 0, false_neg: 2, true_neg: 4 };
        let m = classification_metrics(&cm).unwrap();
        assert_eq!(m.precision, 0.0);
        assert!(m.degenerate.precision && m.degenerate.f1 && !m.degenerate.recall);
    }

    #[test]
    fn roc_examples() {
        let roc = roc_points(&[0.9, 0.4, 0.8, 0.3], &[1, 1, 0, 0]).unwrap();
        let pts: Vec<(f64, f64)> = roc.points().iter().map(|p| (p.fpr, p.tpr)).collect();
        assert_eq!(pts, vec![(0.0, 0.0), (0.0, 0.5), (0.5, 0.5), (0.5, 1.0), (1.0, 1.0)]);
        assert_eq!(roc.area(), 0.75);

        let perfect = roc_points(&[0.9, 0.8, 0.2], &[1, 1, 0]).unwrap();
        let pts: Vec<(f64, f64)> = perfect.points().iter().map(|p| (p.fpr, p.tpr)).collect();
        assert_eq!(pts, vec![(0.0, 0.0), (0.0, 0.5), (0.0, 1.0), (1.0, 1.0)]);
        assert_eq!(perfect.area(), 1.0);

        let flat = roc_points(&[0.3; 4], &[1, 0, 1, 0]).unwrap();
        assert_eq!(flat.points().len(), 2);
        assert_eq!(auc_score(&[0.5, 0.5], &[1, 0]).unwrap(), 0.5);
        assert!(matches!(roc_points(&[0.1, 0.2], &[1, 1]), Err(Error::Data(_))));
    }

    #[test]
    fn report_text_columns() {
        let set = ScoredSet { name: "MRI (CNN)", scores: &[0.9, 0.2, 0.7, 0.4], labels: &[1, 0, 1, 0] };
        let rep = build_report(&[set, ScoredSet { name: "fused", ..set }], 0.5, "synthetic", 42).unwrap();
        let header = rep.to_text().lines().next().unwrap().split_whitespace().collect::<Vec<_>>().join(" ");
        assert_eq!(header, "Model Accuracy Precision Recall F1 AUC-ROC");
        assert_eq!(rep.rows[0].accuracy, rep.rows[1].accuracy);
        assert_eq!(rep.rows[0].auc_roc, 1.0);
    }
}

//! Z-scoring with statistics fitted on the training split only.

use std::hash::{DefaultHasher, Hash, Hasher};

use serde::{Deserialize, Serialize};

use super::{DatasetGeometry, TrimodalDataset, IMAGE_CHANNELS};
use crate::error::{Error, Result};
use crate::modalities::Modality;
use crate::nn::Tensor;

/// Lower bound on every stored standard deviation.
pub const STD_FLOOR: f64 = 1e-8;

/// Per-feature (sequences) and per-channel (images) moments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub image_mean: Vec<f64>,
    pub image_std: Vec<f64>,
    pub cognitive_mean: Vec<f64>,
    pub cognitive_std: Vec<f64>,
    pub biomarker_mean: Vec<f64>,
    pub biomarker_std: Vec<f64>,
    /// Description of the split the moments were fitted on.
    pub fitted_on: String,
}

impl NormalizationStats {
    /// Zero mean, unit deviation for every feature of `geometry`.
    pub fn identity(geometry: &DatasetGeometry) -> Self {
        Self {
            image_mean: vec![0.0; IMAGE_CHANNELS],
            image_std: vec![1.0; IMAGE_CHANNELS],
            cognitive_mean: vec![0.0; geometry.cognitive_features],
            cognitive_std: vec![1.0; geometry.cognitive_features],
            biomarker_mean: vec![0.0; geometry.biomarker_features],
            biomarker_std: vec![1.0; geometry.biomarker_features],
            fitted_on: "identity".into(),
        }
    }

    pub fn moments(&self, m: Modality) -> (&[f64], &[f64]) {
        match m {
            Modality::Image => (&self.image_mean, &self.image_std),
            Modality::Cognitive => (&self.cognitive_mean, &self.cognitive_std),
            Modality::Biomarker => (&self.biomarker_mean, &self.biomarker_std),
        }
    }

    fn moments_mut(&mut self, m: Modality) -> (&mut Vec<f64>, &mut Vec<f64>) {
        match m {
            Modality::Image => (&mut self.image_mean, &mut self.image_std),
            Modality::Cognitive => (&mut self.cognitive_mean, &mut self.cognitive_std),
            Modality::Biomarker => (&mut self.biomarker_mean, &mut self.biomarker_std),
        }
    }

    /// Set a modality's moments; deviations are floored.
    pub fn set_moments(&mut self, m: Modality, mean: Vec<f64>, std: Vec<f64>) {
        let (mu, sd) = self.moments_mut(m);
        *mu = mean;
        *sd = std.into_iter().map(|s| s.max(STD_FLOOR)).collect();
    }

    /// Identifies this exact set of moments.
    pub fn fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for m in Modality::ALL {
            let (mu, sd) = self.moments(m);
            for v in mu.iter().chain(sd) {
                v.to_bits().hash(&mut h);
            }
        }
        self.fitted_on.hash(&mut h);
        h.finish()
    }

    /// Z-scores one sample along its last axis.
    pub fn normalize(&self, m: Modality, sample: &Tensor) -> Result<Tensor> {
        let (mu, sd) = self.moments(m);
        let width = *sample.shape().last().expect("rank >= 1");
        if width != mu.len() {
            return Err(Error::dim("normalize", &[width], &[mu.len()]));
        }
        let mut out = sample.clone();
        for row in out.data_mut().chunks_mut(width) {
            for ((v, m), s) in row.iter_mut().zip(mu).zip(sd) {
                *v = (*v - m) / s;
            }
        }
        Ok(out)
    }
}

fn feature_moments<'a>(samples: impl Iterator<Item = &'a Tensor>, width: usize) -> (Vec<f64>, Vec<f64>) {
    let rows: Vec<&[f64]> = samples.flat_map(|t| t.data().chunks(width)).collect();
    if rows.is_empty() {
        return (vec![0.0; width], vec![1.0; width]);
    }
    let n = rows.len() as f64;
    let mut mean = vec![0.0; width];
    for r in &rows {
        mean.iter_mut().zip(*r).for_each(|(m, v)| *m += v / n);
    }
    let mut var = vec![0.0; width];
    for r in &rows {
        var.iter_mut().zip(*r).zip(&mean).for_each(|((s, v), m)| *s += (v - m) * (v - m) / n);
    }
    (mean, var.into_iter().map(f64::sqrt).collect())
}

/// Population moments over every present sample of `train`.
pub fn fit_normalization(train: &TrimodalDataset) -> NormalizationStats {
    let mut stats = NormalizationStats::identity(&train.geometry);
    stats.fitted_on = format!("{} ({} subjects)", train.provenance, train.len());
    for m in Modality::ALL {
        let width = match m {
            Modality::Image => IMAGE_CHANNELS,
            Modality::Cognitive => train.geometry.cognitive_features,
            Modality::Biomarker => train.geometry.biomarker_features,
        };
        let (mean, std) = feature_moments(train.subjects.iter().filter_map(|s| s.modality(m)), width);
        stats.set_moments(m, mean, std);
    }
    stats
}

/// Normalized copy of `ds`, tagged with the fingerprint of `stats`.
pub fn apply_normalization(stats: &NormalizationStats, ds: &TrimodalDataset) -> Result<TrimodalDataset> {
    if ds.normalized_by.is_some() {
        return Err(Error::State("dataset is already normalized".into()));
    }
    let mut out = ds.clone();
    for s in &mut out.subjects {
        for m in Modality::ALL {
            if let Some(t) = s.modality_mut(m) {
                *t = stats.normalize(m, t)?;
            }
        }
    }
    out.normalized_by = Some(stats.fingerprint());
    Ok(out)
}

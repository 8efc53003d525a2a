//! Seeded synthetic subjects with a latent disease severity.

use serde::{Deserialize, Serialize};

use super::{DatasetGeometry, SubjectRecord, TrimodalDataset, IMAGE_CHANNELS};
use crate::error::{Error, Result};
use crate::nn::{Rng, Tensor};

const AD_SEVERITY: (f64, f64) = (0.5, 1.0);
const CONTROL_SEVERITY: (f64, f64) = (0.0, 0.3);
const IMAGE_NOISE: f64 = 0.1;
const COGNITIVE_DECLINE: [f64; 3] = [2.5, 3.0, 2.0];
const COGNITIVE_NOISE: f64 = 0.8;
/// `(baseline, amplitude)` per biomarker feature.
const BIOMARKER_CURVES: [(f64, f64); 3] = [(0.3, 0.6), (0.2, 0.7), (0.1, 0.5)];
const BIOMARKER_NOISE: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_subjects: usize,
    pub geometry: DatasetGeometry,
    pub prevalence: f64,
    pub corruption_rate: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self { n_subjects: 1000, geometry: DatasetGeometry::default(), prevalence: 0.5, corruption_rate: 0.15 }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        self.geometry.validate()?;
        if self.n_subjects < 4 {
            return Err(Error::Parameter(format!("need at least 4 subjects, got {}", self.n_subjects)));
        }
        if !(0.0..=1.0).contains(&self.prevalence) {
            return Err(Error::Parameter(format!("prevalence {} outside [0, 1]", self.prevalence)));
        }
        if !(0.0..=1.0).contains(&self.corruption_rate) {
            return Err(Error::Parameter(format!("corruption rate {} outside [0, 1]", self.corruption_rate)));
        }
        Ok(())
    }
}

fn render_image(side: usize, severity: f64, rng: &mut Rng) -> Tensor {
    let square = side / 3;
    let lo = (side - square) / 2;
    let inside = lo..lo + square;
    let mut data = Vec::with_capacity(side * side * IMAGE_CHANNELS);
    for y in 0..side {
        for x in 0..side {
            let v = if inside.contains(&y) && inside.contains(&x) {
                1.0 - severity + rng.normal(0.0, IMAGE_NOISE)
            } else {
                rng.normal(0.0, IMAGE_NOISE)
            };
            data.extend([v; IMAGE_CHANNELS]);
        }
    }
    Tensor::new(vec![side, side, IMAGE_CHANNELS], data).expect("image shape")
}

fn render_cognitive(steps: usize, features: usize, severity: f64, rng: &mut Rng) -> Tensor {
    let mut data = Vec::with_capacity(steps * features);
    for t in 0..steps {
        for j in 0..features {
            let d = COGNITIVE_DECLINE[j % COGNITIVE_DECLINE.len()];
            let raw = 29.0 - d * t as f64 * severity + rng.normal(0.0, COGNITIVE_NOISE);
            data.push((raw / 30.0).clamp(0.0, 1.0));
        }
    }
    Tensor::new(vec![steps, features], data).expect("sequence shape")
}

fn render_biomarker(steps: usize, features: usize, severity: f64, rng: &mut Rng) -> Tensor {
    let mut data = Vec::with_capacity(steps * features);
    for t in 0..steps {
        let saturation = 1.0 - (-(t as f64) / 2.0).exp();
        for j in 0..features {
            let (b, a) = BIOMARKER_CURVES[j % BIOMARKER_CURVES.len()];
            data.push(b + a * severity * saturation + rng.normal(0.0, BIOMARKER_NOISE));
        }
    }
    Tensor::new(vec![steps, features], data).expect("sequence shape")
}

/// Deterministic trimodal cohort. Exactly `round(prevalence · n)` subjects
/// are positive. Each modality of each subject is independently replaced,
/// with probability `corruption_rate`, by a rendering from a fresh severity
/// drawn uniformly from `[0, 1)` that carries no label information.
pub fn generate_trimodal(seed: u64, spec: &SyntheticSpec) -> Result<TrimodalDataset> {
    spec.validate()?;
    let g = spec.geometry;
    let n = spec.n_subjects;
    let n_pos = (spec.prevalence * n as f64).round() as usize;
    let mut labels: Vec<usize> = (0..n).map(|i| usize::from(i < n_pos)).collect();
    Rng::derive(seed, 0x1abe1).shuffle(&mut labels);

    let mut severity_rng = Rng::derive(seed, 0x5e7e);
    let mut corrupt_rng = Rng::derive(seed, 0xc0de);
    let mut image_rng = Rng::derive(seed, 0x1a6e);
    let mut cognitive_rng = Rng::derive(seed, 0xc061);
    let mut biomarker_rng = Rng::derive(seed, 0xb10);

    let width = n.to_string().len().max(4);
    let subjects = labels
        .into_iter()
        .enumerate()
        .map(|(i, label)| {
            let (lo, hi) = if label == 1 { AD_SEVERITY } else { CONTROL_SEVERITY };
            let severity = severity_rng.uniform_range(lo, hi);
            let mut corrupted = [false; 3];
            let mut effective = [severity; 3];
            for k in 0..3 {
                corrupted[k] = corrupt_rng.bernoulli(spec.corruption_rate);
                let fresh = corrupt_rng.uniform();
                if corrupted[k] {
                    effective[k] = fresh;
                }
            }
            SubjectRecord {
                id: format!("S{i:0width$}"),
                image: Some(render_image(g.height, effective[0], &mut image_rng)),
                cognitive: Some(render_cognitive(g.cognitive_steps, g.cognitive_features, effective[1], &mut cognitive_rng)),
                biomarker: Some(render_biomarker(g.biomarker_steps, g.biomarker_features, effective[2], &mut biomarker_rng)),
                label,
                corrupted,
            }
        })
        .collect();

    Ok(TrimodalDataset {
        subjects,
        geometry: g,
        provenance: format!(
            "synthetic(n={n}, prevalence={}, corruption={})",
            spec.prevalence, spec.corruption_rate
        ),
        seed,
        normalized_by: None,
    })
}

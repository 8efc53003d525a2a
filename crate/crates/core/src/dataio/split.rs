//! Stratified train/validation/test partition.

use serde::{Deserialize, Serialize};

use super::TrimodalDataset;
use crate::error::{Error, Result};
use crate::nn::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self { train: 0.70, val: 0.15, test: 0.15 }
    }
}

impl SplitRatios {
    fn as_array(&self) -> [f64; 3] {
        [self.train, self.val, self.test]
    }

    pub fn validate(&self) -> Result<()> {
        let r = self.as_array();
        if r.iter().any(|v| !(*v > 0.0)) || (r.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Parameter(format!("split ratios {r:?} must be positive and sum to 1")));
        }
        Ok(())
    }
}

/// Subject positions in the source dataset, ascending within each split.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl SplitIndices {
    pub fn parts(&self) -> [&[usize]; 3] {
        [&self.train, &self.val, &self.test]
    }
}

/// Within each class, subjects are shuffled by `seed` and split by
/// `floor(ratio · n_class)`. Leftover subjects go one at a time to the split
/// whose overall count trails its target `ratio · n` the most (ties in
/// train, val, test order), so class-balanced cohorts hit the global
/// proportions exactly.
pub fn split_dataset(ds: &TrimodalDataset, ratios: SplitRatios, seed: u64) -> Result<SplitIndices> {
    ratios.validate()?;
    let r = ratios.as_array();
    let n = ds.len() as f64;
    let mut rng = Rng::derive(seed, 0x5b1);
    let mut classes: [Vec<usize>; 2] = [Vec::new(), Vec::new()];
    for (i, s) in ds.subjects.iter().enumerate() {
        classes.get_mut(s.label).ok_or_else(|| Error::Data(format!("label {} is not 0 or 1", s.label)))?.push(i);
    }

    let mut counts = [[0usize; 3]; 2];
    let mut totals = [0usize; 3];
    for (c, members) in classes.iter_mut().enumerate() {
        rng.shuffle(members);
        for s in 0..3 {
            counts[c][s] = (r[s] * members.len() as f64).floor() as usize;
            totals[s] += counts[c][s];
        }
    }
    for (c, members) in classes.iter().enumerate() {
        let leftover = members.len() - counts[c].iter().sum::<usize>();
        for _ in 0..leftover {
            let lag = |s: usize| r[s] * n - totals[s] as f64;
            let pick = (0..3).fold(0, |best, s| if lag(s) > lag(best) { s } else { best });
            counts[c][pick] += 1;
            totals[pick] += 1;
        }
    }

    let mut parts: [Vec<usize>; 3] = Default::default();
    for (c, members) in classes.iter().enumerate() {
        let mut start = 0;
        for s in 0..3 {
            parts[s].extend_from_slice(&members[start..start + counts[c][s]]);
            start += counts[c][s];
        }
    }
    const NAMES: [&str; 3] = ["train", "val", "test"];
    for (s, part) in parts.iter_mut().enumerate() {
        part.sort_unstable();
        for c in 0..2 {
            if counts[c][s] == 0 {
                return Err(Error::Split(format!("{} split has no subjects of class {c}", NAMES[s])));
            }
        }
    }
    let [train, val, test] = parts;
    Ok(SplitIndices { train, val, test })
}

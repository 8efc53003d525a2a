//! Subject records, synthetic generation, on-disk formats, splitting,
//! normalization and model checkpoints.

mod checkpoint;
mod files;
mod normalize;
mod split;
mod synth;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint, MAGIC, VERSION};
pub use files::{
    export_dataset, load_dataset_dir, load_image_dataset, load_pgm, load_sequence_dataset, write_manifest, write_pgm,
    write_sequence_csv, DatasetFiles, LoadedModality,
};
pub use normalize::{apply_normalization, fit_normalization, NormalizationStats, STD_FLOOR};
pub use split::{split_dataset, SplitIndices, SplitRatios};
pub use synth::{generate_trimodal, SyntheticSpec};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::modalities::{validate_image_side, InputGeometry, LabeledSamples, Modality};
use crate::nn::Tensor;

/// Channels of every image sample.
pub const IMAGE_CHANNELS: usize = 3;

/// Shapes shared by all subjects of a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetGeometry {
    pub height: usize,
    pub width: usize,
    pub cognitive_steps: usize,
    pub cognitive_features: usize,
    pub biomarker_steps: usize,
    pub biomarker_features: usize,
}

impl Default for DatasetGeometry {
    fn default() -> Self {
        Self {
            height: 32,
            width: 32,
            cognitive_steps: 6,
            cognitive_features: 3,
            biomarker_steps: 4,
            biomarker_features: 3,
        }
    }
}

impl DatasetGeometry {
    pub fn validate(&self) -> Result<()> {
        if self.height != self.width {
            return Err(Error::Geometry(format!("image must be square, got {}x{}", self.width, self.height)));
        }
        validate_image_side(self.height)?;
        let dims = [self.cognitive_steps, self.cognitive_features, self.biomarker_steps, self.biomarker_features];
        if dims.contains(&0) {
            return Err(Error::Geometry(format!("sequence dimensions must be positive: {dims:?}")));
        }
        Ok(())
    }

    pub fn input(&self, modality: Modality) -> InputGeometry {
        match modality {
            Modality::Image => InputGeometry::Image { side: self.height, channels: IMAGE_CHANNELS },
            Modality::Cognitive => {
                InputGeometry::Sequence { steps: self.cognitive_steps, features: self.cognitive_features }
            }
            Modality::Biomarker => {
                InputGeometry::Sequence { steps: self.biomarker_steps, features: self.biomarker_features }
            }
        }
    }

    /// `(h, w, T_c, f_c, T_b, f_b)`.
    pub fn as_array(&self) -> [usize; 6] {
        [
            self.height,
            self.width,
            self.cognitive_steps,
            self.cognitive_features,
            self.biomarker_steps,
            self.biomarker_features,
        ]
    }

    pub fn from_array(a: [usize; 6]) -> Self {
        Self {
            height: a[0],
            width: a[1],
            cognitive_steps: a[2],
            cognitive_features: a[3],
            biomarker_steps: a[4],
            biomarker_features: a[5],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubjectRecord {
    pub id: String,
    pub image: Option<Tensor>,
    pub cognitive: Option<Tensor>,
    pub biomarker: Option<Tensor>,
    pub label: usize,
    /// Per-modality flag: the signal was replaced by label-independent noise.
    pub corrupted: [bool; 3],
}

impl SubjectRecord {
    pub fn modality(&self, m: Modality) -> Option<&Tensor> {
        match m {
            Modality::Image => self.image.as_ref(),
            Modality::Cognitive => self.cognitive.as_ref(),
            Modality::Biomarker => self.biomarker.as_ref(),
        }
    }

    pub fn modality_mut(&mut self, m: Modality) -> &mut Option<Tensor> {
        match m {
            Modality::Image => &mut self.image,
            Modality::Cognitive => &mut self.cognitive,
            Modality::Biomarker => &mut self.biomarker,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrimodalDataset {
    pub subjects: Vec<SubjectRecord>,
    pub geometry: DatasetGeometry,
    pub provenance: String,
    pub seed: u64,
    /// Fingerprint of the statistics last applied, if any.
    pub normalized_by: Option<u64>,
}

impl TrimodalDataset {
    /// Checks unique ids, label range, at least one modality per subject,
    /// and every present tensor against the geometry.
    pub fn validate(&self) -> Result<()> {
        self.geometry.validate()?;
        let mut seen = std::collections::BTreeSet::new();
        for s in &self.subjects {
            if !seen.insert(s.id.as_str()) {
                return Err(Error::Data(format!("duplicate subject id {}", s.id)));
            }
            if s.label > 1 {
                return Err(Error::Data(format!("subject {}: label {} is not 0 or 1", s.id, s.label)));
            }
            if Modality::ALL.iter().all(|&m| s.modality(m).is_none()) {
                return Err(Error::Data(format!("subject {} has no modality", s.id)));
            }
            for m in Modality::ALL {
                if let Some(t) = s.modality(m) {
                    let want = self.geometry.input(m).sample_shape();
                    if t.shape() != want.as_slice() {
                        return Err(Error::dim("subject geometry", t.shape(), &want));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.subjects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subjects.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.subjects.iter().map(|s| s.label).collect()
    }

    /// Subjects at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            subjects: indices.iter().map(|&i| self.subjects[i].clone()).collect(),
            ..self.clone_empty()
        }
    }

    fn clone_empty(&self) -> Self {
        Self {
            subjects: Vec::new(),
            geometry: self.geometry,
            provenance: self.provenance.clone(),
            seed: self.seed,
            normalized_by: self.normalized_by,
        }
    }

    /// Samples of one modality from the subjects that have it.
    pub fn samples(&self, m: Modality) -> LabeledSamples {
        let (inputs, labels) = self
            .subjects
            .iter()
            .filter_map(|s| s.modality(m).map(|t| (t.clone(), s.label)))
            .unzip();
        LabeledSamples { inputs, labels }
    }

    /// Removes one modality from every subject.
    pub fn drop_modality(&mut self, m: Modality) {
        for s in &mut self.subjects {
            *s.modality_mut(m) = None;
        }
    }
}

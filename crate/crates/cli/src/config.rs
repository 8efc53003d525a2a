//! Run configuration: one JSON document, overridden field-by-field by flags.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use trimodal_core::dataio::{DatasetGeometry, SplitRatios, SyntheticSpec};
use trimodal_core::fusion::Strategy;
use trimodal_core::modalities::{Modality, TrainConfig};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    pub n_subjects: usize,
    pub geometry: DatasetGeometry,
    pub prevalence: f64,
    pub corruption_rate: f64,
    pub split: SplitRatios,
}

impl Default for DatasetSection {
    fn default() -> Self {
        let s = SyntheticSpec::default();
        Self {
            n_subjects: s.n_subjects,
            geometry: s.geometry,
            prevalence: s.prevalence,
            corruption_rate: s.corruption_rate,
            split: SplitRatios::default(),
        }
    }
}

impl DatasetSection {
    pub fn synthetic(&self) -> SyntheticSpec {
        SyntheticSpec {
            n_subjects: self.n_subjects,
            geometry: self.geometry,
            prevalence: self.prevalence,
            corruption_rate: self.corruption_rate,
        }
    }
}

/// Per-branch optimisation settings. The branch seed is derived from the
/// run seed, never configured.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BranchTraining {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub patience: usize,
}

impl Default for BranchTraining {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self { epochs: t.epochs, batch_size: t.batch_size, learning_rate: t.learning_rate, patience: t.patience }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub image: BranchTraining,
    pub cognitive: BranchTraining,
    pub biomarker: BranchTraining,
}

impl TrainSection {
    pub fn branch(&self, m: Modality) -> &BranchTraining {
        match m {
            Modality::Image => &self.image,
            Modality::Cognitive => &self.cognitive,
            Modality::Biomarker => &self.biomarker,
        }
    }

    fn branch_mut(&mut self, m: Modality) -> &mut BranchTraining {
        match m {
            Modality::Image => &mut self.image,
            Modality::Cognitive => &mut self.cognitive,
            Modality::Biomarker => &mut self.biomarker,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionSection {
    pub strategy: Strategy,
    /// Manual weights in image, cognitive, biomarker order; derived from
    /// validation AUC when absent.
    pub weights: Option<[f64; 3]>,
    pub prior: f64,
}

impl Default for FusionSection {
    fn default() -> Self {
        Self { strategy: Strategy::Weighted, weights: None, prior: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsSection {
    pub workdir: PathBuf,
    /// Defaults to `<workdir>/checkpoints`.
    pub checkpoint_dir: Option<PathBuf>,
    /// Directory for report files; defaults to `<workdir>/report`.
    pub report_dir: Option<PathBuf>,
}

impl Default for PathsSection {
    fn default() -> Self {
        Self { workdir: PathBuf::from("run"), checkpoint_dir: None, report_dir: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub dataset: DatasetSection,
    pub train: TrainSection,
    pub fusion: FusionSection,
    pub paths: PathsSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            dataset: DatasetSection::default(),
            train: TrainSection::default(),
            fusion: FusionSection::default(),
            paths: PathsSection::default(),
        }
    }
}

/// Flag values that take precedence over the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub workdir: Option<PathBuf>,
    pub n_subjects: Option<usize>,
    pub image_side: Option<usize>,
    pub epochs: Option<usize>,
    pub strategy: Option<Strategy>,
    pub prior: Option<f64>,
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))
    }

    /// Built-in defaults, then the config file, then flags.
    pub fn resolve(config: Option<&Path>, flags: &Overrides) -> Result<Self, CliError> {
        let mut cfg = match config {
            Some(p) => Self::from_file(p)?,
            None => Self::default(),
        };
        if let Some(s) = flags.seed {
            cfg.seed = s;
        }
        if let Some(w) = &flags.workdir {
            cfg.paths.workdir = w.clone();
        }
        if let Some(n) = flags.n_subjects {
            cfg.dataset.n_subjects = n;
        }
        if let Some(side) = flags.image_side {
            cfg.dataset.geometry.height = side;
            cfg.dataset.geometry.width = side;
        }
        if let Some(e) = flags.epochs {
            for m in Modality::ALL {
                cfg.train.branch_mut(m).epochs = e;
            }
        }
        if let Some(s) = flags.strategy {
            cfg.fusion.strategy = s;
        }
        if let Some(p) = flags.prior {
            cfg.fusion.prior = p;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let usage = |e: trimodal_core::Error| CliError::Usage(format!("config: {e}"));
        self.dataset.synthetic().validate().map_err(usage)?;
        self.dataset.split.validate().map_err(usage)?;
        for m in Modality::ALL {
            self.train_config(m).validate().map_err(usage)?;
        }
        if !(self.fusion.prior > 0.0 && self.fusion.prior < 1.0) {
            return Err(CliError::Usage(format!("config: prior {} must lie in (0, 1)", self.fusion.prior)));
        }
        Ok(())
    }

    /// Branch seeds are the run seed plus 1, 2 and 3.
    pub fn branch_seed(&self, m: Modality) -> u64 {
        self.seed.wrapping_add(1 + m.index() as u64)
    }

    pub fn train_config(&self, m: Modality) -> TrainConfig {
        let b = self.train.branch(m);
        TrainConfig {
            epochs: b.epochs,
            batch_size: b.batch_size,
            learning_rate: b.learning_rate,
            seed: self.branch_seed(m),
            patience: b.patience,
        }
    }

    pub fn data_dir(&self) -> PathBuf {
        self.paths.workdir.join("data")
    }

    pub fn checkpoint_dir(&self) -> PathBuf {
        self.paths.checkpoint_dir.clone().unwrap_or_else(|| self.paths.workdir.join("checkpoints"))
    }

    pub fn report_dir(&self) -> PathBuf {
        self.paths.report_dir.clone().unwrap_or_else(|| self.paths.workdir.join("report"))
    }

    pub fn checkpoint_path(&self, m: Modality) -> PathBuf {
        self.checkpoint_dir().join(format!("{m}.tmf"))
    }

    pub fn checkpoint_meta_path(&self, m: Modality) -> PathBuf {
        self.checkpoint_dir().join(format!("{m}.meta.json"))
    }
}

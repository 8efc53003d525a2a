//! The three branch architectures, their shared training loop and
//! per-subject prediction.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::ModalityPrediction;
use crate::nn::{
    adam_step, softmax_cross_entropy, Activation, AdamState, Layer, LayerKind, Mode, Rng,
    Sequential, Tensor,
};

pub const NUM_CLASSES: usize = 2;
/// Inference batch size used by [`predict_batch`] and validation.
const EVAL_CHUNK: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Image,
    Cognitive,
    Biomarker,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Image, Modality::Cognitive, Modality::Biomarker];

    pub fn name(self) -> &'static str {
        match self {
            Modality::Image => "image",
            Modality::Cognitive => "cognitive",
            Modality::Biomarker => "biomarker",
        }
    }

    /// Position in [`Modality::ALL`]; also the on-disk checkpoint tag.
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    /// Row label used in reports.
    pub fn display_name(self) -> &'static str {
        match self {
            Modality::Image => "MRI (CNN)",
            Modality::Cognitive => "Cognitive (LSTM)",
            Modality::Biomarker => "Biomarkers (LSTM)",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "image" | "mri" => Ok(Modality::Image),
            "cognitive" => Ok(Modality::Cognitive),
            "biomarker" | "biomarkers" => Ok(Modality::Biomarker),
            other => Err(Error::Parameter(format!("unknown modality {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum InputGeometry {
    Image { side: usize, channels: usize },
    Sequence { steps: usize, features: usize },
}

impl InputGeometry {
    /// Shape of one sample (without the batch axis).
    pub fn sample_shape(&self) -> Vec<usize> {
        match *self {
            InputGeometry::Image { side, channels } => vec![side, side, channels],
            InputGeometry::Sequence { steps, features } => vec![steps, features],
        }
    }
}

/// One modality network with its input geometry.
#[derive(Debug, Clone)]
pub struct ModelSpec {
    pub modality: Modality,
    pub geometry: InputGeometry,
    pub network: Sequential,
}

pub fn validate_image_side(side: usize) -> Result<()> {
    if side == 0 || !side.is_multiple_of(8) {
        return Err(Error::Geometry(format!(
            "image side {side} must be a positive multiple of 8 (three 2x2 pools)"
        )));
    }
    Ok(())
}

/// conv(32) → conv(64) → conv(128) blocks, each `conv → relu → batch-norm →
/// pool`, then dense 256 and 128 with dropout 0.5, then a 2-way softmax.
pub fn build_mri_cnn(side: usize, channels: usize, seed: u64) -> Result<ModelSpec> {
    validate_image_side(side)?;
    if channels == 0 {
        return Err(Error::Geometry("image needs at least one channel".into()));
    }
    let mut rng = Rng::derive(seed, 0x1a6e);
    let mut layers = Vec::new();
    let mut c_in = channels;
    for (block, filters) in [32, 64, 128].into_iter().enumerate() {
        let n = block + 1;
        layers.push(Layer::conv2d(&format!("conv{n}"), c_in, filters, 3, &mut rng));
        layers.push(Layer::activation(&format!("conv{n}_relu"), Activation::Relu));
        layers.push(Layer::batch_norm(&format!("bn{n}"), filters));
        layers.push(Layer::max_pool(&format!("pool{n}")));
        c_in = filters;
    }
    let flat = (side / 8) * (side / 8) * 128;
    layers.push(Layer::flatten("flatten"));
    layers.push(Layer::dense("fc1", flat, 256, &mut rng));
    layers.push(Layer::activation("fc1_relu", Activation::Relu));
    layers.push(Layer::dropout("fc1_dropout", 0.5));
    layers.push(Layer::dense("fc2", 256, 128, &mut rng));
    layers.push(Layer::activation("fc2_relu", Activation::Relu));
    layers.push(Layer::dropout("fc2_dropout", 0.5));
    layers.push(Layer::dense("output", 128, NUM_CLASSES, &mut rng));
    layers.push(Layer::activation("softmax", Activation::Softmax));
    Ok(ModelSpec {
        modality: Modality::Image,
        geometry: InputGeometry::Image { side, channels },
        network: Sequential::new(layers),
    })
}

fn build_sequence_lstm(modality: Modality, steps: usize, features: usize, seed: u64) -> Result<ModelSpec> {
    if steps == 0 || features == 0 {
        return Err(Error::Parameter(format!(
            "sequence geometry needs steps >= 1 and features >= 1, got ({steps}, {features})"
        )));
    }
    let mut rng = Rng::derive(seed, 0x15_7000 + modality.index() as u64);
    let layers = vec![
        Layer::lstm("lstm1", features, 64, true, 0.2, &mut rng),
        Layer::lstm("lstm2", 64, 128, false, 0.2, &mut rng),
        Layer::dense("fc1", 128, 128, &mut rng),
        Layer::activation("fc1_relu", Activation::Relu),
        Layer::dense("output", 128, NUM_CLASSES, &mut rng),
        Layer::activation("softmax", Activation::Softmax),
    ];
    Ok(ModelSpec {
        modality,
        geometry: InputGeometry::Sequence { steps, features },
        network: Sequential::new(layers),
    })
}

/// LSTM(64, full sequence) → LSTM(128, final state), both with 20%
/// recurrent dropout, then dense 128 + relu and a 2-way softmax.
pub fn build_cognitive_lstm(steps: usize, features: usize, seed: u64) -> Result<ModelSpec> {
    build_sequence_lstm(Modality::Cognitive, steps, features, seed)
}

/// Same topology as [`build_cognitive_lstm`] with its own weights.
pub fn build_biomarker_lstm(steps: usize, features: usize, seed: u64) -> Result<ModelSpec> {
    build_sequence_lstm(Modality::Biomarker, steps, features, seed)
}

/// Builds the architecture for `modality` from a geometry.
pub fn build_for(modality: Modality, geometry: InputGeometry, seed: u64) -> Result<ModelSpec> {
    match (modality, geometry) {
        (Modality::Image, InputGeometry::Image { side, channels }) => build_mri_cnn(side, channels, seed),
        (Modality::Cognitive, InputGeometry::Sequence { steps, features }) => {
            build_cognitive_lstm(steps, features, seed)
        }
        (Modality::Biomarker, InputGeometry::Sequence { steps, features }) => {
            build_biomarker_lstm(steps, features, seed)
        }
        (m, g) => Err(Error::Geometry(format!("{m} modality cannot take {g:?} input"))),
    }
}

/// Layer sequence every model of `modality` must have.
pub fn expected_layout(modality: Modality) -> Vec<LayerKind> {
    use LayerKind::*;
    let relu = Activation { function: crate::nn::Activation::Relu };
    let softmax = Activation { function: crate::nn::Activation::Softmax };
    match modality {
        Modality::Image => {
            let mut v = Vec::new();
            for filters in [32, 64, 128] {
                v.extend([Conv2d { filters, kernel: 3 }, relu.clone(), BatchNorm, MaxPool2x2]);
            }
            v.extend([
                Flatten,
                Dense { units: 256 },
                relu.clone(),
                Dropout { rate: 0.5 },
                Dense { units: 128 },
                relu.clone(),
                Dropout { rate: 0.5 },
                Dense { units: 2 },
                softmax,
            ]);
            v
        }
        Modality::Cognitive | Modality::Biomarker => vec![
            Lstm { units: 64, return_sequences: true, recurrent_dropout: 0.2 },
            Lstm { units: 128, return_sequences: false, recurrent_dropout: 0.2 },
            Dense { units: 128 },
            relu,
            Dense { units: 2 },
            softmax,
        ],
    }
}

impl ModelSpec {
    pub fn validate_structure(&self) -> Result<()> {
        let actual = self.network.kinds();
        let expected = expected_layout(self.modality);
        if actual != expected {
            return Err(Error::Parameter(format!(
                "{} network does not match its reference layout",
                self.modality
            )));
        }
        match self.geometry {
            InputGeometry::Image { side, channels } if self.modality == Modality::Image => {
                validate_image_side(side)?;
                if channels == 0 {
                    return Err(Error::Geometry("zero channels".into()));
                }
            }
            InputGeometry::Sequence { .. } if self.modality != Modality::Image => {}
            g => return Err(Error::Geometry(format!("{} model has {g:?} input", self.modality))),
        }
        Ok(())
    }

    pub fn num_trainable(&self) -> usize {
        self.network.num_trainable()
    }

    fn check_sample(&self, sample: &Tensor) -> Result<()> {
        let want = self.geometry.sample_shape();
        if sample.shape() != want.as_slice() {
            return Err(Error::dim("sample geometry", sample.shape(), &want));
        }
        Ok(())
    }
}

/// Per-subject inputs of one modality with their labels.
#[derive(Debug, Clone, Default)]
pub struct LabeledSamples {
    pub inputs: Vec<Tensor>,
    pub labels: Vec<usize>,
}

impl LabeledSamples {
    pub fn new(inputs: Vec<Tensor>, labels: Vec<usize>) -> Result<Self> {
        if inputs.len() != labels.len() {
            return Err(Error::Data(format!(
                "{} samples but {} labels",
                inputs.len(),
                labels.len()
            )));
        }
        Ok(Self { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    fn batch(&self, idx: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let items: Vec<&Tensor> = idx.iter().map(|&i| &self.inputs[i]).collect();
        Ok((Tensor::stack(&items)?, idx.iter().map(|&i| self.labels[i]).collect()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Epochs without validation-loss improvement before stopping; 0 disables.
    pub patience: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 32,
            learning_rate: 1e-3,
            seed: 42,
            patience: 5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Parameter("epochs must be at least 1".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Parameter("batch size must be at least 2".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Parameter("learning rate must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    pub val_accuracy: Vec<f64>,
    /// Zero-based epoch whose parameters were returned.
    pub best_epoch: usize,
    pub optimizer_steps: u64,
}

impl TrainHistory {
    pub fn epochs(&self) -> usize {
        self.train_loss.len()
    }
}

/// Splits a shuffled index list into batches; a trailing batch of one is
/// merged into its predecessor so batch normalization always sees ≥ 2.
fn make_batches(order: &[usize], batch_size: usize) -> Vec<&[usize]> {
    let mut batches: Vec<&[usize]> = order.chunks(batch_size).collect();
    if batches.len() > 1 && batches.last().is_some_and(|b| b.len() == 1) {
        batches.pop();
        let n = batches.len();
        let start = (n - 1) * batch_size;
        batches[n - 1] = &order[start..];
    }
    batches
}

/// Mean cross-entropy and accuracy in inference mode.
pub fn evaluate_loss(spec: &ModelSpec, data: &LabeledSamples) -> Result<(f64, f64)> {
    let probs = predict_batch(spec, &data.inputs)?;
    let mut loss = 0.0;
    let mut correct = 0;
    for (p, &label) in probs.iter().zip(&data.labels) {
        loss -= p[label].max(f64::MIN_POSITIVE).ln();
        if predicted_label(p) == label {
            correct += 1;
        }
    }
    let n = data.len().max(1) as f64;
    Ok((loss / n, correct as f64 / n))
}

/// Argmax of a 2-class vector; an exact tie goes to class 1.
pub fn predicted_label(p: &[f64; 2]) -> usize {
    if p[1] >= p[0] {
        1
    } else {
        0
    }
}

/// Mini-batch Adam on cross-entropy with per-epoch shuffling, early
/// stopping on validation loss, and best-epoch parameter restoration.
pub fn train_modality(
    spec: ModelSpec,
    train: &LabeledSamples,
    val: &LabeledSamples,
    cfg: &TrainConfig,
) -> Result<(ModelSpec, TrainHistory)> {
    cfg.validate()?;
    spec.validate_structure()?;
    if train.len() < 2 || val.is_empty() {
        return Err(Error::Data(format!(
            "need at least 2 training and 1 validation sample, got {} and {}",
            train.len(),
            val.len()
        )));
    }
    for s in train.inputs.iter().chain(&val.inputs) {
        spec.check_sample(s)?;
    }
    for &l in train.labels.iter().chain(&val.labels) {
        if l > 1 {
            return Err(Error::Data(format!("label {l} is not 0 or 1")));
        }
    }
    if !(train.labels.contains(&0) && train.labels.contains(&1)) {
        return Err(Error::Data("training split contains a single class".into()));
    }

    let mut model = spec;
    let mut best = model.clone();
    let mut best_loss = f64::INFINITY;
    let mut since_best = 0;
    let mut history = TrainHistory::default();
    let mut adam = AdamState::new(cfg.learning_rate);
    let mut rng = Rng::derive(cfg.seed, 0x7a1e);
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 0..cfg.epochs {
        rng.shuffle(&mut order);
        let mut epoch_loss = 0.0;
        for idx in make_batches(&order, cfg.batch_size) {
            let (x, labels) = train.batch(idx)?;
            model.network.zero_grad();
            let logits = model.network.forward_logits(&x, Mode::Train, &mut rng)?;
            let (loss, grad) = softmax_cross_entropy(&logits, &labels)?;
            model.network.backward(&grad)?;
            adam_step(&mut model.network.trainable(), &mut adam)?;
            epoch_loss += loss * idx.len() as f64;
        }
        model.network.clear_caches();
        let (val_loss, val_acc) = evaluate_loss(&model, val)?;
        history.train_loss.push(epoch_loss / train.len() as f64);
        history.val_loss.push(val_loss);
        history.val_accuracy.push(val_acc);
        if val_loss < best_loss {
            best_loss = val_loss;
            best = model.clone();
            history.best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
            if cfg.patience > 0 && since_best >= cfg.patience {
                break;
            }
        }
    }
    history.optimizer_steps = adam.step;
    best.network.zero_grad();
    Ok((best, history))
}

/// Class probabilities for many samples, evaluated in inference mode in
/// fixed-size chunks.
pub fn predict_batch(spec: &ModelSpec, samples: &[Tensor]) -> Result<Vec<[f64; 2]>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(EVAL_CHUNK) {
        for s in chunk {
            spec.check_sample(s)?;
        }
        let x = Tensor::stack(&chunk.iter().collect::<Vec<_>>())?;
        let probs = spec.network.infer(&x)?;
        for row in probs.data().chunks(NUM_CLASSES) {
            out.push([row[0], row[1]]);
        }
    }
    Ok(out)
}

pub fn predict_modality(spec: &ModelSpec, sample: &Tensor) -> Result<ModalityPrediction> {
    let p = predict_batch(spec, std::slice::from_ref(sample))?;
    Ok(ModalityPrediction::present(spec.modality, p[0]))
}

use serde::{Deserialize, Serialize};

use super::activation::{activation_backward, apply_activation, inverted_dropout, Activation};
use super::conv::{conv2d_same_backward, conv2d_same_forward, maxpool2x2, maxpool2x2_backward};
use super::dense::{dense_backward, dense_forward};
use super::lstm::{lstm_backward, lstm_forward_cached, LstmCache, GATES};
use super::norm::{batchnorm_backward, batchnorm_forward, BatchNormCache};
use super::params::LayerParams;
use super::rng::Rng;
use super::tensor::Tensor;
use super::Mode;
use crate::error::{Error, Result};

/// Structural description of a layer, independent of its weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerKind {
    Conv2d { filters: usize, kernel: usize },
    BatchNorm,
    MaxPool2x2,
    Flatten,
    Dense { units: usize },
    Activation { function: Activation },
    Dropout { rate: f64 },
    Lstm { units: usize, return_sequences: bool, recurrent_dropout: f64 },
}

#[derive(Debug, Clone)]
enum Cache {
    Input(Tensor),
    Pool { input_shape: Vec<usize>, argmax: Vec<usize> },
    Norm(BatchNormCache),
    Act { input: Tensor, output: Tensor },
    Dropout(Option<Vec<f64>>),
    Flatten(Vec<usize>),
    Lstm(Box<LstmCache>),
}

#[derive(Debug, Clone)]
pub struct Layer {
    pub kind: LayerKind,
    pub params: LayerParams,
    cache: Option<Cache>,
}

fn uniform_tensor(shape: &[usize], limit: f64, rng: &mut Rng) -> Tensor {
    let mut t = Tensor::zeros(shape);
    t.data_mut().iter_mut().for_each(|v| *v = rng.uniform_range(-limit, limit));
    t
}

impl Layer {
    fn new(kind: LayerKind, params: LayerParams) -> Self {
        Self { kind, params, cache: None }
    }

    /// 2D convolution with He-uniform kernel initialization.
    pub fn conv2d(name: &str, c_in: usize, filters: usize, kernel: usize, rng: &mut Rng) -> Self {
        let fan_in = (kernel * kernel * c_in) as f64;
        let params = LayerParams::new(name)
            .with_trainable("weight", uniform_tensor(&[filters, kernel, kernel, c_in], (6.0 / fan_in).sqrt(), rng))
            .with_trainable("bias", Tensor::zeros(&[filters]));
        Self::new(LayerKind::Conv2d { filters, kernel }, params)
    }

    pub fn batch_norm(name: &str, channels: usize) -> Self {
        let params = LayerParams::new(name)
            .with_trainable("gamma", Tensor::full(&[channels], 1.0))
            .with_trainable("beta", Tensor::zeros(&[channels]))
            .with_frozen("running_mean", Tensor::zeros(&[channels]))
            .with_frozen("running_var", Tensor::full(&[channels], 1.0));
        Self::new(LayerKind::BatchNorm, params)
    }

    pub fn max_pool(name: &str) -> Self {
        Self::new(LayerKind::MaxPool2x2, LayerParams::new(name))
    }

    pub fn flatten(name: &str) -> Self {
        Self::new(LayerKind::Flatten, LayerParams::new(name))
    }

    /// Fully connected layer with He-uniform weights.
    pub fn dense(name: &str, in_dim: usize, units: usize, rng: &mut Rng) -> Self {
        let params = LayerParams::new(name)
            .with_trainable("weight", uniform_tensor(&[units, in_dim], (6.0 / in_dim as f64).sqrt(), rng))
            .with_trainable("bias", Tensor::zeros(&[units]));
        Self::new(LayerKind::Dense { units }, params)
    }

    pub fn activation(name: &str, function: Activation) -> Self {
        Self::new(LayerKind::Activation { function }, LayerParams::new(name))
    }

    pub fn dropout(name: &str, rate: f64) -> Self {
        Self::new(LayerKind::Dropout { rate }, LayerParams::new(name))
    }

    /// LSTM layer. Input weights are He-uniform, recurrent weights uniform
    /// in ±1/√units, forget-gate bias starts at 1.
    pub fn lstm(
        name: &str,
        features: usize,
        units: usize,
        return_sequences: bool,
        recurrent_dropout: f64,
        rng: &mut Rng,
    ) -> Self {
        let w_limit = (6.0 / features as f64).sqrt();
        let u_limit = 1.0 / (units as f64).sqrt();
        let mut params = LayerParams::new(name);
        for gate in GATES {
            let bias = if gate == "f" { 1.0 } else { 0.0 };
            params = params
                .with_trainable(&format!("W_{gate}"), uniform_tensor(&[units, features], w_limit, rng))
                .with_trainable(&format!("U_{gate}"), uniform_tensor(&[units, units], u_limit, rng))
                .with_trainable(&format!("b_{gate}"), Tensor::full(&[units], bias));
        }
        Self::new(
            LayerKind::Lstm { units, return_sequences, recurrent_dropout },
            params,
        )
    }

    pub fn name(&self) -> &str {
        &self.params.name
    }

    pub fn forward(&mut self, x: &Tensor, mode: Mode, rng: &mut Rng) -> Result<Tensor> {
        let (y, cache) = match &self.kind {
            LayerKind::Conv2d { .. } => (conv2d_same_forward(x, &self.params)?, Cache::Input(x.clone())),
            LayerKind::Dense { .. } => (dense_forward(x, &self.params)?, Cache::Input(x.clone())),
            LayerKind::BatchNorm => {
                let (y, c) = batchnorm_forward(x, &mut self.params, mode)?;
                (y, Cache::Norm(c))
            }
            LayerKind::MaxPool2x2 => {
                let p = maxpool2x2(x)?;
                (p.output, Cache::Pool { input_shape: x.shape().to_vec(), argmax: p.argmax })
            }
            LayerKind::Flatten => {
                let width = x.row_len();
                (x.clone().reshape(&[x.rows(), width])?, Cache::Flatten(x.shape().to_vec()))
            }
            LayerKind::Activation { function } => {
                let y = apply_activation(*function, x).ensure_finite("activation")?;
                (y.clone(), Cache::Act { input: x.clone(), output: y })
            }
            LayerKind::Dropout { rate } => {
                let (y, mask) = inverted_dropout(x, *rate, mode, rng)?;
                (y, Cache::Dropout(mask))
            }
            LayerKind::Lstm { return_sequences, recurrent_dropout, .. } => {
                let (y, c) = lstm_forward_cached(x, &self.params, *return_sequences, *recurrent_dropout, mode, rng)?;
                (y, Cache::Lstm(Box::new(c)))
            }
        };
        self.cache = Some(cache);
        Ok(y)
    }

    /// Inference-mode forward pass that leaves the layer untouched.
    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        match &self.kind {
            LayerKind::Conv2d { .. } => conv2d_same_forward(x, &self.params),
            LayerKind::Dense { .. } => dense_forward(x, &self.params),
            LayerKind::BatchNorm => {
                let mut params = self.params.clone();
                batchnorm_forward(x, &mut params, Mode::Infer).map(|(y, _)| y)
            }
            LayerKind::MaxPool2x2 => maxpool2x2(x).map(|p| p.output),
            LayerKind::Flatten => x.clone().reshape(&[x.rows(), x.row_len()]),
            LayerKind::Activation { function } => apply_activation(*function, x).ensure_finite("activation"),
            LayerKind::Dropout { .. } => Ok(x.clone()),
            LayerKind::Lstm { return_sequences, .. } => {
                // no randomness is drawn in inference mode
                let mut unused = Rng::new(0);
                lstm_forward_cached(x, &self.params, *return_sequences, 0.0, Mode::Infer, &mut unused)
                    .map(|(y, _)| y)
            }
        }
    }

    /// Consumes the cached forward state, accumulates parameter gradients
    /// and returns the gradient with respect to the layer input.
    pub fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor> {
        let cache = self
            .cache
            .take()
            .ok_or_else(|| Error::State(format!("backward before forward on layer {:?}", self.params.name)))?;
        match cache {
            Cache::Input(x) => match self.kind {
                LayerKind::Conv2d { .. } => conv2d_same_backward(&x, &mut self.params, grad_out),
                _ => dense_backward(&x, &mut self.params, grad_out),
            },
            Cache::Norm(c) => batchnorm_backward(&c, &mut self.params, grad_out),
            Cache::Pool { input_shape, argmax } => maxpool2x2_backward(&input_shape, &argmax, grad_out),
            Cache::Flatten(shape) => grad_out.clone().reshape(&shape),
            Cache::Act { input, output } => {
                let LayerKind::Activation { function } = self.kind else { unreachable!() };
                activation_backward(function, &input, &output, grad_out)
            }
            Cache::Dropout(mask) => {
                let mut g = grad_out.clone();
                if let Some(m) = mask {
                    g.data_mut().iter_mut().zip(&m).for_each(|(v, s)| *v *= s);
                }
                Ok(g)
            }
            Cache::Lstm(c) => lstm_backward(&c, &mut self.params, grad_out),
        }
    }

    pub fn clear_cache(&mut self) {
        self.cache = None;
    }
}

/// Ordered stack of layers evaluated front to back.
#[derive(Debug, Clone, Default)]
pub struct Sequential {
    pub layers: Vec<Layer>,
    executed: usize,
}

impl Sequential {
    pub fn new(layers: Vec<Layer>) -> Self {
        Self { layers, executed: 0 }
    }

    pub fn kinds(&self) -> Vec<LayerKind> {
        self.layers.iter().map(|l| l.kind.clone()).collect()
    }

    fn logits_end(&self) -> usize {
        match self.layers.last().map(|l| &l.kind) {
            Some(LayerKind::Activation { function: Activation::Softmax }) => self.layers.len() - 1,
            _ => self.layers.len(),
        }
    }

    fn run(&mut self, x: &Tensor, end: usize, mode: Mode, rng: &mut Rng) -> Result<Tensor> {
        self.executed = 0;
        let mut h = x.clone();
        for layer in &mut self.layers[..end] {
            h = layer.forward(&h, mode, rng)?;
            self.executed += 1;
        }
        Ok(h)
    }

    /// Full forward pass including any trailing softmax.
    pub fn forward(&mut self, x: &Tensor, mode: Mode, rng: &mut Rng) -> Result<Tensor> {
        let end = self.layers.len();
        self.run(x, end, mode, rng)
    }

    /// Forward pass stopping before a trailing softmax, so that the loss can
    /// be evaluated in log-space.
    pub fn forward_logits(&mut self, x: &Tensor, mode: Mode, rng: &mut Rng) -> Result<Tensor> {
        let end = self.logits_end();
        self.run(x, end, mode, rng)
    }

    /// Inference through every layer without touching caches or running
    /// statistics; safe to call concurrently.
    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for layer in &self.layers {
            h = layer.infer(&h)?;
        }
        Ok(h)
    }

    /// Backpropagates through every layer executed by the last forward call.
    pub fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor> {
        if self.executed == 0 {
            return Err(Error::State("backward before forward".into()));
        }
        let mut g = grad_out.clone();
        for layer in self.layers[..self.executed].iter_mut().rev() {
            g = layer.backward(&g)?;
        }
        self.executed = 0;
        Ok(g)
    }

    pub fn zero_grad(&mut self) {
        self.layers.iter_mut().for_each(|l| l.params.zero_grad());
    }

    pub fn clear_caches(&mut self) {
        self.layers.iter_mut().for_each(Layer::clear_cache);
        self.executed = 0;
    }

    pub fn num_trainable(&self) -> usize {
        self.layers.iter().map(|l| l.params.num_trainable()).sum()
    }

    /// Every tensor keyed `"<index>.<layer>.<role>"`, in a stable order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            for (role, p) in &layer.params.tensors {
                out.push((format!("{i:02}.{}.{role}", layer.params.name), &p.value));
            }
        }
        out
    }

    pub fn tensor_mut(&mut self, key: &str) -> Option<&mut Tensor> {
        let (idx, rest) = key.split_once('.')?;
        let (name, role) = rest.split_once('.')?;
        let layer = self.layers.get_mut(idx.parse::<usize>().ok()?)?;
        if layer.params.name != name {
            return None;
        }
        layer.params.tensors.get_mut(role).map(|p| &mut p.value)
    }

    /// Trainable tensors paired with their gradients, in a stable order.
    pub fn trainable(&mut self) -> Vec<(&mut Tensor, &Tensor)> {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            for p in layer.params.tensors.values_mut() {
                if let Some(g) = p.grad.as_ref() {
                    out.push((&mut p.value, g));
                }
            }
        }
        out
    }
}

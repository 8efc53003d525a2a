//! Minimal deterministic tensor and reverse-mode differentiation engine with
//! exactly the layers the three modality networks need.

mod activation;
mod conv;
mod dense;
mod gradcheck;
mod layer;
mod linalg;
mod loss;
mod lstm;
mod norm;
mod optim;
mod params;
mod rng;
mod tensor;

use serde::{Deserialize, Serialize};

pub use activation::{apply_activation, inverted_dropout, softmax_last_axis, Activation};
pub use conv::{conv2d_same_backward, conv2d_same_forward, maxpool2x2, maxpool2x2_backward, Pooled};
pub use dense::{dense_backward, dense_forward};
pub use gradcheck::{
    central_difference, gradient_check, relative_error, GradCheckOptions, GradCheckReport, Objective,
};
pub use layer::{Layer, LayerKind, Sequential};
pub use loss::softmax_cross_entropy;
pub use lstm::{lstm_cell_step, lstm_layer_forward, GATES};
pub use norm::{batchnorm_backward, batchnorm_forward, BatchNormCache, BN_EPSILON, BN_MOMENTUM};
pub use optim::{adam_step, AdamState};
pub use params::{LayerParams, Param};
pub use rng::Rng;
pub use tensor::Tensor;

/// Whether stochastic layers are active and batch statistics are used.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Train,
    Infer,
}

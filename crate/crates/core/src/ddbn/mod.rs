//! Discriminative deep belief network.
//!
//! The network stacks `L` hidden layers on a binary input. Layers `1..L-1`
//! are ordinary RBMs trained greedily with contrastive divergence; the top
//! RBM's visible layer is the concatenation of `h^(L-1)` and a one-hot class
//! block whose conditional is a softmax. Inference propagates
//! `v -> h^(1) -> ... -> h^(L) -> c` either by sampling binary hidden states
//! or by passing probabilities (mean field).

mod infer;
mod io;
mod model;
mod precision;
mod train;

pub use infer::{
    class_probs, classify, evaluate, evaluate_accuracy, hidden_probs, ClassifyMode, Classifier,
    Evaluation,
};
pub(crate) use infer::affine;
pub use io::{decode_model, encode_model, export_json, load_model, save_model, ModelFileError, MODEL_FORMAT_VERSION, MODEL_MAGIC};
pub use model::{DdbnModel, HiddenLayer, ModelError, ModelMeta};
pub use precision::{NeuronId, PrecisionError, PrecisionMap};
pub use train::{continue_training, retrain_quantized, train_ddbn, TrainConfig};

/// Logistic function `1 / (1 + e^-x)`.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Softmax with max subtraction; returns a new vector.
pub fn softmax(z: &[f64]) -> Vec<f64> {
    let mut out = z.to_vec();
    softmax_in_place(&mut out);
    out
}

pub(crate) fn softmax_in_place(z: &mut [f64]) {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in z.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in z.iter_mut() {
        *v /= sum;
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

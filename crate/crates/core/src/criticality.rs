//! Neuron criticality.
//!
//! The criticality of hidden neuron `i` in layer `l` is the magnitude of the
//! training-set average of `dLoss/da^(l)_i`, where `Loss = |t - a^c|^2` and
//! the forward pass propagates mean-field probabilities without quantization.
//! The constant factor 2 of the squared norm is dropped; it does not change
//! any ranking.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::LabeledBinaryDataset;
use crate::ddbn::{affine, sigmoid, softmax_in_place, DdbnModel, ModelError, NeuronId, PrecisionMap};

/// Samples per parallel work item. Partial sums are formed in sample order
/// inside a chunk and then combined pairwise, so the result does not depend
/// on the number of threads.
const CHUNK: usize = 64;

/// Mean-field forward pass of one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardRecord {
    /// Pre-activations `z^(l)` per hidden layer.
    pub z: Vec<Vec<f64>>,
    /// Activations `a^(l) = sigmoid(z^(l))` per hidden layer.
    pub a: Vec<Vec<f64>>,
    /// Class pre-activations.
    pub zc: Vec<f64>,
    /// Class probabilities.
    pub ac: Vec<f64>,
}

/// Hidden neurons whose activation is held at the constant 0.
fn pruned_mask(model: &DdbnModel, map: Option<&PrecisionMap>) -> Result<Vec<Vec<bool>>, ModelError> {
    match map {
        None => Ok(model.hidden_sizes().iter().map(|&n| vec![false; n]).collect()),
        Some(map) => {
            model.check_precision_shape(map)?;
            Ok(model
                .hidden_sizes()
                .iter()
                .enumerate()
                .map(|(l, &n)| (0..n).map(|j| map.is_pruned(l, j)).collect())
                .collect())
        }
    }
}

fn forward_masked(model: &DdbnModel, input: &[f64], mask: &[Vec<bool>]) -> ForwardRecord {
    let mut z = Vec::with_capacity(model.num_hidden_layers());
    let mut a: Vec<Vec<f64>> = Vec::with_capacity(model.num_hidden_layers());
    for (l, layer) in model.layers().iter().enumerate() {
        let prev = if l == 0 { input } else { &a[l - 1] };
        let mut zl = vec![0.0; layer.n_out()];
        affine(prev, &layer.weights, layer.hidden_bias.as_slice().unwrap(), &mut zl);
        let al = zl
            .iter()
            .zip(&mask[l])
            .map(|(&v, &off)| if off { 0.0 } else { sigmoid(v) })
            .collect();
        z.push(zl);
        a.push(al);
    }
    let mut zc = vec![0.0; model.num_classes()];
    affine(
        a.last().unwrap(),
        model.class_weights(),
        model.class_bias().as_slice().unwrap(),
        &mut zc,
    );
    let mut ac = zc.clone();
    softmax_in_place(&mut ac);
    ForwardRecord { z, a, zc, ac }
}

/// Full-precision mean-field propagation recording every intermediate value.
pub fn forward_mean_field(model: &DdbnModel, input: &[f64]) -> Result<ForwardRecord, ModelError> {
    if input.len() != model.input_size() {
        return Err(ModelError::DimensionMismatch {
            what: "network input",
            expected: model.input_size(),
            found: input.len(),
        });
    }
    Ok(forward_masked(model, input, &pruned_mask(model, None)?))
}

/// `dLoss/da^(L)` (without the factor 2) for class weights `(n_L, classes)`.
pub fn top_layer_gradient(record: &ForwardRecord, t: &[f64], class_weights: &ndarray::Array2<f64>) -> Vec<f64> {
    let ac = &record.ac;
    // e_j = (a_j - t_j) a_j; g_i = sum_j e_j W_ij - (sum_j e_j) (sum_l a_l W_il)
    let e: Vec<f64> = ac.iter().zip(t).map(|(&a, &t)| (a - t) * a).collect();
    let e_sum: f64 = e.iter().sum();
    class_weights
        .rows()
        .into_iter()
        .map(|w| {
            let direct: f64 = e.iter().zip(w.iter()).map(|(e, w)| e * w).sum();
            let mean_w: f64 = ac.iter().zip(w.iter()).map(|(a, w)| a * w).sum();
            direct - e_sum * mean_w
        })
        .collect()
}

/// Gradient at hidden layer `l` from the gradient at layer `l + 1`.
pub fn backprop_gradient(
    record: &ForwardRecord,
    model: &DdbnModel,
    l: usize,
    upstream: &[f64],
) -> Result<Vec<f64>, ModelError> {
    let next = model.layer(l + 1);
    if upstream.len() != next.n_out() {
        return Err(ModelError::DimensionMismatch {
            what: "upstream gradient",
            expected: next.n_out(),
            found: upstream.len(),
        });
    }
    let a = &record.a[l + 1];
    let delta: Vec<f64> = upstream.iter().zip(a).map(|(g, a)| g * a * (1.0 - a)).collect();
    Ok(next
        .weights
        .rows()
        .into_iter()
        .map(|w| delta.iter().zip(w.iter()).map(|(d, w)| d * w).sum())
        .collect())
}

/// `dLoss/da^(l)` for every hidden layer of one sample.
pub fn sample_gradients(model: &DdbnModel, record: &ForwardRecord, t: &[f64]) -> Vec<Vec<f64>> {
    let n = model.num_hidden_layers();
    let mut grads = vec![Vec::new(); n];
    grads[n - 1] = top_layer_gradient(record, t, model.class_weights());
    for l in (0..n - 1).rev() {
        grads[l] = backprop_gradient(record, model, l, &grads[l + 1]).expect("shapes from the model");
    }
    grads
}

/// Options for [`criticality_scores`].
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CriticalityConfig {
    /// Average over this many samples drawn without replacement instead of
    /// the whole set.
    pub subsample: Option<usize>,
    pub seed: u64,
}

/// Per-neuron criticality and the number of samples averaged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriticalityScores {
    pub scores: Vec<Vec<f64>>,
    pub samples: usize,
}

/// One row of a score export.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub layer: usize,
    pub index: usize,
    pub score: f64,
    /// Position in the ascending ranking, 0 = least critical.
    pub rank: usize,
}

impl CriticalityScores {
    pub fn score(&self, id: NeuronId) -> f64 {
        self.scores[id.layer][id.index]
    }

    pub fn rows(&self) -> Vec<ScoreRow> {
        let order = rank_neurons(self);
        let mut rows: Vec<ScoreRow> = order
            .iter()
            .enumerate()
            .map(|(rank, id)| ScoreRow {
                layer: id.layer,
                index: id.index,
                score: self.score(*id),
                rank,
            })
            .collect();
        rows.sort_by_key(|r| (r.layer, r.index));
        rows
    }
}

fn add_into(acc: &mut [Vec<f64>], g: &[Vec<f64>]) {
    for (a, g) in acc.iter_mut().zip(g) {
        for (a, g) in a.iter_mut().zip(g) {
            *a += g;
        }
    }
}

/// Pairwise combination of partial sums in a fixed tree order.
fn pairwise_sum(mut parts: Vec<Vec<Vec<f64>>>) -> Vec<Vec<f64>> {
    while parts.len() > 1 {
        let mut next = Vec::with_capacity(parts.len().div_ceil(2));
        let mut it = parts.into_iter();
        while let Some(mut a) = it.next() {
            if let Some(b) = it.next() {
                add_into(&mut a, &b);
            }
            next.push(a);
        }
        parts = next;
    }
    parts.pop().unwrap()
}

/// Criticality of every hidden neuron over `data`.
///
/// Neurons pruned by `map` keep their activation at 0; their own score is 0.
/// Other parameters are used at full precision.
pub fn criticality_scores(
    model: &DdbnModel,
    map: Option<&PrecisionMap>,
    data: &LabeledBinaryDataset,
    cfg: &CriticalityConfig,
) -> Result<CriticalityScores, ModelError> {
    assert!(!data.is_empty(), "criticality of an empty dataset is undefined");
    for (what, expected, found) in [
        ("dataset dimension", model.input_size(), data.dim()),
        ("dataset classes", model.num_classes(), data.num_classes()),
    ] {
        if expected != found {
            return Err(ModelError::DimensionMismatch { what, expected, found });
        }
    }
    let mask = pruned_mask(model, map)?;
    let mut indices: Vec<usize> = (0..data.len()).collect();
    if let Some(n) = cfg.subsample.filter(|&n| n < data.len()) {
        indices.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed));
        indices.truncate(n.max(1));
        indices.sort_unstable();
    }
    let zero: Vec<Vec<f64>> = model.hidden_sizes().iter().map(|&n| vec![0.0; n]).collect();
    let parts: Vec<Vec<Vec<f64>>> = indices
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut acc = zero.clone();
            for &i in chunk {
                let x: Vec<f64> = data.image(i).iter().map(|&p| p as f64).collect();
                let rec = forward_masked(model, &x, &mask);
                let mut g = sample_gradients(model, &rec, &data.one_hot(i));
                for (gl, ml) in g.iter_mut().zip(&mask) {
                    for (v, &off) in gl.iter_mut().zip(ml) {
                        if off {
                            *v = 0.0;
                        }
                    }
                }
                add_into(&mut acc, &g);
            }
            acc
        })
        .collect();
    let n = indices.len() as f64;
    let scores = pairwise_sum(parts)
        .into_iter()
        .map(|l| l.into_iter().map(|s| (s / n).abs()).collect())
        .collect();
    Ok(CriticalityScores {
        scores,
        samples: indices.len(),
    })
}

/// All hidden neurons, least critical first; ties by `(layer, index)`.
pub fn rank_neurons(scores: &CriticalityScores) -> Vec<NeuronId> {
    let mut ids: Vec<NeuronId> = scores
        .scores
        .iter()
        .enumerate()
        .flat_map(|(l, v)| (0..v.len()).map(move |j| NeuronId::new(l, j)))
        .collect();
    ids.sort_by(|a, b| scores.score(*a).total_cmp(&scores.score(*b)).then(a.cmp(b)));
    ids
}

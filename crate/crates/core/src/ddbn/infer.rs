//! Quantized mean-field and stochastic inference.
//!
//! All forward arithmetic goes through [`affine`], which accumulates inputs
//! in index order. Results for a sample therefore do not depend on batching
//! or on the number of worker threads.

use std::borrow::Cow;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::model::{DdbnModel, ModelError};
use super::precision::PrecisionMap;
use super::{argmax, sigmoid, softmax_in_place};
use crate::dataset::LabeledBinaryDataset;
use crate::fixedpoint::FixedPointFormat;

/// How hidden layers are propagated at inference time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum ClassifyMode {
    /// Probabilities are passed between layers; deterministic.
    #[default]
    MeanField,
    /// Binary hidden states are sampled `samples` times and the class
    /// probabilities averaged.
    Stochastic { samples: usize, seed: u64 },
}

/// `out = bias + sum_i input[i] * weights.row(i)`, summed in `i` order.
/// Zero inputs are skipped, which makes binary inputs cheap.
pub(crate) fn affine(input: &[f64], weights: &ndarray::Array2<f64>, bias: &[f64], out: &mut [f64]) {
    out.copy_from_slice(bias);
    for (i, &x) in input.iter().enumerate() {
        if x == 0.0 {
            continue;
        }
        let row = weights.row(i);
        match row.as_slice() {
            Some(row) => {
                for (o, &w) in out.iter_mut().zip(row) {
                    *o += x * w;
                }
            }
            None => {
                for (o, &w) in out.iter_mut().zip(row.iter()) {
                    *o += x * w;
                }
            }
        }
    }
}

/// Per-neuron `(pre-activation, activation)` formats.
#[derive(Debug, Clone)]
struct Sites {
    hidden: Vec<Vec<(FixedPointFormat, FixedPointFormat)>>,
    class: (FixedPointFormat, FixedPointFormat),
}

/// A model prepared for inference under an optional precision map.
#[derive(Debug, Clone)]
pub struct Classifier<'a> {
    model: Cow<'a, DdbnModel>,
    sites: Option<Sites>,
}

impl<'a> Classifier<'a> {
    /// With a map, parameters are quantized up front and every pre-activation
    /// and activation is quantized as it is produced.
    pub fn new(model: &'a DdbnModel, map: Option<&PrecisionMap>) -> Result<Self, ModelError> {
        let Some(map) = map else {
            return Ok(Self {
                model: Cow::Borrowed(model),
                sites: None,
            });
        };
        let quantized = model.quantized(map)?;
        let hidden = model
            .hidden_sizes()
            .iter()
            .enumerate()
            .map(|(l, &n)| {
                (0..n)
                    .map(|j| (map.weight_format(l, j), map.activation_format(l, j)))
                    .collect()
            })
            .collect();
        Ok(Self {
            model: Cow::Owned(quantized),
            sites: Some(Sites {
                hidden,
                class: (map.class_weight_format(), map.class_activation_format()),
            }),
        })
    }

    pub fn model(&self) -> &DdbnModel {
        &self.model
    }

    fn check_len(what: &'static str, expected: usize, found: usize) -> Result<(), ModelError> {
        if expected != found {
            return Err(ModelError::DimensionMismatch {
                what,
                expected,
                found,
            });
        }
        Ok(())
    }

    /// Activation probabilities `a^(l)` of hidden layer `l` (zero-based) given
    /// the previous layer's values.
    pub fn hidden_probs(&self, l: usize, input: &[f64]) -> Result<Vec<f64>, ModelError> {
        let layer = self.model.layer(l);
        Self::check_len("hidden layer input", layer.n_in(), input.len())?;
        let mut out = vec![0.0; layer.n_out()];
        self.hidden_probs_into(l, input, &mut out);
        Ok(out)
    }

    fn hidden_probs_into(&self, l: usize, input: &[f64], out: &mut [f64]) {
        let layer = self.model.layer(l);
        affine(
            input,
            &layer.weights,
            layer.hidden_bias.as_slice().expect("contiguous bias"),
            out,
        );
        match &self.sites {
            None => out.iter_mut().for_each(|z| *z = sigmoid(*z)),
            Some(sites) => {
                for (z, (zf, af)) in out.iter_mut().zip(&sites.hidden[l]) {
                    *z = af.quantize(sigmoid(zf.quantize(*z)));
                }
            }
        }
    }

    /// Class probabilities `a^c` given the top hidden layer.
    pub fn class_probs(&self, h: &[f64]) -> Result<Vec<f64>, ModelError> {
        let top = *self.model.hidden_sizes().last().unwrap();
        Self::check_len("class layer input", top, h.len())?;
        let mut out = vec![0.0; self.model.num_classes()];
        self.class_probs_into(h, &mut out);
        Ok(out)
    }

    fn class_probs_into(&self, h: &[f64], out: &mut [f64]) {
        affine(
            h,
            self.model.class_weights(),
            self.model.class_bias().as_slice().expect("contiguous bias"),
            out,
        );
        match &self.sites {
            None => softmax_in_place(out),
            Some(Sites { class: (zf, af), .. }) => {
                out.iter_mut().for_each(|z| *z = zf.quantize(*z));
                softmax_in_place(out);
                out.iter_mut().for_each(|p| *p = af.quantize(*p));
            }
        }
    }

    /// Deterministic propagation of probabilities; returns `a^c`.
    pub fn mean_field(&self, input: &[f64]) -> Result<Vec<f64>, ModelError> {
        Self::check_len("network input", self.model.input_size(), input.len())?;
        Ok(self.mean_field_unchecked(input))
    }

    fn mean_field_unchecked(&self, input: &[f64]) -> Vec<f64> {
        let mut cur = input.to_vec();
        for l in 0..self.model.num_hidden_layers() {
            let mut next = vec![0.0; self.model.layer(l).n_out()];
            self.hidden_probs_into(l, &cur, &mut next);
            cur = next;
        }
        let mut out = vec![0.0; self.model.num_classes()];
        self.class_probs_into(&cur, &mut out);
        out
    }

    /// Averages `a^c` over `samples` passes of layer-by-layer Bernoulli
    /// sampling of the hidden states.
    pub fn stochastic<R: Rng>(&self, input: &[f64], samples: usize, rng: &mut R) -> Result<Vec<f64>, ModelError> {
        Self::check_len("network input", self.model.input_size(), input.len())?;
        assert!(samples >= 1, "stochastic inference needs at least one sample");
        Ok(self.stochastic_unchecked(input, samples, rng))
    }

    fn stochastic_unchecked<R: Rng>(&self, input: &[f64], samples: usize, rng: &mut R) -> Vec<f64> {
        let model = &*self.model;
        let n_layers = model.num_hidden_layers();
        // The input is fixed, so the first layer's probabilities are shared by
        // every repetition.
        let mut first = vec![0.0; model.layer(0).n_out()];
        self.hidden_probs_into(0, input, &mut first);
        let mut bufs: Vec<Vec<f64>> = model.hidden_sizes().iter().map(|&n| vec![0.0; n]).collect();
        let mut states: Vec<Vec<f64>> = bufs.clone();
        let mut probs = vec![0.0; model.num_classes()];
        let mut acc = vec![0.0; model.num_classes()];
        for _ in 0..samples {
            for l in 0..n_layers {
                if l == 0 {
                    bufs[0].copy_from_slice(&first);
                } else {
                    self.hidden_probs_into(l, &states[l - 1], &mut bufs[l]);
                }
                for (h, &a) in states[l].iter_mut().zip(&bufs[l]) {
                    *h = if rng.random::<f64>() < a { 1.0 } else { 0.0 };
                }
            }
            self.class_probs_into(&states[n_layers - 1], &mut probs);
            for (s, p) in acc.iter_mut().zip(&probs) {
                *s += p;
            }
        }
        acc.iter_mut().for_each(|s| *s /= samples as f64);
        acc
    }

    /// Predicted class (ties to the lowest index) and the class probabilities
    /// it was taken from. A stochastic mode uses RNG stream `0` of its seed.
    pub fn classify(&self, input: &[f64], mode: ClassifyMode) -> Result<(usize, Vec<f64>), ModelError> {
        self.classify_stream(input, mode, 0)
    }

    /// As [`Self::classify`] but drawing from RNG stream `stream`, so that
    /// each sample of a dataset has an independent reproducible stream.
    pub fn classify_stream(
        &self,
        input: &[f64],
        mode: ClassifyMode,
        stream: u64,
    ) -> Result<(usize, Vec<f64>), ModelError> {
        let probs = match mode {
            ClassifyMode::MeanField => self.mean_field(input)?,
            ClassifyMode::Stochastic { samples, seed } => {
                let mut rng = sample_rng(seed, stream);
                self.stochastic(input, samples, &mut rng)?
            }
        };
        Ok((argmax(&probs), probs))
    }

    /// Predictions for every item, computed in parallel.
    pub fn predict_all(&self, data: &LabeledBinaryDataset, mode: ClassifyMode) -> Result<Vec<usize>, ModelError> {
        Self::check_len("dataset dimension", self.model.input_size(), data.dim())?;
        Self::check_len("dataset classes", self.model.num_classes(), data.num_classes())?;
        if let ClassifyMode::Stochastic { samples, .. } = mode {
            assert!(samples >= 1, "stochastic inference needs at least one sample");
        }
        Ok((0..data.len())
            .into_par_iter()
            .map(|i| {
                let x: Vec<f64> = data.image(i).iter().map(|&p| p as f64).collect();
                let probs = match mode {
                    ClassifyMode::MeanField => self.mean_field_unchecked(&x),
                    ClassifyMode::Stochastic { samples, seed } => {
                        self.stochastic_unchecked(&x, samples, &mut sample_rng(seed, i as u64))
                    }
                };
                argmax(&probs)
            })
            .collect())
    }

    pub fn evaluate(&self, data: &LabeledBinaryDataset, mode: ClassifyMode) -> Result<Evaluation, ModelError> {
        let preds = self.predict_all(data, mode)?;
        let k = self.model.num_classes();
        let mut confusion = vec![vec![0usize; k]; k];
        let mut correct = 0;
        for (i, &p) in preds.iter().enumerate() {
            let t = data.label(i);
            confusion[t][p] += 1;
            correct += usize::from(p == t);
        }
        Ok(Evaluation {
            samples: data.len(),
            correct,
            accuracy: if data.is_empty() { 0.0 } else { correct as f64 / data.len() as f64 },
            confusion,
        })
    }
}

pub(crate) fn sample_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Accuracy and confusion counts (`confusion[true][predicted]`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub samples: usize,
    pub correct: usize,
    pub accuracy: f64,
    pub confusion: Vec<Vec<usize>>,
}

pub fn hidden_probs(
    model: &DdbnModel,
    map: Option<&PrecisionMap>,
    layer: usize,
    input: &[f64],
) -> Result<Vec<f64>, ModelError> {
    Classifier::new(model, map)?.hidden_probs(layer, input)
}

pub fn class_probs(model: &DdbnModel, map: Option<&PrecisionMap>, h: &[f64]) -> Result<Vec<f64>, ModelError> {
    Classifier::new(model, map)?.class_probs(h)
}

pub fn classify(
    model: &DdbnModel,
    map: Option<&PrecisionMap>,
    input: &[f64],
    mode: ClassifyMode,
) -> Result<(usize, Vec<f64>), ModelError> {
    Classifier::new(model, map)?.classify(input, mode)
}

pub fn evaluate(
    model: &DdbnModel,
    map: Option<&PrecisionMap>,
    data: &LabeledBinaryDataset,
    mode: ClassifyMode,
) -> Result<Evaluation, ModelError> {
    Classifier::new(model, map)?.evaluate(data, mode)
}

/// Fraction of items whose prediction matches the label.
pub fn evaluate_accuracy(
    model: &DdbnModel,
    map: Option<&PrecisionMap>,
    data: &LabeledBinaryDataset,
    mode: ClassifyMode,
) -> Result<f64, ModelError> {
    assert!(!data.is_empty(), "accuracy of an empty dataset is undefined");
    Ok(evaluate(model, map, data, mode)?.accuracy)
}

//! Per-neuron fractional bit budgets.
//!
//! A hidden neuron with budget `n > 0` stores its incoming weights, bias and
//! pre-activation in signed `Q8.n` and its activation in unsigned `Q0.n`
//! (fractional bits capped so neither exceeds 64 bits, which makes `n = 64`
//! the `Q8.56`/`Q0.64` baseline). A budget of `0` prunes the neuron: every
//! variable it owns holds the constant `0`. The class layer has one budget
//! shared by the class weights, class bias, logits and class probabilities.

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::model::HiddenLayer;
use crate::fixedpoint::FixedPointFormat;

/// Integer bits of weight-like variables.
pub const WEIGHT_INT_BITS: u32 = 8;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PrecisionError {
    #[error("bit budget of {target} may not increase from {current} to {requested}")]
    Increase {
        target: String,
        current: u32,
        requested: u32,
    },
    #[error("neuron ({layer}, {index}) is out of range")]
    NoSuchNeuron { layer: usize, index: usize },
}

/// `(hidden layer, neuron index)`, both zero-based.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct NeuronId {
    pub layer: usize,
    pub index: usize,
}

impl NeuronId {
    pub fn new(layer: usize, index: usize) -> Self {
        Self { layer, index }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrecisionMap {
    /// Template for weights, biases and pre-activations; its fractional bits
    /// are the global level used for input-layer visible biases.
    pub global_format_weights: FixedPointFormat,
    /// Template for activations.
    pub global_format_activations: FixedPointFormat,
    per_neuron_frac_bits: Vec<Vec<u32>>,
    class_layer_frac_bits: u32,
}

impl PrecisionMap {
    /// Every neuron and the class layer at `frac_bits`.
    pub fn uniform(hidden_sizes: &[usize], frac_bits: u32) -> Self {
        let w = FixedPointFormat::signed(WEIGHT_INT_BITS, 0)
            .unwrap()
            .with_frac_bits(frac_bits);
        let a = FixedPointFormat::unsigned(0, 0).unwrap().with_frac_bits(frac_bits);
        Self {
            global_format_weights: w,
            global_format_activations: a,
            per_neuron_frac_bits: hidden_sizes.iter().map(|&n| vec![frac_bits; n]).collect(),
            class_layer_frac_bits: frac_bits,
        }
    }

    pub fn hidden_sizes(&self) -> Vec<usize> {
        self.per_neuron_frac_bits.iter().map(Vec::len).collect()
    }

    pub fn num_neurons(&self) -> usize {
        self.per_neuron_frac_bits.iter().map(Vec::len).sum()
    }

    pub fn neuron_bits(&self, layer: usize, index: usize) -> u32 {
        self.per_neuron_frac_bits[layer][index]
    }

    pub fn layer_bits(&self, layer: usize) -> &[u32] {
        &self.per_neuron_frac_bits[layer]
    }

    pub fn class_bits(&self) -> u32 {
        self.class_layer_frac_bits
    }

    pub fn is_pruned(&self, layer: usize, index: usize) -> bool {
        self.neuron_bits(layer, index) == 0
    }

    /// Neurons in `(layer, index)` order.
    pub fn neurons(&self) -> impl Iterator<Item = NeuronId> + '_ {
        self.per_neuron_frac_bits
            .iter()
            .enumerate()
            .flat_map(|(l, v)| (0..v.len()).map(move |j| NeuronId::new(l, j)))
    }

    /// Sum of all hidden-neuron fractional budgets.
    pub fn total_hidden_bits(&self) -> u64 {
        self.per_neuron_frac_bits
            .iter()
            .flatten()
            .map(|&b| b as u64)
            .sum()
    }

    pub fn mean_hidden_bits(&self) -> f64 {
        self.total_hidden_bits() as f64 / self.num_neurons() as f64
    }

    /// `(bit_length, neuron_count)` pairs in ascending bit-length order.
    pub fn histogram(&self) -> Vec<(u32, usize)> {
        let mut counts = std::collections::BTreeMap::new();
        for &b in self.per_neuron_frac_bits.iter().flatten() {
            *counts.entry(b).or_insert(0usize) += 1;
        }
        counts.into_iter().collect()
    }

    /// Lowers one neuron's budget. Raising it is an error.
    pub fn lower_neuron(&mut self, id: NeuronId, bits: u32) -> Result<(), PrecisionError> {
        let slot = self
            .per_neuron_frac_bits
            .get_mut(id.layer)
            .and_then(|v| v.get_mut(id.index))
            .ok_or(PrecisionError::NoSuchNeuron {
                layer: id.layer,
                index: id.index,
            })?;
        if bits > *slot {
            return Err(PrecisionError::Increase {
                target: format!("neuron ({}, {})", id.layer, id.index),
                current: *slot,
                requested: bits,
            });
        }
        *slot = bits;
        Ok(())
    }

    pub fn lower_class(&mut self, bits: u32) -> Result<(), PrecisionError> {
        if bits > self.class_layer_frac_bits {
            return Err(PrecisionError::Increase {
                target: "class layer".into(),
                current: self.class_layer_frac_bits,
                requested: bits,
            });
        }
        self.class_layer_frac_bits = bits;
        Ok(())
    }

    /// True when no budget in `self` exceeds the matching one in `earlier`.
    pub fn is_refinement_of(&self, earlier: &PrecisionMap) -> bool {
        self.hidden_sizes() == earlier.hidden_sizes()
            && self.class_layer_frac_bits <= earlier.class_layer_frac_bits
            && self
                .per_neuron_frac_bits
                .iter()
                .flatten()
                .zip(earlier.per_neuron_frac_bits.iter().flatten())
                .all(|(a, b)| a <= b)
    }

    fn weight_format_for_bits(&self, bits: u32) -> FixedPointFormat {
        if bits == 0 {
            FixedPointFormat::zero_bits()
        } else {
            self.global_format_weights.with_frac_bits(bits)
        }
    }

    fn activation_format_for_bits(&self, bits: u32) -> FixedPointFormat {
        if bits == 0 {
            FixedPointFormat::zero_bits()
        } else {
            self.global_format_activations.with_frac_bits(bits)
        }
    }

    /// Format of a neuron's incoming weights, bias and pre-activation.
    pub fn weight_format(&self, layer: usize, index: usize) -> FixedPointFormat {
        self.weight_format_for_bits(self.neuron_bits(layer, index))
    }

    /// Format of a neuron's activation output.
    pub fn activation_format(&self, layer: usize, index: usize) -> FixedPointFormat {
        self.activation_format_for_bits(self.neuron_bits(layer, index))
    }

    pub fn class_weight_format(&self) -> FixedPointFormat {
        self.weight_format_for_bits(self.class_layer_frac_bits)
    }

    pub fn class_activation_format(&self) -> FixedPointFormat {
        self.activation_format_for_bits(self.class_layer_frac_bits)
    }

    /// Format of the visible bias of visible unit `i` in RBM `layer`: the
    /// owning neuron's format, or the global format for input pixels.
    pub fn visible_bias_format(&self, layer: usize, i: usize) -> FixedPointFormat {
        if layer == 0 {
            self.weight_format_for_bits(self.global_format_weights.frac_bits())
        } else {
            self.weight_format(layer - 1, i)
        }
    }

    pub(crate) fn quantize_layer(&self, l: usize, layer: &mut HiddenLayer) {
        for (j, mut col) in layer.weights.columns_mut().into_iter().enumerate() {
            let f = self.weight_format(l, j);
            col.mapv_inplace(|w| f.quantize(w));
        }
        for (j, b) in layer.hidden_bias.iter_mut().enumerate() {
            *b = self.weight_format(l, j).quantize(*b);
        }
        for (i, b) in layer.visible_bias.iter_mut().enumerate() {
            *b = self.visible_bias_format(l, i).quantize(*b);
        }
    }

    pub(crate) fn quantize_class_block(&self, w: &mut Array2<f64>, b: &mut Array1<f64>) {
        let f = self.class_weight_format();
        w.mapv_inplace(|v| f.quantize(v));
        b.mapv_inplace(|v| f.quantize(v));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_formats() {
        let m = PrecisionMap::uniform(&[3, 2], 8);
        assert_eq!(m.weight_format(0, 1).to_string(), "Q8.8");
        assert_eq!(m.activation_format(1, 0).to_string(), "uQ0.8");
        assert_eq!(m.total_hidden_bits(), 40);
        let wide = PrecisionMap::uniform(&[1], 64);
        assert_eq!(wide.weight_format(0, 0).to_string(), "Q8.56");
        assert_eq!(wide.activation_format(0, 0).to_string(), "uQ0.64");
        assert_eq!(wide.class_weight_format().to_string(), "Q8.56");
    }

    #[test]
    fn zero_budget_prunes() {
        let mut m = PrecisionMap::uniform(&[2], 4);
        m.lower_neuron(NeuronId::new(0, 1), 0).unwrap();
        assert!(m.is_pruned(0, 1));
        assert_eq!(m.weight_format(0, 1).quantize(3.7), 0.0);
        assert_eq!(m.activation_format(0, 1).quantize(0.9), 0.0);
        assert_eq!(m.histogram(), vec![(0, 1), (4, 1)]);
    }

    #[test]
    fn budgets_never_increase() {
        let mut m = PrecisionMap::uniform(&[2, 2], 5);
        let before = m.clone();
        m.lower_neuron(NeuronId::new(1, 0), 3).unwrap();
        assert!(m.is_refinement_of(&before));
        assert!(!before.is_refinement_of(&m));
        let err = m.lower_neuron(NeuronId::new(1, 0), 4).unwrap_err();
        assert!(matches!(err, PrecisionError::Increase { current: 3, requested: 4, .. }));
        assert!(m.lower_class(6).is_err());
        m.lower_class(2).unwrap();
        assert!(m.lower_neuron(NeuronId::new(2, 0), 1).is_err());
    }

    #[test]
    fn visible_bias_formats_follow_owner() {
        let mut m = PrecisionMap::uniform(&[2, 2], 6);
        m.lower_neuron(NeuronId::new(0, 1), 2).unwrap();
        assert_eq!(m.visible_bias_format(1, 1).frac_bits(), 2);
        assert_eq!(m.visible_bias_format(0, 5).frac_bits(), 6);
    }
}

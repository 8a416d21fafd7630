use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::precision::PrecisionMap;
use super::train::TrainConfig;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ModelError {
    #[error("{what}: expected length {expected}, got {found}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("invalid layer sizes {0:?}: need input, at least one hidden layer and classes, all nonzero")]
    BadLayerSizes(Vec<usize>),
    #[error("precision map shape {map:?} does not match hidden layers {model:?}")]
    PrecisionShape { map: Vec<usize>, model: Vec<usize> },
}

/// One RBM layer: `weights` is `(n_in, n_out)`; the visible bias is only used
/// while training.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenLayer {
    pub weights: Array2<f64>,
    pub hidden_bias: Array1<f64>,
    pub visible_bias: Array1<f64>,
}

impl HiddenLayer {
    pub fn zeros(n_in: usize, n_out: usize) -> Self {
        Self {
            weights: Array2::zeros((n_in, n_out)),
            hidden_bias: Array1::zeros(n_out),
            visible_bias: Array1::zeros(n_in),
        }
    }

    pub fn n_in(&self) -> usize {
        self.weights.nrows()
    }

    pub fn n_out(&self) -> usize {
        self.weights.ncols()
    }
}

/// Provenance stored alongside the parameters.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub train_config: Option<TrainConfig>,
    pub train_samples: usize,
    /// Free-form history, e.g. `"retrain:2"` entries appended by the search.
    #[serde(default)]
    pub history: Vec<String>,
}

/// Stacked layer parameters of a discriminative DBN.
///
/// `layer_sizes` is `[input, n_1, ..., n_L, classes]`. The class block is
/// `class_weights` `(n_L, classes)` plus `class_bias`.
#[derive(Debug, Clone, PartialEq)]
pub struct DdbnModel {
    layer_sizes: Vec<usize>,
    pub(crate) hidden: Vec<HiddenLayer>,
    pub(crate) class_weights: Array2<f64>,
    pub(crate) class_bias: Array1<f64>,
    pub meta: ModelMeta,
}

impl DdbnModel {
    /// All parameters zero.
    pub fn zeros(layer_sizes: &[usize]) -> Result<Self, ModelError> {
        if layer_sizes.len() < 3 || layer_sizes.contains(&0) {
            return Err(ModelError::BadLayerSizes(layer_sizes.to_vec()));
        }
        let n = layer_sizes.len();
        let hidden = layer_sizes[..n - 1]
            .windows(2)
            .map(|w| HiddenLayer::zeros(w[0], w[1]))
            .collect();
        Ok(Self {
            layer_sizes: layer_sizes.to_vec(),
            hidden,
            class_weights: Array2::zeros((layer_sizes[n - 2], layer_sizes[n - 1])),
            class_bias: Array1::zeros(layer_sizes[n - 1]),
            meta: ModelMeta::default(),
        })
    }

    /// Weights drawn from `N(0, std^2)`, biases zero.
    pub fn random<R: Rng>(layer_sizes: &[usize], std: f64, rng: &mut R) -> Result<Self, ModelError> {
        let mut m = Self::zeros(layer_sizes)?;
        let normal = Normal::new(0.0, std).expect("finite std");
        for layer in &mut m.hidden {
            layer.weights.mapv_inplace(|_| normal.sample(rng));
        }
        m.class_weights.mapv_inplace(|_| normal.sample(rng));
        Ok(m)
    }

    /// Assembles a model from explicit parameters, checking every shape.
    pub fn from_parts(
        hidden: Vec<HiddenLayer>,
        class_weights: Array2<f64>,
        class_bias: Array1<f64>,
    ) -> Result<Self, ModelError> {
        let first = hidden.first().ok_or_else(|| ModelError::BadLayerSizes(vec![]))?;
        let mut sizes = vec![first.n_in()];
        for layer in &hidden {
            let prev = *sizes.last().unwrap();
            check("layer weights rows", prev, layer.n_in())?;
            check("hidden bias", layer.n_out(), layer.hidden_bias.len())?;
            check("visible bias", layer.n_in(), layer.visible_bias.len())?;
            sizes.push(layer.n_out());
        }
        check("class weights rows", *sizes.last().unwrap(), class_weights.nrows())?;
        check("class bias", class_weights.ncols(), class_bias.len())?;
        sizes.push(class_weights.ncols());
        if sizes.contains(&0) {
            return Err(ModelError::BadLayerSizes(sizes));
        }
        let mut m = Self {
            layer_sizes: sizes,
            hidden,
            class_weights,
            class_bias,
            meta: ModelMeta::default(),
        };
        m.standardize();
        Ok(m)
    }

    /// Row-major storage for every weight matrix.
    fn standardize(&mut self) {
        for layer in &mut self.hidden {
            if !layer.weights.is_standard_layout() {
                layer.weights = layer.weights.as_standard_layout().into_owned();
            }
        }
        if !self.class_weights.is_standard_layout() {
            self.class_weights = self.class_weights.as_standard_layout().into_owned();
        }
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn input_size(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn num_classes(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    /// `[n_1, ..., n_L]`.
    pub fn hidden_sizes(&self) -> &[usize] {
        &self.layer_sizes[1..self.layer_sizes.len() - 1]
    }

    pub fn num_hidden_layers(&self) -> usize {
        self.hidden.len()
    }

    pub fn total_hidden_neurons(&self) -> usize {
        self.hidden_sizes().iter().sum()
    }

    pub fn layer(&self, l: usize) -> &HiddenLayer {
        &self.hidden[l]
    }

    pub fn layer_mut(&mut self, l: usize) -> &mut HiddenLayer {
        &mut self.hidden[l]
    }

    pub fn layers(&self) -> &[HiddenLayer] {
        &self.hidden
    }

    /// `(n_L, classes)`.
    pub fn class_weights(&self) -> &Array2<f64> {
        &self.class_weights
    }

    pub fn class_weights_mut(&mut self) -> &mut Array2<f64> {
        &mut self.class_weights
    }

    pub fn class_bias(&self) -> &Array1<f64> {
        &self.class_bias
    }

    pub fn class_bias_mut(&mut self) -> &mut Array1<f64> {
        &mut self.class_bias
    }

    pub fn is_finite(&self) -> bool {
        self.hidden.iter().all(|l| {
            l.weights.iter().all(|v| v.is_finite())
                && l.hidden_bias.iter().all(|v| v.is_finite())
                && l.visible_bias.iter().all(|v| v.is_finite())
        }) && self.class_weights.iter().all(|v| v.is_finite())
            && self.class_bias.iter().all(|v| v.is_finite())
    }

    pub fn check_precision_shape(&self, map: &PrecisionMap) -> Result<(), ModelError> {
        if map.hidden_sizes() != self.hidden_sizes() {
            return Err(ModelError::PrecisionShape {
                map: map.hidden_sizes(),
                model: self.hidden_sizes().to_vec(),
            });
        }
        Ok(())
    }

    /// Copy with every parameter quantized to its format under `map`.
    pub fn quantized(&self, map: &PrecisionMap) -> Result<Self, ModelError> {
        let mut m = self.clone();
        m.quantize_in_place(map)?;
        Ok(m)
    }

    pub fn quantize_in_place(&mut self, map: &PrecisionMap) -> Result<(), ModelError> {
        self.check_precision_shape(map)?;
        for l in 0..self.hidden.len() {
            map.quantize_layer(l, &mut self.hidden[l]);
        }
        map.quantize_class_block(&mut self.class_weights, &mut self.class_bias);
        Ok(())
    }

    /// True when re-quantizing under `map` changes nothing.
    pub fn is_quantization_fixpoint(&self, map: &PrecisionMap) -> bool {
        match self.quantized(map) {
            Ok(q) => q == *self,
            Err(_) => false,
        }
    }

    /// Removes hidden neuron `j` of layer `l` together with its incoming and
    /// outgoing connections.
    pub fn without_neuron(&self, l: usize, j: usize) -> Self {
        let keep_cols: Vec<usize> = (0..self.hidden[l].n_out()).filter(|&c| c != j).collect();
        let mut m = self.clone();
        let layer = &mut m.hidden[l];
        layer.weights = layer.weights.select(ndarray::Axis(1), &keep_cols);
        layer.hidden_bias = layer.hidden_bias.select(ndarray::Axis(0), &keep_cols);
        if l + 1 < m.hidden.len() {
            let next = &mut m.hidden[l + 1];
            next.weights = next.weights.select(ndarray::Axis(0), &keep_cols);
            next.visible_bias = next.visible_bias.select(ndarray::Axis(0), &keep_cols);
        } else {
            m.class_weights = m.class_weights.select(ndarray::Axis(0), &keep_cols);
        }
        m.layer_sizes[l + 1] -= 1;
        m.standardize();
        m
    }
}

fn check(what: &'static str, expected: usize, found: usize) -> Result<(), ModelError> {
    if expected == found {
        Ok(())
    } else {
        Err(ModelError::DimensionMismatch {
            what,
            expected,
            found,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn shapes() {
        let m = DdbnModel::zeros(&[784, 100, 50, 10]).unwrap();
        assert_eq!(m.hidden_sizes(), &[100, 50]);
        assert_eq!(m.layer(0).weights.dim(), (784, 100));
        assert_eq!(m.layer(1).weights.dim(), (100, 50));
        assert_eq!(m.layer(1).visible_bias.len(), 100);
        assert_eq!(m.class_weights().dim(), (50, 10));
        assert_eq!(m.total_hidden_neurons(), 150);
        assert!(DdbnModel::zeros(&[784, 10]).is_err());
        assert!(DdbnModel::zeros(&[784, 0, 10]).is_err());
    }

    #[test]
    fn from_parts_checks_dims() {
        let l = HiddenLayer::zeros(3, 2);
        assert!(DdbnModel::from_parts(vec![l.clone()], Array2::zeros((2, 4)), Array1::zeros(4)).is_ok());
        let err = DdbnModel::from_parts(vec![l], Array2::zeros((3, 4)), Array1::zeros(4)).unwrap_err();
        assert!(matches!(err, ModelError::DimensionMismatch { .. }));
    }

    #[test]
    fn neuron_removal_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = DdbnModel::random(&[5, 4, 3, 2], 1.0, &mut rng).unwrap();
        let a = m.without_neuron(0, 1);
        assert_eq!(a.layer_sizes(), &[5, 3, 3, 2]);
        assert_eq!(a.layer(1).weights.dim(), (3, 3));
        let b = m.without_neuron(1, 2);
        assert_eq!(b.class_weights().dim(), (2, 2));
    }
}

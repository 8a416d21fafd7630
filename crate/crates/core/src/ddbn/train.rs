//! Greedy layer-wise contrastive-divergence training.
//!
//! Layers below the top are plain binary RBMs. The top RBM sees
//! `[h^(L-1), c]` where `c` is the one-hot label; in its negative phase the
//! class block is reconstructed by sampling one class from the softmax
//! conditional. Each layer is trained on the mean-field probabilities of the
//! layer below.
//!
//! Retraining under a precision map runs the same procedure from the current
//! parameters and re-quantizes every parameter after each minibatch update.

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::infer::Classifier;
use super::model::{DdbnModel, HiddenLayer, ModelError};
use super::precision::PrecisionMap;
use super::sigmoid;
use crate::dataset::LabeledBinaryDataset;
use crate::{ConfigError, TrainError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Gibbs steps `k` in CD-k.
    pub cd_steps: usize,
    pub learning_rate: f64,
    /// Epochs per layer.
    pub epochs: usize,
    pub batch_size: usize,
    pub momentum: f64,
    /// Standard deviation of the initial weights.
    pub init_std: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            cd_steps: 1,
            learning_rate: 0.05,
            epochs: 15,
            batch_size: 100,
            momentum: 0.5,
            init_std: 0.01,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |msg: &str| Err(ConfigError::new(format!("train: {msg}")));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be a positive finite number");
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        if self.cd_steps == 0 {
            return bad("cd_steps must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if !(self.init_std >= 0.0 && self.init_std.is_finite()) {
            return bad("init_std must be a nonnegative finite number");
        }
        Ok(())
    }
}

/// Class block of the top RBM: `weights` is `(n_hidden, classes)`.
#[derive(Debug, Clone, PartialEq)]
struct ClassBlock {
    weights: Array2<f64>,
    bias: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
struct Rbm {
    weights: Array2<f64>,
    hidden_bias: Array1<f64>,
    visible_bias: Array1<f64>,
    class: Option<ClassBlock>,
}

impl Rbm {
    fn zeros_like(&self) -> Self {
        Self {
            weights: Array2::zeros(self.weights.raw_dim()),
            hidden_bias: Array1::zeros(self.hidden_bias.len()),
            visible_bias: Array1::zeros(self.visible_bias.len()),
            class: self.class.as_ref().map(|c| ClassBlock {
                weights: Array2::zeros(c.weights.raw_dim()),
                bias: Array1::zeros(c.bias.len()),
            }),
        }
    }

    /// `P(h = 1 | v, c)` for a minibatch.
    fn hidden_given(&self, v: &Array2<f64>, c: Option<&Array2<f64>>) -> Array2<f64> {
        let mut z = v.dot(&self.weights) + &self.hidden_bias;
        if let (Some(block), Some(c)) = (&self.class, c) {
            z += &c.dot(&block.weights.t());
        }
        z.mapv_into(sigmoid)
    }

    fn visible_given(&self, h: &Array2<f64>) -> Array2<f64> {
        (h.dot(&self.weights.t()) + &self.visible_bias).mapv_into(sigmoid)
    }

    /// One class per row drawn from the softmax conditional, as one-hot rows.
    fn sample_class<R: Rng>(&self, h: &Array2<f64>, rng: &mut R) -> Option<Array2<f64>> {
        let block = self.class.as_ref()?;
        let logits = h.dot(&block.weights) + &block.bias;
        let mut out = Array2::zeros(logits.raw_dim());
        for (row, mut dst) in logits.rows().into_iter().zip(out.rows_mut()) {
            let probs = super::softmax(row.as_slice().expect("standard layout"));
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut pick = probs.len() - 1;
            for (k, p) in probs.iter().enumerate() {
                acc += p;
                if u < acc {
                    pick = k;
                    break;
                }
            }
            dst[pick] = 1.0;
        }
        Some(out)
    }
}

fn sample_bernoulli<R: Rng>(p: &Array2<f64>, rng: &mut R) -> Array2<f64> {
    p.mapv(|p| if rng.random::<f64>() < p { 1.0 } else { 0.0 })
}

/// Visible data, hidden probabilities and (for the top RBM) class units of
/// one phase of a CD step.
#[derive(Debug, Clone)]
struct Phase {
    v: Array2<f64>,
    h: Array2<f64>,
    c: Option<Array2<f64>>,
}

/// Momentum update from positive minus negative statistics.
fn apply_update(rbm: &mut Rbm, vel: &mut Rbm, pos: &Phase, neg: &Phase, lr: f64, momentum: f64) {
    let scale = lr / pos.v.nrows() as f64;
    let dw = pos.v.t().dot(&pos.h) - neg.v.t().dot(&neg.h);
    let dhb = pos.h.sum_axis(Axis(0)) - neg.h.sum_axis(Axis(0));
    let dvb = pos.v.sum_axis(Axis(0)) - neg.v.sum_axis(Axis(0));
    step(&mut rbm.weights, &mut vel.weights, &dw, scale, momentum);
    step(&mut rbm.hidden_bias, &mut vel.hidden_bias, &dhb, scale, momentum);
    step(&mut rbm.visible_bias, &mut vel.visible_bias, &dvb, scale, momentum);
    if let (Some(block), Some(vblock), Some(pc), Some(nc)) =
        (rbm.class.as_mut(), vel.class.as_mut(), &pos.c, &neg.c)
    {
        let dwc = pos.h.t().dot(pc) - neg.h.t().dot(nc);
        let dbc = pc.sum_axis(Axis(0)) - nc.sum_axis(Axis(0));
        step(&mut block.weights, &mut vblock.weights, &dwc, scale, momentum);
        step(&mut block.bias, &mut vblock.bias, &dbc, scale, momentum);
    }
}

fn step<D: ndarray::Dimension>(
    param: &mut ndarray::Array<f64, D>,
    vel: &mut ndarray::Array<f64, D>,
    grad: &ndarray::Array<f64, D>,
    scale: f64,
    momentum: f64,
) {
    ndarray::Zip::from(param)
        .and(vel)
        .and(grad)
        .for_each(|p, v, &g| {
            *v = momentum * *v + scale * g;
            *p += *v;
        });
}

/// One CD-k minibatch update.
fn cd_step<R: Rng>(
    rbm: &mut Rbm,
    vel: &mut Rbm,
    v0: Array2<f64>,
    c0: Option<Array2<f64>>,
    cfg: &TrainConfig,
    rng: &mut R,
) {
    let h0 = rbm.hidden_given(&v0, c0.as_ref());
    let pos = Phase { v: v0, h: h0, c: c0 };
    let mut h_state = sample_bernoulli(&pos.h, rng);
    let mut neg = None;
    for k in 0..cfg.cd_steps {
        let v = rbm.visible_given(&h_state);
        let c = rbm.sample_class(&h_state, rng);
        let h = rbm.hidden_given(&v, c.as_ref());
        if k + 1 < cfg.cd_steps {
            h_state = sample_bernoulli(&h, rng);
        }
        neg = Some(Phase { v, h, c });
    }
    apply_update(rbm, vel, &pos, &neg.expect("cd_steps >= 1"), cfg.learning_rate, cfg.momentum);
}

fn train_rbm<R: Rng>(
    rbm: &mut Rbm,
    data: &Array2<f64>,
    labels: Option<&Array2<f64>>,
    cfg: &TrainConfig,
    rng: &mut R,
    after_update: &mut dyn FnMut(&mut Rbm),
) {
    let mut vel = rbm.zeros_like();
    let mut order: Vec<usize> = (0..data.nrows()).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(rng);
        for batch in order.chunks(cfg.batch_size) {
            let v0 = data.select(Axis(0), batch);
            let c0 = labels.map(|t| t.select(Axis(0), batch));
            cd_step(rbm, &mut vel, v0, c0, cfg, rng);
            after_update(rbm);
        }
    }
}

fn layer_rng(seed: u64, layer: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(layer as u64 + 1);
    rng
}

/// Mean-field activations of layer `l` for every row of `data`.
fn propagate(classifier: &Classifier<'_>, l: usize, data: &Array2<f64>) -> Array2<f64> {
    let n_out = classifier.model().layer(l).n_out();
    let rows: Vec<Vec<f64>> = (0..data.nrows())
        .into_par_iter()
        .map(|i| {
            let x = data.row(i).to_vec();
            classifier.hidden_probs(l, &x).expect("shape checked by caller")
        })
        .collect();
    let mut out = Array2::zeros((data.nrows(), n_out));
    for (mut dst, src) in out.rows_mut().into_iter().zip(rows) {
        dst.assign(&Array1::from(src));
    }
    out
}

fn check_data(model: &DdbnModel, train: &LabeledBinaryDataset) -> Result<(), TrainError> {
    if train.is_empty() {
        return Err(TrainError::EmptyData);
    }
    for (what, expected, found) in [
        ("training data dimension", model.input_size(), train.dim()),
        ("training data classes", model.num_classes(), train.num_classes()),
    ] {
        if expected != found {
            return Err(ModelError::DimensionMismatch {
                what,
                expected,
                found,
            }
            .into());
        }
    }
    Ok(())
}

fn logit_of_mean(col: ndarray::ArrayView1<'_, f64>) -> f64 {
    let p = col.mean().unwrap_or(0.5).clamp(1e-3, 1.0 - 1e-3);
    (p / (1.0 - p)).ln()
}

/// Trains a DDBN with hidden layers `hidden_sizes` on `train`.
pub fn train_ddbn(
    train: &LabeledBinaryDataset,
    hidden_sizes: &[usize],
    cfg: &TrainConfig,
) -> Result<DdbnModel, TrainError> {
    cfg.validate()?;
    let mut sizes = vec![train.dim()];
    sizes.extend_from_slice(hidden_sizes);
    sizes.push(train.num_classes());
    let mut model = DdbnModel::zeros(&sizes)?;
    check_data(&model, train)?;

    let all: Vec<usize> = (0..train.len()).collect();
    let normal = Normal::new(0.0, cfg.init_std).expect("validated std");
    let mut data = train.input_matrix(&all);
    let labels = train.one_hot_matrix(&all);
    let top = hidden_sizes.len() - 1;
    for l in 0..=top {
        let mut rng = layer_rng(cfg.seed, l);
        let (n_in, n_out) = (sizes[l], sizes[l + 1]);
        let mut rbm = Rbm {
            weights: Array2::from_shape_simple_fn((n_in, n_out), || normal.sample(&mut rng)),
            hidden_bias: Array1::zeros(n_out),
            visible_bias: data.columns().into_iter().map(logit_of_mean).collect(),
            class: (l == top).then(|| ClassBlock {
                weights: Array2::from_shape_simple_fn((n_out, train.num_classes()), || {
                    normal.sample(&mut rng)
                }),
                bias: labels.columns().into_iter().map(logit_of_mean).collect(),
            }),
        };
        train_rbm(
            &mut rbm,
            &data,
            (l == top).then_some(&labels),
            cfg,
            &mut rng,
            &mut |_| {},
        );
        store(&mut model, l, rbm);
        if l < top {
            data = propagate(&Classifier::new(&model, None)?, l, &data);
        }
    }
    model.meta.train_config = Some(cfg.clone());
    model.meta.train_samples = train.len();
    Ok(model)
}

fn store(model: &mut DdbnModel, l: usize, rbm: Rbm) {
    *model.layer_mut(l) = HiddenLayer {
        weights: rbm.weights,
        hidden_bias: rbm.hidden_bias,
        visible_bias: rbm.visible_bias,
    };
    if let Some(block) = rbm.class {
        *model.class_weights_mut() = block.weights;
        *model.class_bias_mut() = block.bias;
    }
}

fn extract(model: &DdbnModel, l: usize) -> Rbm {
    let layer = model.layer(l);
    Rbm {
        weights: layer.weights.clone(),
        hidden_bias: layer.hidden_bias.clone(),
        visible_bias: layer.visible_bias.clone(),
        class: (l + 1 == model.num_hidden_layers()).then(|| ClassBlock {
            weights: model.class_weights().clone(),
            bias: model.class_bias().clone(),
        }),
    }
}

fn quantize_rbm(map: &PrecisionMap, l: usize, rbm: &mut Rbm) {
    let mut layer = HiddenLayer {
        weights: std::mem::take(&mut rbm.weights),
        hidden_bias: std::mem::take(&mut rbm.hidden_bias),
        visible_bias: std::mem::take(&mut rbm.visible_bias),
    };
    map.quantize_layer(l, &mut layer);
    rbm.weights = layer.weights;
    rbm.hidden_bias = layer.hidden_bias;
    rbm.visible_bias = layer.visible_bias;
    if let Some(block) = rbm.class.as_mut() {
        map.quantize_class_block(&mut block.weights, &mut block.bias);
    }
}

/// Continues greedy CD training from the current parameters. With a map,
/// every parameter is re-quantized after each minibatch update and the
/// representation fed to the next layer is the quantized forward pass.
fn retrain(
    model: &DdbnModel,
    map: Option<&PrecisionMap>,
    train: &LabeledBinaryDataset,
    cfg: &TrainConfig,
) -> Result<DdbnModel, TrainError> {
    cfg.validate()?;
    check_data(model, train)?;
    if let Some(map) = map {
        model.check_precision_shape(map)?;
        if !model.is_quantization_fixpoint(map) {
            return Err(TrainError::NotQuantized);
        }
    }
    let mut model = model.clone();
    let all: Vec<usize> = (0..train.len()).collect();
    let mut data = train.input_matrix(&all);
    let labels = train.one_hot_matrix(&all);
    let top = model.num_hidden_layers() - 1;
    for l in 0..=top {
        let mut rng = layer_rng(cfg.seed, l);
        let mut rbm = extract(&model, l);
        let mut requantize = |r: &mut Rbm| {
            if let Some(map) = map {
                quantize_rbm(map, l, r);
            }
        };
        train_rbm(
            &mut rbm,
            &data,
            (l == top).then_some(&labels),
            cfg,
            &mut rng,
            &mut requantize,
        );
        store(&mut model, l, rbm);
        if l < top {
            data = propagate(&Classifier::new(&model, map)?, l, &data);
        }
    }
    model.meta.history.push(format!(
        "retrain:{}:{}",
        if map.is_some() { "quantized" } else { "full" },
        cfg.epochs
    ));
    Ok(model)
}

/// Quantization-aware retraining: starts from `model` (which must already
/// equal its own quantization under `map`) and keeps every parameter
/// representable after each update. Pruned neurons keep zero parameters.
pub fn retrain_quantized(
    model: &DdbnModel,
    map: &PrecisionMap,
    train: &LabeledBinaryDataset,
    cfg: &TrainConfig,
) -> Result<DdbnModel, TrainError> {
    retrain(model, Some(map), train, cfg)
}

/// Plain continued CD training at full precision.
pub fn continue_training(
    model: &DdbnModel,
    train: &LabeledBinaryDataset,
    cfg: &TrainConfig,
) -> Result<DdbnModel, TrainError> {
    retrain(model, None, train, cfg)
}

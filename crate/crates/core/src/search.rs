//! Accuracy-constrained bit-length search.
//!
//! Phase 1 lowers one global fractional bit count for every variable until
//! the next step would violate the accuracy constraint. Phase 2 repeats
//! Level-1 iterations over the hidden neurons only:
//!
//! 1. rank the remaining neurons by criticality (or a seeded shuffle),
//! 2. for shrinking candidate sets of the least critical neurons, lower all
//!    candidates by a fixed step per sweep until they reach 0 bits or a sweep
//!    violates the constraint (that sweep is reverted),
//! 3. retrain under the new map.
//!
//! The loop ends when a Level-1 iteration changes no budget. Budgets only
//! ever go down, so the total hidden bit-length never increases.

use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::criticality::{criticality_scores, rank_neurons, CriticalityConfig};
use crate::dataset::LabeledBinaryDataset;
use crate::ddbn::{
    evaluate_accuracy, retrain_quantized, train_ddbn, ClassifyMode, DdbnModel, ModelError, NeuronId,
    PrecisionMap, TrainConfig,
};
use crate::{ConfigError, TrainError};

#[derive(Debug, Error)]
pub enum SearchError {
    #[error(
        "accuracy constraint is infeasible: the starting format Q8.{frac_bits} reaches validation accuracy \
         {accuracy:.4}, below the threshold {threshold:.4} ((1 - {epsilon}) x baseline {baseline:.4})"
    )]
    InfeasibleConstraint {
        frac_bits: u32,
        accuracy: f64,
        threshold: f64,
        baseline: f64,
        epsilon: f64,
    },
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error("{0} split is empty")]
    EmptySplit(&'static str),
}

/// Which parts of Phase 2 are enabled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    #[default]
    Full,
    /// Seeded random order instead of criticality ranking.
    NoCriticality,
    /// No retraining between Level-1 iterations.
    NoRetrain,
    Neither,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Full, Variant::NoCriticality, Variant::NoRetrain, Variant::Neither];

    pub fn uses_criticality(self) -> bool {
        matches!(self, Variant::Full | Variant::NoRetrain)
    }

    pub fn retrains(self) -> bool {
        matches!(self, Variant::Full | Variant::NoCriticality)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Full => "full",
            Variant::NoCriticality => "no_criticality",
            Variant::NoRetrain => "no_retrain",
            Variant::Neither => "neither",
        })
    }
}

impl std::str::FromStr for Variant {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Variant::ALL
            .into_iter()
            .find(|v| v.to_string() == s)
            .ok_or_else(|| ConfigError::new(format!("unknown variant {s:?} (full, no_criticality, no_retrain, neither)")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchConfig {
    /// `epsilon`: committed states keep validation accuracy at least
    /// `(1 - epsilon) * baseline`.
    pub max_relative_accuracy_loss: f64,
    /// Phase-1 starting point; 8 means `Q8.8` weights and `Q0.8` activations.
    pub baseline_frac_bits: u32,
    pub phase1_step: u32,
    /// Level-2 candidate sets have `ceil(N * ratio^k)` neurons, `k = 1, 2, ...`.
    pub level2_ratio: f64,
    pub level3_step: u32,
    /// Training settings for each retraining pass.
    pub retrain: TrainConfig,
    pub variant: Variant,
    /// Seed of the random order used when criticality is disabled.
    pub order_seed: u64,
    pub criticality: CriticalityConfig,
    /// Mode used for every accuracy check inside the search.
    pub eval_mode: ClassifyMode,
    /// Extra mode evaluated on the final model for the report.
    pub report_mode: Option<ClassifyMode>,
    /// Safety cap on Level-1 iterations.
    pub max_iterations: usize,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            max_relative_accuracy_loss: 0.10,
            baseline_frac_bits: 8,
            phase1_step: 1,
            level2_ratio: 0.5,
            level3_step: 1,
            // Updates smaller than half a grid step are rounded away, so
            // retraining at a few fractional bits needs a large step.
            retrain: TrainConfig {
                learning_rate: 1.0,
                epochs: 2,
                batch_size: 50,
                ..TrainConfig::default()
            },
            variant: Variant::Full,
            order_seed: 0,
            criticality: CriticalityConfig::default(),
            eval_mode: ClassifyMode::MeanField,
            report_mode: None,
            max_iterations: 100,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |msg: &str| Err(ConfigError::new(format!("search: {msg}")));
        let eps = self.max_relative_accuracy_loss;
        if !(eps > 0.0 && eps < 1.0) {
            return bad("max_relative_accuracy_loss must lie in (0, 1)");
        }
        if !(1..=64).contains(&self.baseline_frac_bits) {
            return bad("baseline_frac_bits must lie in 1..=64");
        }
        if self.phase1_step == 0 || self.level3_step == 0 {
            return bad("phase1_step and level3_step must be at least 1");
        }
        if !(self.level2_ratio > 0.0 && self.level2_ratio < 1.0) {
            return bad("level2_ratio must lie in (0, 1)");
        }
        if self.max_iterations == 0 {
            return bad("max_iterations must be at least 1");
        }
        for mode in std::iter::once(&self.eval_mode).chain(self.report_mode.as_ref()) {
            if let ClassifyMode::Stochastic { samples: 0, .. } = mode {
                return bad("stochastic evaluation needs at least one sample");
            }
        }
        self.retrain.validate()
    }

    pub fn threshold(&self, baseline_accuracy: f64) -> f64 {
        (1.0 - self.max_relative_accuracy_loss) * baseline_accuracy
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Event {
    Approximate,
    Retrain,
}

/// One committed state of the search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub phase: u8,
    /// Level-1 iteration (0 throughout Phase 1).
    pub iteration: usize,
    pub event: Event,
    pub accuracy: f64,
    pub relative_accuracy: f64,
    /// Sum of all hidden-neuron fractional budgets.
    pub total_bits: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SearchTrace {
    pub records: Vec<TraceRecord>,
}

impl SearchTrace {
    fn push(&mut self, phase: u8, iteration: usize, event: Event, accuracy: f64, baseline: f64, map: &PrecisionMap) {
        self.records.push(TraceRecord {
            phase,
            iteration,
            event,
            accuracy,
            relative_accuracy: accuracy / baseline,
            total_bits: map.total_hidden_bits(),
        });
    }

    /// True when `total_bits` never increases.
    pub fn is_monotone(&self) -> bool {
        self.records.windows(2).all(|w| w[1].total_bits <= w[0].total_bits)
    }

    pub fn count(&self, event: Event) -> usize {
        self.records.iter().filter(|r| r.event == event).count()
    }

    /// One JSON object per line.
    pub fn to_jsonl(&self) -> String {
        self.records
            .iter()
            .map(|r| serde_json::to_string(r).expect("serializable") + "\n")
            .collect()
    }
}

/// Datasets used by the search. The constraint is always checked on
/// `validation`; `test` is only used for the final report.
#[derive(Debug, Clone, Copy)]
pub struct Splits<'a> {
    pub train: &'a LabeledBinaryDataset,
    pub validation: &'a LabeledBinaryDataset,
    pub test: Option<&'a LabeledBinaryDataset>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramRow {
    pub bit_length: u32,
    pub neuron_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchReport {
    pub variant: Variant,
    pub epsilon: f64,
    pub threshold: f64,
    pub baseline_validation_accuracy: f64,
    pub baseline_test_accuracy: Option<f64>,
    pub phase1_frac_bits: u32,
    pub final_validation_accuracy: f64,
    pub final_relative_accuracy: f64,
    pub final_test_accuracy: Option<f64>,
    /// Test accuracy in `report_mode`, when one is configured.
    pub final_test_accuracy_report_mode: Option<f64>,
    pub total_hidden_bits: u64,
    pub mean_hidden_bits: f64,
    pub pruned_neurons: usize,
    pub class_frac_bits: u32,
    pub iterations: usize,
    pub histogram: Vec<HistogramRow>,
    pub config: SearchConfig,
}

#[derive(Debug, Clone)]
pub struct SearchOutcome {
    /// Parameters after the last accepted retraining, quantized under `map`.
    pub model: DdbnModel,
    pub map: PrecisionMap,
    pub trace: SearchTrace,
    pub report: SearchReport,
}

/// Sizes of the Level-2 candidate sets for `n` neurons, ending at 1.
pub fn level2_sizes(n: usize, ratio: f64) -> Vec<usize> {
    let mut sizes = Vec::new();
    if n == 0 {
        return sizes;
    }
    let mut k = 1;
    loop {
        let size = ((n as f64) * ratio.powi(k)).ceil().max(1.0) as usize;
        sizes.push(size);
        if size == 1 {
            return sizes;
        }
        k += 1;
    }
}

fn accuracy(
    model: &DdbnModel,
    map: Option<&PrecisionMap>,
    data: &LabeledBinaryDataset,
    mode: ClassifyMode,
) -> Result<f64, ModelError> {
    evaluate_accuracy(model, map, data, mode)
}

fn check_splits(splits: &Splits<'_>) -> Result<(), SearchError> {
    if splits.train.is_empty() {
        return Err(SearchError::EmptySplit("training"));
    }
    if splits.validation.is_empty() {
        return Err(SearchError::EmptySplit("validation"));
    }
    if splits.test.is_some_and(|t| t.is_empty()) {
        return Err(SearchError::EmptySplit("test"));
    }
    Ok(())
}

/// Result of Phase 1.
#[derive(Debug, Clone)]
pub struct Phase1 {
    pub map: PrecisionMap,
    pub frac_bits: u32,
    pub accuracy: f64,
}

/// Uniform reduction of every variable. `baseline` is the full-precision
/// validation accuracy.
pub fn phase1_uniform(
    model: &DdbnModel,
    cfg: &SearchConfig,
    validation: &LabeledBinaryDataset,
    baseline: f64,
    trace: &mut SearchTrace,
) -> Result<Phase1, SearchError> {
    let threshold = cfg.threshold(baseline);
    let mut bits = cfg.baseline_frac_bits;
    let mut map = PrecisionMap::uniform(model.hidden_sizes(), bits);
    let mut acc = accuracy(model, Some(&map), validation, cfg.eval_mode)?;
    if acc < threshold {
        return Err(SearchError::InfeasibleConstraint {
            frac_bits: bits,
            accuracy: acc,
            threshold,
            baseline,
            epsilon: cfg.max_relative_accuracy_loss,
        });
    }
    trace.push(1, 0, Event::Approximate, acc, baseline, &map);
    while bits > 0 {
        let next_bits = bits.saturating_sub(cfg.phase1_step);
        let next = PrecisionMap::uniform(model.hidden_sizes(), next_bits);
        let next_acc = accuracy(model, Some(&next), validation, cfg.eval_mode)?;
        if next_acc < threshold {
            break;
        }
        bits = next_bits;
        map = next;
        acc = next_acc;
        trace.push(1, 0, Event::Approximate, acc, baseline, &map);
    }
    Ok(Phase1 {
        map,
        frac_bits: bits,
        accuracy: acc,
    })
}

/// Neurons still carrying bits, in the order Level 2 should consider them.
fn level1_order(
    model: &DdbnModel,
    map: &PrecisionMap,
    train: &LabeledBinaryDataset,
    cfg: &SearchConfig,
    iteration: usize,
) -> Result<Vec<NeuronId>, SearchError> {
    let mut order = if cfg.variant.uses_criticality() {
        rank_neurons(&criticality_scores(model, Some(map), train, &cfg.criticality)?)
    } else {
        let mut ids: Vec<NeuronId> = map.neurons().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.order_seed);
        rng.set_stream(iteration as u64);
        ids.shuffle(&mut rng);
        ids
    };
    order.retain(|id| !map.is_pruned(id.layer, id.index));
    Ok(order)
}

/// State carried through Phase 2.
#[derive(Debug, Clone)]
pub struct Phase2 {
    pub model: DdbnModel,
    pub map: PrecisionMap,
    pub accuracy: f64,
    pub iterations: usize,
}

/// Criticality-guided per-neuron reduction with retraining. The class layer
/// keeps its Phase-1 budget.
pub fn phase2_greedy(
    model: &DdbnModel,
    map: &PrecisionMap,
    cfg: &SearchConfig,
    splits: &Splits<'_>,
    baseline: f64,
    trace: &mut SearchTrace,
) -> Result<Phase2, SearchError> {
    let threshold = cfg.threshold(baseline);
    let mut model = model.quantized(map)?;
    let mut map = map.clone();
    let mut acc = accuracy(&model, Some(&map), splits.validation, cfg.eval_mode)?;
    let mut iterations = 0;
    while iterations < cfg.max_iterations {
        iterations += 1;
        let bits_before = map.total_hidden_bits();
        let order = level1_order(&model, &map, splits.train, cfg, iterations)?;
        for size in level2_sizes(order.len(), cfg.level2_ratio) {
            let candidates = &order[..size];
            loop {
                let mut trial = map.clone();
                let mut lowered = false;
                for &id in candidates {
                    let bits = trial.neuron_bits(id.layer, id.index);
                    if bits > 0 {
                        trial
                            .lower_neuron(id, bits.saturating_sub(cfg.level3_step))
                            .expect("lowering never raises");
                        lowered = true;
                    }
                }
                if !lowered {
                    break;
                }
                let trial_acc = accuracy(&model, Some(&trial), splits.validation, cfg.eval_mode)?;
                if trial_acc < threshold {
                    break;
                }
                map = trial;
                acc = trial_acc;
                trace.push(2, iterations, Event::Approximate, acc, baseline, &map);
            }
        }
        if map.total_hidden_bits() == bits_before {
            break;
        }
        model.quantize_in_place(&map)?;
        if cfg.variant.retrains() {
            let retrain_cfg = TrainConfig {
                seed: cfg.retrain.seed.wrapping_add(iterations as u64),
                ..cfg.retrain.clone()
            };
            let candidate = retrain_quantized(&model, &map, splits.train, &retrain_cfg)?;
            let cand_acc = accuracy(&candidate, Some(&map), splits.validation, cfg.eval_mode)?;
            // A retraining pass that loses validation accuracy is discarded.
            if cand_acc >= acc {
                model = candidate;
                acc = cand_acc;
            }
            trace.push(2, iterations, Event::Retrain, acc, baseline, &map);
        }
    }
    Ok(Phase2 {
        model,
        map,
        accuracy: acc,
        iterations,
    })
}

/// Runs both phases on an already trained full-precision model.
pub fn search_from_model(model: &DdbnModel, splits: &Splits<'_>, cfg: &SearchConfig) -> Result<SearchOutcome, SearchError> {
    cfg.validate()?;
    check_splits(splits)?;
    let baseline = accuracy(model, None, splits.validation, cfg.eval_mode)?;
    let baseline_test = splits
        .test
        .map(|t| accuracy(model, None, t, cfg.eval_mode))
        .transpose()?;
    let mut trace = SearchTrace::default();
    let p1 = phase1_uniform(model, cfg, splits.validation, baseline, &mut trace)?;
    let p2 = phase2_greedy(model, &p1.map, cfg, splits, baseline, &mut trace)?;
    let final_test = splits
        .test
        .map(|t| accuracy(&p2.model, Some(&p2.map), t, cfg.eval_mode))
        .transpose()?;
    let final_test_report = match (splits.test, cfg.report_mode) {
        (Some(t), Some(mode)) => Some(accuracy(&p2.model, Some(&p2.map), t, mode)?),
        _ => None,
    };
    let report = SearchReport {
        variant: cfg.variant,
        epsilon: cfg.max_relative_accuracy_loss,
        threshold: cfg.threshold(baseline),
        baseline_validation_accuracy: baseline,
        baseline_test_accuracy: baseline_test,
        phase1_frac_bits: p1.frac_bits,
        final_validation_accuracy: p2.accuracy,
        final_relative_accuracy: p2.accuracy / baseline,
        final_test_accuracy: final_test,
        final_test_accuracy_report_mode: final_test_report,
        total_hidden_bits: p2.map.total_hidden_bits(),
        mean_hidden_bits: p2.map.mean_hidden_bits(),
        pruned_neurons: p2.map.neurons().filter(|id| p2.map.is_pruned(id.layer, id.index)).count(),
        class_frac_bits: p2.map.class_bits(),
        iterations: p2.iterations,
        histogram: p2
            .map
            .histogram()
            .into_iter()
            .map(|(bit_length, neuron_count)| HistogramRow {
                bit_length,
                neuron_count,
            })
            .collect(),
        config: cfg.clone(),
    };
    Ok(SearchOutcome {
        model: p2.model,
        map: p2.map,
        trace,
        report,
    })
}

/// Trains a baseline with `hidden_sizes` and runs the full search on it.
pub fn train_and_search(
    splits: &Splits<'_>,
    hidden_sizes: &[usize],
    train_cfg: &TrainConfig,
    cfg: &SearchConfig,
) -> Result<(DdbnModel, SearchOutcome), SearchError> {
    cfg.validate()?;
    check_splits(splits)?;
    let baseline = train_ddbn(splits.train, hidden_sizes, train_cfg)?;
    let outcome = search_from_model(&baseline, splits, cfg)?;
    Ok((baseline, outcome))
}

/// The search with parts of Phase 2 disabled.
pub fn ablation_run(
    variant: Variant,
    model: &DdbnModel,
    splits: &Splits<'_>,
    cfg: &SearchConfig,
) -> Result<SearchOutcome, SearchError> {
    let cfg = SearchConfig {
        variant,
        ..cfg.clone()
    };
    search_from_model(model, splits, &cfg)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub pruned: usize,
    pub accuracy: f64,
}

/// Accuracy after pruning the first `c` neurons of `order` for every
/// `c = 0..=order.len()`, starting from `map`.
pub fn approximation_curve(
    model: &DdbnModel,
    map: &PrecisionMap,
    order: &[NeuronId],
    data: &LabeledBinaryDataset,
    mode: ClassifyMode,
) -> Result<Vec<CurvePoint>, ModelError> {
    let mut map = map.clone();
    let mut points = Vec::with_capacity(order.len() + 1);
    points.push(CurvePoint {
        pruned: 0,
        accuracy: accuracy(model, Some(&map), data, mode)?,
    });
    for (c, &id) in order.iter().enumerate() {
        map.lower_neuron(id, 0).map_err(|_| ModelError::PrecisionShape {
            map: map.hidden_sizes(),
            model: model.hidden_sizes().to_vec(),
        })?;
        points.push(CurvePoint {
            pruned: c + 1,
            accuracy: accuracy(model, Some(&map), data, mode)?,
        });
    }
    Ok(points)
}

/// Every hidden neuron in a seeded random order.
pub fn random_order(hidden_sizes: &[usize], seed: u64) -> Vec<NeuronId> {
    let mut ids: Vec<NeuronId> = PrecisionMap::uniform(hidden_sizes, 0).neurons().collect();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    ids
}

/// Every hidden neuron ordered by criticality of the full-precision model.
pub fn criticality_order(
    model: &DdbnModel,
    train: &LabeledBinaryDataset,
    cfg: &CriticalityConfig,
) -> Result<Vec<NeuronId>, ModelError> {
    Ok(rank_neurons(&criticality_scores(model, None, train, cfg)?))
}

pub fn mean_accuracy(curve: &[CurvePoint]) -> f64 {
    curve.iter().map(|p| p.accuracy).sum::<f64>() / curve.len() as f64
}

/// Point-wise mean of curves of equal length.
pub fn mean_curve(curves: &[Vec<CurvePoint>]) -> Vec<CurvePoint> {
    let n = curves.first().map_or(0, Vec::len);
    (0..n)
        .map(|i| CurvePoint {
            pruned: curves[0][i].pruned,
            accuracy: curves.iter().map(|c| c[i].accuracy).sum::<f64>() / curves.len() as f64,
        })
        .collect()
}

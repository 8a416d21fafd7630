//! Search behavior on a small synthetic problem: four noisy binary
//! prototypes in 24 dimensions.

use qdbn::ddbn::{evaluate_accuracy, train_ddbn, ClassifyMode, DdbnModel};
use qdbn::search::{phase1_uniform, search_from_model, Event, SearchOutcome, SearchTrace, Splits};
use qdbn::{LabeledBinaryDataset, PrecisionMap, SearchConfig, SearchError, TrainConfig, Variant};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const DIM: usize = 24;
const CLASSES: usize = 4;

fn toy(n: usize, seed: u64) -> LabeledBinaryDataset {
    let mut proto_rng = ChaCha8Rng::seed_from_u64(99);
    let protos: Vec<Vec<u8>> = (0..CLASSES)
        .map(|_| (0..DIM).map(|_| proto_rng.random_range(0..2u8)).collect())
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pixels = Vec::with_capacity(n * DIM);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % CLASSES;
        labels.push(c as u8);
        pixels.extend(protos[c].iter().map(|&p| if rng.random_bool(0.1) { 1 - p } else { p }));
    }
    LabeledBinaryDataset::from_binary(DIM, CLASSES, pixels, labels)
}

struct Toy {
    train: LabeledBinaryDataset,
    validation: LabeledBinaryDataset,
    test: LabeledBinaryDataset,
    model: DdbnModel,
}

impl Toy {
    fn new() -> Self {
        let train = toy(400, 1);
        let cfg = TrainConfig {
            learning_rate: 0.1,
            epochs: 10,
            batch_size: 20,
            ..TrainConfig::default()
        };
        let model = train_ddbn(&train, &[16, 8], &cfg).unwrap();
        Self {
            train,
            validation: toy(200, 2),
            test: toy(200, 3),
            model,
        }
    }

    fn splits(&self) -> Splits<'_> {
        Splits {
            train: &self.train,
            validation: &self.validation,
            test: Some(&self.test),
        }
    }

    fn run(&self, cfg: &SearchConfig) -> SearchOutcome {
        search_from_model(&self.model, &self.splits(), cfg).unwrap()
    }
}

fn config(variant: Variant, epsilon: f64) -> SearchConfig {
    SearchConfig {
        max_relative_accuracy_loss: epsilon,
        variant,
        retrain: TrainConfig {
            learning_rate: 0.5,
            epochs: 1,
            batch_size: 20,
            ..TrainConfig::default()
        },
        ..SearchConfig::default()
    }
}

#[test]
fn toy_baseline_is_learned() {
    let t = Toy::new();
    let acc = evaluate_accuracy(&t.model, None, &t.validation, ClassifyMode::MeanField).unwrap();
    assert!(acc > 0.9, "baseline accuracy {acc}");
}

#[test]
fn every_committed_state_meets_the_constraint() {
    let t = Toy::new();
    for variant in Variant::ALL {
        let cfg = config(variant, 0.05);
        let out = t.run(&cfg);
        let floor = 1.0 - cfg.max_relative_accuracy_loss;
        assert!(out.trace.is_monotone(), "{variant}: total bits increased");
        for r in &out.trace.records {
            assert!(r.relative_accuracy >= floor - 1e-12, "{variant}: {r:?}");
        }
        assert!(out.report.final_relative_accuracy >= floor - 1e-12);
        let last = out.trace.records.last().unwrap();
        assert_eq!(last.total_bits, out.report.total_hidden_bits);
        assert_eq!(last.accuracy, out.report.final_validation_accuracy);
        // The reported accuracy is reproducible from the returned model and map.
        let acc = evaluate_accuracy(&out.model, Some(&out.map), &t.validation, cfg.eval_mode).unwrap();
        assert_eq!(acc, out.report.final_validation_accuracy);
    }
}

#[test]
fn phase_two_only_lowers_phase_one_budgets() {
    let t = Toy::new();
    let out = t.run(&config(Variant::Full, 0.05));
    let phase1 = PrecisionMap::uniform(t.model.hidden_sizes(), out.report.phase1_frac_bits);
    assert!(out.map.is_refinement_of(&phase1));
    assert_eq!(out.map.class_bits(), out.report.phase1_frac_bits);
    assert!(out.report.total_hidden_bits <= phase1.total_hidden_bits());
}

#[test]
fn phase_one_stops_at_the_last_feasible_uniform_format() {
    let t = Toy::new();
    let cfg = config(Variant::Full, 0.02);
    let baseline = evaluate_accuracy(&t.model, None, &t.validation, cfg.eval_mode).unwrap();
    let threshold = cfg.threshold(baseline);
    let mut trace = SearchTrace::default();
    let p1 = phase1_uniform(&t.model, &cfg, &t.validation, baseline, &mut trace).unwrap();
    assert!(p1.accuracy >= threshold);
    if p1.frac_bits > 0 {
        let below = PrecisionMap::uniform(t.model.hidden_sizes(), p1.frac_bits - cfg.phase1_step);
        let acc = evaluate_accuracy(&t.model, Some(&below), &t.validation, cfg.eval_mode).unwrap();
        assert!(acc < threshold, "Q8.{} still satisfies", p1.frac_bits - 1);
    }
    assert_eq!(trace.records.len() as u32, cfg.baseline_frac_bits - p1.frac_bits + 1);
    assert!(trace.records.iter().all(|r| r.phase == 1 && r.event == Event::Approximate));
}

#[test]
fn loose_constraint_prunes_every_neuron() {
    let t = Toy::new();
    let out = t.run(&config(Variant::Full, 0.99));
    assert_eq!(out.report.pruned_neurons, t.model.total_hidden_neurons());
    assert_eq!(out.report.total_hidden_bits, 0);
}

#[test]
fn variants_without_retraining_record_no_retrain_events() {
    let t = Toy::new();
    for variant in [Variant::NoRetrain, Variant::Neither] {
        let out = t.run(&config(variant, 0.05));
        assert_eq!(out.trace.count(Event::Retrain), 0, "{variant}");
    }
    let full = t.run(&config(Variant::Full, 0.05));
    // One retraining pass per iteration that changed a budget.
    assert_eq!(full.trace.count(Event::Retrain), full.report.iterations - 1);
}

#[test]
fn search_is_deterministic() {
    let t = Toy::new();
    for variant in [Variant::Full, Variant::NoCriticality] {
        let cfg = config(variant, 0.05);
        let a = t.run(&cfg);
        let b = t.run(&cfg);
        assert_eq!(a.trace, b.trace);
        assert_eq!(a.report, b.report);
        assert_eq!(a.map, b.map);
    }
}

#[test]
fn infeasible_start_is_reported() {
    let t = Toy::new();
    // Class parameters far below the Q8.8 resolution round to zero, while the
    // full-precision argmax is unchanged.
    let mut model = t.model.clone();
    model.class_weights_mut().mapv_inplace(|w| w * 1e-4);
    model.class_bias_mut().mapv_inplace(|b| b * 1e-4);
    let err = search_from_model(&model, &t.splits(), &config(Variant::Full, 0.05)).unwrap_err();
    match err {
        SearchError::InfeasibleConstraint {
            frac_bits,
            accuracy,
            threshold,
            ..
        } => {
            assert_eq!(frac_bits, 8);
            assert!(accuracy < threshold);
        }
        other => panic!("unexpected error {other}"),
    }
}

#[test]
fn invalid_config_is_rejected() {
    let t = Toy::new();
    let cfg = SearchConfig {
        max_relative_accuracy_loss: 1.5,
        ..SearchConfig::default()
    };
    assert!(matches!(
        search_from_model(&t.model, &t.splits(), &cfg),
        Err(SearchError::Config(_))
    ));
}

//! Acceptance suite.
//!
//! `acceptance_criteria` runs criteria 1-7 and 9 and prints one PASS/FAIL
//! line per criterion; it fails if any criterion fails. Criterion 8 is the
//! long-running ablation study and is `#[ignore]`d:
//!
//! ```text
//! cargo test -p qdbn-core --test acceptance -- --nocapture
//! cargo test -p qdbn-core --test acceptance -- --ignored --nocapture
//! ```
//!
//! The MNIST IDX files are read from `$MNIST_DIR`, or `data/mnist` at the
//! workspace root.

use std::path::PathBuf;
use std::time::Instant;

use ndarray::Array1;
use qdbn::criticality::{forward_mean_field, sample_gradients, CriticalityConfig};
use qdbn::dataset::{load_idx, LabeledBinaryDataset, MnistPaths};
use qdbn::ddbn::{encode_model, evaluate_accuracy, sigmoid, train_ddbn, ClassifyMode, Classifier, DdbnModel};
use qdbn::fixedpoint::FixedPointFormat;
use qdbn::search::{
    approximation_curve, criticality_order, mean_accuracy, random_order, search_from_model, SearchConfig,
    SearchOutcome, Splits, Variant,
};
use qdbn::{PrecisionMap, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TRAIN_SAMPLES: usize = 10_000;
const VALIDATION_SAMPLES: usize = 1_000;
const HIDDEN: [usize; 2] = [100, 50];

struct Mnist {
    train: LabeledBinaryDataset,
    validation: LabeledBinaryDataset,
    test: LabeledBinaryDataset,
}

impl Mnist {
    fn splits(&self) -> Splits<'_> {
        Splits {
            train: &self.train,
            validation: &self.validation,
            test: Some(&self.test),
        }
    }
}

fn mnist_dir() -> PathBuf {
    std::env::var_os("MNIST_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist"))
}

/// Training subset: the first 10,000 MNIST training images. Validation: the
/// next 1,000. Test: the full 10,000-image test set.
fn load_mnist() -> Mnist {
    let dir = mnist_dir();
    let paths = MnistPaths::in_dir(&dir);
    let full = load_idx(&paths.train_images, &paths.train_labels).unwrap_or_else(|e| {
        panic!(
            "MNIST not found in {} ({e}); see README.md for how to fetch it or set MNIST_DIR",
            dir.display()
        )
    });
    let test = load_idx(&paths.test_images, &paths.test_labels).expect("MNIST test set");
    let train_idx: Vec<usize> = (0..TRAIN_SAMPLES).collect();
    let val_idx: Vec<usize> = (TRAIN_SAMPLES..TRAIN_SAMPLES + VALIDATION_SAMPLES).collect();
    Mnist {
        train: full.select(&train_idx),
        validation: full.select(&val_idx),
        test,
    }
}

fn train_config() -> TrainConfig {
    TrainConfig {
        learning_rate: 0.1,
        epochs: 30,
        batch_size: 50,
        momentum: 0.5,
        seed: 0,
        ..TrainConfig::default()
    }
}

fn search_config() -> SearchConfig {
    SearchConfig {
        max_relative_accuracy_loss: 0.10,
        ..SearchConfig::default()
    }
}

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

/// Writes to the process stderr handle, which the test harness does not
/// capture, so the lines appear in a plain `cargo test` run.
macro_rules! show {
    ($($arg:tt)*) => {{
        use std::io::Write;
        let _ = writeln!(std::io::stderr().lock(), $($arg)*);
    }};
}

fn report(results: &mut Vec<(usize, &'static str, Outcome, f64)>, id: usize, name: &'static str, start: Instant, o: Outcome) {
    let secs = start.elapsed().as_secs_f64();
    show!(
        "{} criterion {id}: {name} ({}) [{secs:.1}s]",
        if o.pass { "PASS" } else { "FAIL" },
        o.detail
    );
    results.push((id, name, o, secs));
}

// Criterion 1 --------------------------------------------------------------

/// Nearest representable value by exhaustive search over every code; ties go
/// to the value of larger magnitude.
fn brute_force_nearest(x: f64, signed: bool, m: u32, n: u32) -> f64 {
    let total = m + n;
    let codes: Vec<i64> = if total == 0 {
        vec![0]
    } else if signed {
        let half = 1i64 << (total - 1);
        (-half..half).collect()
    } else {
        (0..1i64 << total).collect()
    };
    let scaled = x * (n as f64).exp2();
    let mut best = codes[0];
    for &c in &codes[1..] {
        let d_new = (scaled - c as f64).abs();
        let d_best = (scaled - best as f64).abs();
        if d_new < d_best || (d_new == d_best && c.abs() > best.abs()) {
            best = c;
        }
    }
    best as f64 / (n as f64).exp2()
}

fn criterion_1() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut formats = 0;
    let mut checked = 0usize;
    let mut mismatches = 0usize;
    for signed in [true, false] {
        for m in 0..=6u32 {
            for n in 0..=6 - m {
                let fmt = FixedPointFormat::new(signed, m, n).unwrap();
                formats += 1;
                let span = (m as f64).exp2() + 1.0;
                for i in 0..100_000 {
                    let x = if i % 10 == 0 {
                        // Exact midpoints between grid points exercise ties.
                        (rng.random_range(-(1i64 << (m + n + 1))..=1i64 << (m + n + 1)) as f64 + 0.5)
                            / (n as f64).exp2()
                    } else {
                        rng.random_range(-span..span)
                    };
                    checked += 1;
                    if fmt.quantize(x).to_bits() != brute_force_nearest(x, signed, m, n).to_bits() {
                        mismatches += 1;
                    }
                }
            }
        }
    }
    outcome(
        mismatches == 0,
        format!("{formats} formats, {checked} values, {mismatches} mismatches"),
    )
}

// Criterion 2 --------------------------------------------------------------

fn random_model(sizes: &[usize], rng: &mut ChaCha8Rng) -> DdbnModel {
    let mut m = DdbnModel::random(sizes, 1.0, rng).unwrap();
    for l in 0..m.num_hidden_layers() {
        let n = m.layer(l).n_out();
        m.layer_mut(l).hidden_bias = Array1::from_iter((0..n).map(|_| rng.random_range(-1.0..1.0)));
    }
    let k = m.num_classes();
    *m.class_bias_mut() = Array1::from_iter((0..k).map(|_| rng.random_range(-1.0..1.0)));
    m
}

/// `|t - a^c|^2 / 2` with `a^(l)_i` replaced by `value`, re-propagated upward
/// by direct evaluation of the network definition.
fn loss_after_perturbation(model: &DdbnModel, a: &[Vec<f64>], t: &[f64], l: usize, i: usize, value: f64) -> f64 {
    let mut cur = a[l].clone();
    cur[i] = value;
    for layer in &model.layers()[l + 1..] {
        cur = (0..layer.n_out())
            .map(|j| sigmoid(layer.hidden_bias[j] + (0..layer.n_in()).map(|k| cur[k] * layer.weights[[k, j]]).sum::<f64>()))
            .collect();
    }
    let w = model.class_weights();
    let z: Vec<f64> = (0..model.num_classes())
        .map(|j| model.class_bias()[j] + (0..cur.len()).map(|k| cur[k] * w[[k, j]]).sum::<f64>())
        .collect();
    let denom: f64 = z.iter().map(|v| v.exp()).sum();
    0.5 * z.iter().zip(t).map(|(v, t)| (t - v.exp() / denom).powi(2)).sum::<f64>()
}

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    let mut compared = 0;
    for _ in 0..50 {
        let model = random_model(&[5, 4, 3, 2], &mut rng);
        let x: Vec<f64> = (0..5).map(|_| rng.random_range(0..2) as f64).collect();
        let mut t = vec![0.0; 2];
        t[rng.random_range(0..2)] = 1.0;
        let rec = forward_mean_field(&model, &x).unwrap();
        let grads = sample_gradients(&model, &rec, &t);
        for (l, gl) in grads.iter().enumerate() {
            for (i, &g) in gl.iter().enumerate() {
                let a = rec.a[l][i];
                let fd = (loss_after_perturbation(&model, &rec.a, &t, l, i, a + h)
                    - loss_after_perturbation(&model, &rec.a, &t, l, i, a - h))
                    / (2.0 * h);
                let scale = g.abs().max(fd.abs());
                let rel = if scale == 0.0 { 0.0 } else { (g - fd).abs() / scale };
                worst = worst.max(rel);
                compared += 1;
            }
        }
    }
    outcome(
        worst <= 1e-5,
        format!("50 models, {compared} derivatives, max relative error {worst:.2e}"),
    )
}

// Criterion 3 --------------------------------------------------------------

fn criterion_3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let samples = 10_000;
    let mut worst_z: f64 = 0.0;
    let mut cases = 0;
    for hidden in 1..=3usize {
        for _ in 0..3 {
            let model = random_model(&[6, hidden, 3], &mut rng);
            let x: Vec<f64> = (0..6).map(|_| rng.random_range(0..2) as f64).collect();
            // Exact expectation over all 2^hidden hidden states.
            let layer = model.layer(0);
            let p: Vec<f64> = (0..hidden)
                .map(|j| sigmoid(layer.hidden_bias[j] + (0..6).map(|k| x[k] * layer.weights[[k, j]]).sum::<f64>()))
                .collect();
            let mut expected = [0.0; 3];
            for state in 0..1usize << hidden {
                let h: Vec<f64> = (0..hidden).map(|j| ((state >> j) & 1) as f64).collect();
                let prob: f64 = (0..hidden).map(|j| if h[j] == 1.0 { p[j] } else { 1.0 - p[j] }).product();
                let z: Vec<f64> = (0..3)
                    .map(|c| model.class_bias()[c] + (0..hidden).map(|j| h[j] * model.class_weights()[[j, c]]).sum::<f64>())
                    .collect();
                let denom: f64 = z.iter().map(|v| v.exp()).sum();
                for c in 0..3 {
                    expected[c] += prob * z[c].exp() / denom;
                }
            }
            let classifier = Classifier::new(&model, None).unwrap();
            let mode = ClassifyMode::Stochastic {
                samples,
                seed: rng.random(),
            };
            let (_, averaged) = classifier.classify(&x, mode).unwrap();
            for c in 0..3 {
                let se = (expected[c] * (1.0 - expected[c]) / samples as f64).sqrt();
                let z = (averaged[c] - expected[c]).abs() / se;
                worst_z = worst_z.max(z);
            }
            cases += 1;
        }
    }
    outcome(
        worst_z <= 3.0,
        format!("{cases} models, S = {samples}, max deviation {worst_z:.2} standard errors"),
    )
}

// Criteria 4, 5 ------------------------------------------------------------

fn train_baseline(data: &Mnist) -> DdbnModel {
    train_ddbn(&data.train, &HIDDEN, &train_config()).expect("baseline training")
}

fn criterion_4(data: &Mnist, model: &DdbnModel, train_secs: f64) -> Outcome {
    let acc = evaluate_accuracy(model, None, &data.test, ClassifyMode::MeanField).unwrap();
    outcome(
        acc >= 0.85 && train_secs <= 600.0,
        format!(
            "784-100-50 on {} samples, test accuracy {:.2}% (need >= 85%), training {train_secs:.1}s (limit 600s)",
            data.train.len(),
            acc * 100.0
        ),
    )
}

fn criterion_5(data: &Mnist, model: &DdbnModel) -> Outcome {
    let float = evaluate(model, None, &data.test);
    let map = PrecisionMap::uniform(model.hidden_sizes(), 64);
    let fixed = evaluate(model, Some(&map), &data.test);
    let fmt = map.weight_format(0, 0);
    outcome(
        float.correct == fixed.correct,
        format!(
            "{fmt}/{}: {} vs {} correct of {}, difference {:.2} pp",
            map.activation_format(0, 0),
            fixed.correct,
            float.correct,
            data.test.len(),
            (fixed.accuracy - float.accuracy) * 100.0
        ),
    )
}

fn evaluate(model: &DdbnModel, map: Option<&PrecisionMap>, data: &LabeledBinaryDataset) -> qdbn::ddbn::Evaluation {
    qdbn::ddbn::evaluate(model, map, data, ClassifyMode::MeanField).unwrap()
}

// Criterion 6 --------------------------------------------------------------

fn criterion_6(data: &Mnist, model: &DdbnModel) -> Outcome {
    let map = PrecisionMap::uniform(model.hidden_sizes(), 8);
    let order = criticality_order(model, &data.train, &CriticalityConfig::default()).unwrap();
    let crit = approximation_curve(model, &map, &order, &data.test, ClassifyMode::MeanField).unwrap();
    let crit_mean = mean_accuracy(&crit);
    let random_means: Vec<f64> = (0..5)
        .map(|seed| {
            let order = random_order(model.hidden_sizes(), seed);
            mean_accuracy(&approximation_curve(model, &map, &order, &data.test, ClassifyMode::MeanField).unwrap())
        })
        .collect();
    let random_mean = random_means.iter().sum::<f64>() / random_means.len() as f64;
    outcome(
        crit_mean > random_mean,
        format!(
            "{} points per curve, mean accuracy criticality {:.4} vs random {:.4} (per seed {:?})",
            crit.len(),
            crit_mean,
            random_mean,
            random_means.iter().map(|v| (v * 1e4).round() / 1e4).collect::<Vec<_>>()
        ),
    )
}

// Criterion 7 --------------------------------------------------------------

fn run_search(data: &Mnist, model: &DdbnModel) -> SearchOutcome {
    search_from_model(model, &data.splits(), &search_config()).expect("search")
}

fn criterion_7(out: &SearchOutcome, secs: f64) -> Outcome {
    let r = &out.report;
    let monotone = out.trace.is_monotone();
    let relative = r.final_validation_accuracy / r.baseline_validation_accuracy;
    let pass = monotone && relative >= 0.90 && r.mean_hidden_bits <= 4.0 && secs <= 1800.0;
    outcome(
        pass,
        format!(
            "{} trace records, monotone {monotone}, relative accuracy {relative:.4} (need >= 0.90), \
             mean frac bits {:.3} (need <= 4), {} Level-1 iterations, search {secs:.1}s",
            out.trace.records.len(),
            r.mean_hidden_bits,
            r.iterations
        ),
    )
}

// Criterion 9 --------------------------------------------------------------

fn in_pool<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> T {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .unwrap()
        .install(f)
}

fn criterion_9(data: &Mnist, model: &DdbnModel, out: &SearchOutcome) -> Outcome {
    let reference_model = encode_model(model, None).unwrap();
    let reference_final = encode_model(&out.model, Some(&out.map)).unwrap();
    let reference_trace = out.trace.to_jsonl();
    let mut details = Vec::new();
    let mut pass = true;
    for threads in [1, 3] {
        let (m, o) = in_pool(threads, || {
            let m = train_baseline(data);
            let o = run_search(data, &m);
            (m, o)
        });
        let same_model = encode_model(&m, None).unwrap() == reference_model;
        let same_final = encode_model(&o.model, Some(&o.map)).unwrap() == reference_final;
        let same_trace = o.trace.to_jsonl() == reference_trace;
        pass &= same_model && same_final && same_trace;
        details.push(format!(
            "{threads} thread(s): model {same_model}, searched model {same_final}, trace {same_trace}"
        ));
    }
    outcome(pass, format!("identical to default pool: {}", details.join("; ")))
}

#[test]
fn acceptance_criteria() {
    let mut results = Vec::new();

    let t = Instant::now();
    report(&mut results, 1, "quantization oracle", t, criterion_1());
    let t = Instant::now();
    report(&mut results, 2, "gradient correctness", t, criterion_2());
    let t = Instant::now();
    report(&mut results, 3, "stochastic inference oracle", t, criterion_3());

    let data = load_mnist();
    let t = Instant::now();
    let model = train_baseline(&data);
    let train_secs = t.elapsed().as_secs_f64();
    report(&mut results, 4, "baseline training (scaled)", t, criterion_4(&data, &model, train_secs));
    let t = Instant::now();
    report(&mut results, 5, "64-bit fixed-point fidelity", t, criterion_5(&data, &model));
    let t = Instant::now();
    report(&mut results, 6, "criticality vs random pruning order", t, criterion_6(&data, &model));
    let t = Instant::now();
    let out = run_search(&data, &model);
    let search_secs = t.elapsed().as_secs_f64();
    report(&mut results, 7, "end-to-end search", t, criterion_7(&out, search_secs));
    let t = Instant::now();
    report(&mut results, 9, "determinism across thread counts", t, criterion_9(&data, &model, &out));

    let failed: Vec<String> = results
        .iter()
        .filter(|r| !r.2.pass)
        .map(|r| format!("{} ({})", r.0, r.1))
        .collect();
    show!(
        "acceptance: {} of {} criteria passed",
        results.len() - failed.len(),
        results.len()
    );
    assert!(failed.is_empty(), "failed criteria: {}", failed.join(", "));
}

fn median(v: &mut [u64]) -> u64 {
    v.sort_unstable();
    v[v.len() / 2]
}

/// Criterion 8: over 5 seeds, the median final total bit-length of the full
/// search is no larger than with retraining or criticality disabled.
#[test]
#[ignore = "long-running ablation study"]
fn acceptance_criterion_8_ablation() {
    let start = Instant::now();
    let data = load_mnist();
    let mut totals: Vec<(Variant, Vec<u64>)> = Variant::ALL.iter().map(|&v| (v, Vec::new())).collect();
    for seed in 0..5u64 {
        let model = train_ddbn(&data.train, &HIDDEN, &TrainConfig { seed, ..train_config() }).unwrap();
        for (variant, list) in totals.iter_mut() {
            let mut cfg = search_config();
            cfg.variant = *variant;
            cfg.order_seed = seed;
            cfg.retrain.seed = seed;
            let out = search_from_model(&model, &data.splits(), &cfg).unwrap();
            show!(
                "seed {seed} {variant}: total bits {}, mean {:.3}, relative accuracy {:.4}, histogram {:?}",
                out.report.total_hidden_bits,
                out.report.mean_hidden_bits,
                out.report.final_relative_accuracy,
                out.map.histogram()
            );
            list.push(out.report.total_hidden_bits);
        }
    }
    let med = |v: Variant| median(&mut totals.iter().find(|t| t.0 == v).unwrap().1.clone());
    let (full, no_retrain, no_crit, neither) = (
        med(Variant::Full),
        med(Variant::NoRetrain),
        med(Variant::NoCriticality),
        med(Variant::Neither),
    );
    let pass = full <= no_retrain && full <= no_crit;
    show!(
        "{} criterion 8: ablation ordering (median total bits: full {full}, no_retrain {no_retrain}, \
         no_criticality {no_crit}, neither {neither}) [{:.1}s]",
        if pass { "PASS" } else { "FAIL" },
        start.elapsed().as_secs_f64()
    );
    assert!(pass);
}

use std::path::{Path, PathBuf};
use std::time::Instant;

use qdbn::criticality::{criticality_scores, rank_neurons};
use qdbn::dataset::{load_idx, LabeledBinaryDataset, MnistPaths};
use qdbn::ddbn::{encode_model, evaluate, export_json, load_model, train_ddbn, ClassifyMode, DdbnModel};
use qdbn::search::{approximation_curve, mean_accuracy, mean_curve, random_order, search_from_model, Splits};
use qdbn::{PrecisionMap, SearchError};
use serde::Serialize;

use crate::config::{RunConfig, Split};
use crate::output::OutputDir;
use crate::CliError;

pub struct Data {
    pub train: LabeledBinaryDataset,
    pub validation: LabeledBinaryDataset,
    pub test: LabeledBinaryDataset,
}

impl Data {
    pub fn load(cfg: &RunConfig) -> Result<Self, CliError> {
        let paths = MnistPaths::in_dir(&cfg.data.mnist_dir);
        let data = |e: qdbn::DatasetError| CliError::Data(e.to_string());
        let full = load_idx(&paths.train_images, &paths.train_labels).map_err(data)?;
        let test = load_idx(&paths.test_images, &paths.test_labels).map_err(data)?;
        let n_val = cfg.data.validation_samples;
        let n_train = cfg.data.train_samples.unwrap_or(full.len().saturating_sub(n_val));
        if n_train == 0 || n_train + n_val > full.len() {
            return Err(CliError::Data(format!(
                "{} training + {} validation samples requested but {} has {} images",
                n_train,
                n_val,
                paths.train_images.display(),
                full.len()
            )));
        }
        let train_idx: Vec<usize> = (0..n_train).collect();
        let val_idx: Vec<usize> = (n_train..n_train + n_val).collect();
        Ok(Self {
            train: full.select(&train_idx),
            validation: full.select(&val_idx),
            test,
        })
    }

    pub fn split(&self, split: Split) -> &LabeledBinaryDataset {
        match split {
            Split::Train => &self.train,
            Split::Validation => &self.validation,
            Split::Test => &self.test,
        }
    }

    fn splits(&self) -> Splits<'_> {
        Splits {
            train: &self.train,
            validation: &self.validation,
            test: Some(&self.test),
        }
    }
}

fn model_err(e: impl std::fmt::Display) -> CliError {
    CliError::Data(e.to_string())
}

fn accuracy(model: &DdbnModel, map: Option<&PrecisionMap>, data: &LabeledBinaryDataset, mode: ClassifyMode) -> Result<f64, CliError> {
    Ok(evaluate(model, map, data, mode).map_err(model_err)?.accuracy)
}

pub fn load_input_model(path: &Path) -> Result<(DdbnModel, Option<PrecisionMap>), CliError> {
    load_model(path).map_err(|e| match e {
        qdbn::ddbn::ModelFileError::Io { .. } => CliError::Data(e.to_string()),
        other => CliError::Data(format!("{}: {other}", path.display())),
    })
}

#[derive(Serialize)]
struct TrainSummary {
    layer_sizes: Vec<usize>,
    train_samples: usize,
    validation_samples: usize,
    validation_accuracy: f64,
    test_accuracy: f64,
    seconds: f64,
}

pub fn train(cfg: &RunConfig, out: &OutputDir) -> Result<(), CliError> {
    let data = Data::load(cfg)?;
    eprintln!(
        "training {:?} on {} samples ({} epochs per layer)",
        cfg.model.hidden_sizes,
        data.train.len(),
        cfg.train.epochs
    );
    let start = Instant::now();
    let model = train_ddbn(&data.train, &cfg.model.hidden_sizes, &cfg.train).map_err(model_err)?;
    let seconds = start.elapsed().as_secs_f64();
    let summary = TrainSummary {
        layer_sizes: model.layer_sizes().to_vec(),
        train_samples: data.train.len(),
        validation_samples: data.validation.len(),
        validation_accuracy: accuracy(&model, None, &data.validation, ClassifyMode::MeanField)?,
        test_accuracy: accuracy(&model, None, &data.test, ClassifyMode::MeanField)?,
        seconds,
    };
    out.write("model.adbn", &encode_model(&model, None).map_err(model_err)?)?;
    out.write("model.json", export_json(&model, None).as_bytes())?;
    out.write_json("train_summary.json", &summary)?;
    println!(
        "validation accuracy {:.4}, test accuracy {:.4} ({seconds:.1}s)",
        summary.validation_accuracy, summary.test_accuracy
    );
    Ok(())
}

pub fn search(cfg: &RunConfig, model_path: &Path, out: &OutputDir) -> Result<(), CliError> {
    let (model, _) = load_input_model(model_path)?;
    let data = Data::load(cfg)?;
    eprintln!("searching ({} variant, epsilon {})", cfg.search.variant, cfg.search.max_relative_accuracy_loss);
    let outcome = search_from_model(&model, &data.splits(), &cfg.search).map_err(|e| match e {
        SearchError::InfeasibleConstraint { .. } => CliError::Infeasible(e.to_string()),
        SearchError::Config(c) => CliError::Config(c.to_string()),
        other => CliError::Data(other.to_string()),
    })?;
    out.write(
        "final_model.adbn",
        &encode_model(&outcome.model, Some(&outcome.map)).map_err(model_err)?,
    )?;
    out.write("final_model.json", export_json(&outcome.model, Some(&outcome.map)).as_bytes())?;
    out.write("trace.jsonl", outcome.trace.to_jsonl().as_bytes())?;
    out.write_jsonl("histogram.jsonl", &outcome.report.histogram)?;
    out.write_json("report.json", &outcome.report)?;
    let r = &outcome.report;
    println!(
        "relative accuracy {:.4} (validation {:.4} vs baseline {:.4}), mean hidden frac bits {:.3}, {} pruned",
        r.final_relative_accuracy, r.final_validation_accuracy, r.baseline_validation_accuracy, r.mean_hidden_bits, r.pruned_neurons
    );
    Ok(())
}

#[derive(Serialize)]
struct CurveSummary {
    split: Split,
    frac_bits: u32,
    points: usize,
    criticality_mean_accuracy: f64,
    random_mean_accuracy: Vec<(u64, f64)>,
}

pub fn curve(cfg: &RunConfig, model_path: &Path, out: &OutputDir) -> Result<(), CliError> {
    let (model, _) = load_input_model(model_path)?;
    let data = Data::load(cfg)?;
    let eval_data = data.split(cfg.curve.split);
    let map = PrecisionMap::uniform(model.hidden_sizes(), cfg.curve.frac_bits);
    let mode = ClassifyMode::MeanField;
    let scores = criticality_scores(&model, None, &data.train, &cfg.search.criticality).map_err(model_err)?;
    out.write_jsonl("criticality_scores.jsonl", &scores.rows())?;
    let order = rank_neurons(&scores);
    let crit = approximation_curve(&model, &map, &order, eval_data, mode).map_err(model_err)?;
    out.write_jsonl("curve_criticality.jsonl", &crit)?;
    let mut randoms = Vec::new();
    for &seed in &cfg.curve.random_seeds {
        let order = random_order(model.hidden_sizes(), seed);
        let c = approximation_curve(&model, &map, &order, eval_data, mode).map_err(model_err)?;
        out.write_jsonl(&format!("curve_random_seed{seed}.jsonl"), &c)?;
        randoms.push((seed, c));
    }
    let curves: Vec<_> = randoms.iter().map(|(_, c)| c.clone()).collect();
    out.write_jsonl("curve_random_mean.jsonl", &mean_curve(&curves))?;
    let summary = CurveSummary {
        split: cfg.curve.split,
        frac_bits: cfg.curve.frac_bits,
        points: crit.len(),
        criticality_mean_accuracy: mean_accuracy(&crit),
        random_mean_accuracy: randoms.iter().map(|(s, c)| (*s, mean_accuracy(c))).collect(),
    };
    out.write_json("curve_summary.json", &summary)?;
    println!(
        "mean accuracy over {} points: criticality order {:.4}, random orders {:.4}",
        crit.len(),
        summary.criticality_mean_accuracy,
        mean_accuracy(&mean_curve(&curves))
    );
    Ok(())
}

#[derive(Serialize)]
struct EvalReport {
    model: PathBuf,
    split: Split,
    mode: ClassifyMode,
    quantized: bool,
    samples: usize,
    correct: usize,
    accuracy: f64,
    /// `confusion[true][predicted]`.
    confusion: Vec<Vec<usize>>,
}

pub fn eval(cfg: &RunConfig, model_path: &Path, out: Option<&OutputDir>) -> Result<(), CliError> {
    let (model, map) = load_input_model(model_path)?;
    let data = Data::load(cfg)?;
    let e = evaluate(&model, map.as_ref(), data.split(cfg.eval.split), cfg.eval.mode).map_err(model_err)?;
    let report = EvalReport {
        model: model_path.to_path_buf(),
        split: cfg.eval.split,
        mode: cfg.eval.mode,
        quantized: map.is_some(),
        samples: e.samples,
        correct: e.correct,
        accuracy: e.accuracy,
        confusion: e.confusion,
    };
    println!("accuracy {:.4} ({} / {})", report.accuracy, report.correct, report.samples);
    println!("confusion (rows: true class, columns: predicted class)");
    for (t, row) in report.confusion.iter().enumerate() {
        let cells: Vec<String> = row.iter().map(|c| format!("{c:>5}")).collect();
        println!("{t:>2} {}", cells.join(""));
    }
    if let Some(out) = out {
        out.write_json("eval.json", &report)?;
    }
    Ok(())
}

use std::fs;
use std::path::{Path, PathBuf};

use qdbn::ddbn::ClassifyMode;
use qdbn::search::SearchConfig;
use qdbn::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Which dataset split a command reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Validation,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Directory holding the four MNIST IDX files.
    pub mnist_dir: PathBuf,
    /// Training items: the first `train_samples` training images, or all
    /// images not used for validation.
    pub train_samples: Option<usize>,
    /// Validation items follow the training items in the training file.
    pub validation_samples: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            mnist_dir: PathBuf::from("data/mnist"),
            train_samples: None,
            validation_samples: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden_sizes: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden_sizes: vec![100, 50],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CurveConfig {
    pub random_seeds: Vec<u64>,
    pub split: Split,
    /// Uniform fractional bits of the map the curve starts from.
    pub frac_bits: u32,
}

impl Default for CurveConfig {
    fn default() -> Self {
        Self {
            random_seeds: (0..5).collect(),
            split: Split::Test,
            frac_bits: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub split: Split,
    pub mode: ClassifyMode,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            split: Split::Test,
            mode: ClassifyMode::MeanField,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// When set, replaces every seed below (training, retraining, random
    /// orders, criticality subsampling and stochastic evaluation).
    pub seed: Option<u64>,
    pub output_dir: Option<PathBuf>,
    /// Input model for `search`, `curve` and `eval`.
    pub model_path: Option<PathBuf>,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub search: SearchConfig,
    pub curve: CurveConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    /// Pushes the top-level seed into every seeded component.
    pub fn apply_seed(&mut self) {
        let Some(seed) = self.seed else { return };
        self.train.seed = seed;
        self.search.retrain.seed = seed;
        self.search.order_seed = seed;
        self.search.criticality.seed = seed;
        for mode in [Some(&mut self.search.eval_mode), self.search.report_mode.as_mut(), Some(&mut self.eval.mode)]
            .into_iter()
            .flatten()
        {
            if let ClassifyMode::Stochastic { seed: s, .. } = mode {
                *s = seed;
            }
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let cfg = |e: qdbn::ConfigError| CliError::Config(e.to_string());
        if self.model.hidden_sizes.is_empty() || self.model.hidden_sizes.contains(&0) {
            return Err(CliError::Config(
                "model.hidden_sizes needs at least one layer and no zero sizes".into(),
            ));
        }
        self.train.validate().map_err(cfg)?;
        self.search.validate().map_err(cfg)?;
        if self.data.validation_samples == 0 {
            return Err(CliError::Config("data.validation_samples must be at least 1".into()));
        }
        if self.data.train_samples == Some(0) {
            return Err(CliError::Config("data.train_samples must be at least 1".into()));
        }
        if self.curve.random_seeds.is_empty() {
            return Err(CliError::Config("curve.random_seeds must not be empty".into()));
        }
        if !(1..=64).contains(&self.curve.frac_bits) {
            return Err(CliError::Config("curve.frac_bits must lie in 1..=64".into()));
        }
        if let ClassifyMode::Stochastic { samples: 0, .. } = self.eval.mode {
            return Err(CliError::Config("eval.mode needs at least one sample".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_and_validate() {
        let c = RunConfig::default();
        c.validate().unwrap();
        let back: RunConfig = toml::from_str(&c.to_toml()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(toml::from_str::<RunConfig>("sed = 3").is_err());
        assert!(toml::from_str::<RunConfig>("[train]\nlearning_rat = 0.1").is_err());
        assert!(toml::from_str::<RunConfig>("[search]\nepsilon = 0.1").is_err());
    }

    #[test]
    fn shipped_config_is_valid() {
        let c: RunConfig = toml::from_str(include_str!("../../../configs/mnist.toml")).unwrap();
        c.validate().unwrap();
        assert_eq!(c.model.hidden_sizes, vec![100, 50]);
    }

    #[test]
    fn parses_nested_sections() {
        let c: RunConfig = toml::from_str(
            r#"
            seed = 7
            [data]
            train_samples = 500
            [model]
            hidden_sizes = [20, 10]
            [search]
            variant = "no_retrain"
            max_relative_accuracy_loss = 0.2
            [search.retrain]
            epochs = 1
            [eval.mode]
            mode = "stochastic"
            samples = 10
            seed = 1
            "#,
        )
        .unwrap();
        let mut c = c;
        c.apply_seed();
        assert_eq!(c.train.seed, 7);
        assert_eq!(c.search.order_seed, 7);
        assert_eq!(c.eval.mode, ClassifyMode::Stochastic { samples: 10, seed: 7 });
        assert_eq!(c.search.variant, qdbn::Variant::NoRetrain);
        c.validate().unwrap();
    }

    #[test]
    fn invalid_values_rejected() {
        let mut c = RunConfig::default();
        c.search.max_relative_accuracy_loss = 1.5;
        assert!(matches!(c.validate(), Err(CliError::Config(_))));
        let mut c = RunConfig::default();
        c.model.hidden_sizes = vec![];
        assert!(c.validate().is_err());
    }
}

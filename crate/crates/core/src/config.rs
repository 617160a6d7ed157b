//! Experiment configuration: a single JSON document with defaults for every
//! field.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{FedbmError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
pub enum Method {
    /// Frozen concept classifier plus server-trained generator.
    #[serde(rename = "fedbm")]
    #[value(name = "fedbm")]
    FedBm,
    /// Plain federated averaging with a trainable linear head.
    #[serde(rename = "fedavg")]
    #[value(name = "fedavg")]
    FedAvg,
    /// Frozen concept classifier, no generator.
    #[serde(rename = "lkcc-only")]
    #[value(name = "lkcc-only")]
    LkccOnly,
    /// Random frozen classifier, generator conditioned on concepts.
    #[serde(rename = "cgde-only")]
    #[value(name = "cgde-only")]
    CgdeOnly,
}

impl Method {
    pub fn uses_generator(self) -> bool {
        matches!(self, Method::FedBm | Method::CgdeOnly)
    }

    pub fn default_classifier(self) -> Option<ClassifierKind> {
        match self {
            Method::FedBm | Method::LkccOnly => Some(ClassifierKind::Distribution),
            Method::CgdeOnly => Some(ClassifierKind::Random),
            Method::FedAvg => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Method::FedBm => "fedbm",
            Method::FedAvg => "fedavg",
            Method::LkccOnly => "lkcc-only",
            Method::CgdeOnly => "cgde-only",
        }
    }
}

/// How the frozen classifier is built from the concept embeddings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassifierKind {
    /// Per-class means and variances.
    Distribution,
    /// Per-class means only.
    Mean,
    /// Random unit columns, no variance.
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum EmbeddingSource {
    File {
        path: PathBuf,
    },
    Synthetic {
        classes: usize,
        prompts: usize,
        dim: usize,
        spread: f64,
        /// Falls back to the run seed.
        #[serde(default)]
        seed: Option<u64>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum BenchmarkSource {
    Synthetic {
        classes: usize,
        input_dim: usize,
        n_per_class: usize,
        separation: f64,
    },
    Csv {
        train: PathBuf,
        val: PathBuf,
        test: PathBuf,
        label_column: String,
        classes: usize,
    },
}

impl BenchmarkSource {
    pub fn classes(&self) -> usize {
        match self {
            BenchmarkSource::Synthetic { classes, .. } | BenchmarkSource::Csv { classes, .. } => {
                *classes
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub method: Method,
    /// Overrides the method's classifier; not allowed with `fedavg`.
    pub classifier: Option<ClassifierKind>,
    pub embeddings: EmbeddingSource,
    pub benchmark: BenchmarkSource,
    pub clients: usize,
    pub beta: f64,
    pub sample_ratio: f64,
    pub local_epochs: usize,
    pub rounds: usize,
    pub tau: f64,
    pub lambda_div: f64,
    pub lambda_dis: f64,
    pub synthetic_batch_size: usize,
    pub refresh_period: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub generator_steps: usize,
    pub generator_batch_size: usize,
    pub generator_learning_rate: f64,
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Train sampled clients on the rayon pool.
    pub parallel: bool,
    /// Fill the CSV `seconds` column and the summary wall time.
    pub record_timings: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            method: Method::FedBm,
            classifier: None,
            embeddings: EmbeddingSource::Synthetic {
                classes: 4,
                prompts: 8,
                dim: 32,
                spread: 0.1,
                seed: None,
            },
            benchmark: BenchmarkSource::Synthetic {
                classes: 4,
                input_dim: 16,
                n_per_class: 500,
                separation: 4.0,
            },
            clients: 8,
            beta: 0.05,
            sample_ratio: 0.5,
            local_epochs: 2,
            rounds: 50,
            tau: 1.0,
            lambda_div: 1.0,
            lambda_dis: 1.0,
            synthetic_batch_size: 16,
            refresh_period: 5,
            learning_rate: 1e-2,
            batch_size: 8,
            generator_steps: 50,
            generator_batch_size: 32,
            generator_learning_rate: 1e-2,
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            parallel: true,
            record_timings: false,
        }
    }
}

fn positive(field: &str, v: f64) -> Result<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(FedbmError::config(
            field,
            format!("{v} must be finite and > 0"),
        ))
    }
}

fn at_least(field: &str, v: usize, min: usize) -> Result<()> {
    if v >= min {
        Ok(())
    } else {
        Err(FedbmError::config(
            field,
            format!("{v} must be at least {min}"),
        ))
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self =
            serde_json::from_str(text).map_err(|e| FedbmError::config("config", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| FedbmError::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// The classifier actually used, `None` for a trainable head.
    pub fn classifier_kind(&self) -> Option<ClassifierKind> {
        self.classifier.or(self.method.default_classifier())
    }

    pub fn validate(&self) -> Result<()> {
        at_least("clients", self.clients, 1)?;
        positive("beta", self.beta)?;
        positive("sample_ratio", self.sample_ratio)?;
        if self.sample_ratio > 1.0 {
            return Err(FedbmError::config("sample_ratio", "must be at most 1"));
        }
        positive("tau", self.tau)?;
        positive("learning_rate", self.learning_rate)?;
        positive("generator_learning_rate", self.generator_learning_rate)?;
        for (name, v) in [
            ("lambda_div", self.lambda_div),
            ("lambda_dis", self.lambda_dis),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(FedbmError::config(
                    name,
                    format!("{v} must be finite and >= 0"),
                ));
            }
        }
        at_least("batch_size", self.batch_size, 2)?;
        at_least("generator_batch_size", self.generator_batch_size, 2)?;
        at_least("refresh_period", self.refresh_period, 1)?;
        if self.output_dir.as_os_str().is_empty() {
            return Err(FedbmError::config("output_dir", "must not be empty"));
        }
        if self.method == Method::FedAvg && self.classifier.is_some() {
            return Err(FedbmError::config(
                "classifier",
                "fedavg trains its own head",
            ));
        }
        match &self.embeddings {
            EmbeddingSource::Synthetic {
                classes,
                prompts,
                dim,
                spread,
                ..
            } => {
                at_least("embeddings.classes", *classes, 2)?;
                at_least("embeddings.prompts", *prompts, 2)?;
                at_least("embeddings.dim", *dim, 1)?;
                if !(spread.is_finite() && *spread >= 0.0) {
                    return Err(FedbmError::config(
                        "embeddings.spread",
                        format!("{spread} must be >= 0"),
                    ));
                }
                if *classes != self.benchmark.classes() {
                    return Err(FedbmError::config(
                        "embeddings.classes",
                        format!(
                            "{classes} differs from the benchmark's {}",
                            self.benchmark.classes()
                        ),
                    ));
                }
            }
            EmbeddingSource::File { path } => {
                if path.as_os_str().is_empty() {
                    return Err(FedbmError::config("embeddings.path", "must not be empty"));
                }
            }
        }
        match &self.benchmark {
            BenchmarkSource::Synthetic {
                classes,
                input_dim,
                n_per_class,
                separation,
            } => {
                at_least("benchmark.classes", *classes, 2)?;
                at_least("benchmark.input_dim", *input_dim, 2)?;
                at_least("benchmark.n_per_class", *n_per_class, 1)?;
                if !(separation.is_finite() && *separation >= 0.0) {
                    return Err(FedbmError::config(
                        "benchmark.separation",
                        format!("{separation} must be >= 0"),
                    ));
                }
            }
            BenchmarkSource::Csv { classes, .. } => at_least("benchmark.classes", *classes, 2)?,
        }
        Ok(())
    }
}

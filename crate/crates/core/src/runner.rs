//! Builds a simulation from a config, runs it and writes the artifacts.

use std::fs;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use ndarray::Array1;
use rand::{Rng, RngCore};
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::concept::{
    estimate_distributions, synthetic_embeddings, ConceptDistribution, ConceptEmbeddingSet,
    DistributionClassifier,
};
use crate::config::{BenchmarkSource, ClassifierKind, EmbeddingSource, ExperimentConfig, Method};
use crate::data::{dirichlet_partition, load_csv, make_synthetic_benchmark, Benchmark, Split};
use crate::error::{FedbmError, Result};
use crate::federation::{
    client_stream, rng_stream, write_reports_csv, ClientState, Evaluation, GeneratorTrainingConfig,
    Head, LocalTrainingConfig, Network, RoundReport, ServerState, Simulation, STREAM_BENCHMARK,
    STREAM_EMBEDDINGS, STREAM_MODEL_INIT, STREAM_PARTITION, STREAM_RANDOM_CLASSIFIER,
    STREAM_SERVER,
};
use crate::losses::GeneratorLossConfig;
use crate::nn::{checkpoint, ConditionalGenerator, FeatureExtractor, LinearHead, ParameterVector};

pub const METRICS_FILE: &str = "metrics.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const CHECKPOINT_FILE: &str = "best_model.fbm";

pub fn load_embeddings(cfg: &ExperimentConfig) -> Result<ConceptEmbeddingSet> {
    match &cfg.embeddings {
        EmbeddingSource::File { path } => ConceptEmbeddingSet::load(path),
        EmbeddingSource::Synthetic {
            classes,
            prompts,
            dim,
            spread,
            seed,
        } => {
            let mut rng = rng_stream(seed.unwrap_or(cfg.seed), STREAM_EMBEDDINGS);
            synthetic_embeddings(*classes, *prompts, *dim, *spread, &mut rng)
        }
    }
}

pub fn load_benchmark(cfg: &ExperimentConfig) -> Result<Benchmark> {
    match &cfg.benchmark {
        BenchmarkSource::Synthetic {
            classes,
            input_dim,
            n_per_class,
            separation,
        } => {
            let seed = rng_stream(cfg.seed, STREAM_BENCHMARK).next_u64();
            make_synthetic_benchmark(*classes, *input_dim, *n_per_class, *separation, seed)
        }
        BenchmarkSource::Csv {
            train,
            val,
            test,
            label_column,
            classes,
        } => Ok(Benchmark {
            train: load_csv(train, label_column, *classes, Split::Train)?,
            val: load_csv(val, label_column, *classes, Split::Val)?,
            test: load_csv(test, label_column, *classes, Split::Test)?,
        }),
    }
}

/// Unit-norm random class directions with zero variance.
pub fn random_distributions<R: Rng + ?Sized>(
    classes: usize,
    dim: usize,
    rng: &mut R,
) -> Result<Vec<ConceptDistribution>> {
    (0..classes)
        .map(|_| {
            let v = Array1::from_shape_fn(dim, |_| rng.sample::<f64, _>(StandardNormal));
            let norm = v.dot(&v).sqrt().max(1e-12);
            ConceptDistribution::new(v / norm, Array1::zeros(dim))
        })
        .collect()
}

pub fn build_classifier(
    kind: ClassifierKind,
    dists: &[ConceptDistribution],
    tau: f64,
    seed: u64,
) -> Result<DistributionClassifier> {
    match kind {
        ClassifierKind::Distribution => DistributionClassifier::build(dists, tau),
        ClassifierKind::Mean => {
            let means: Vec<ConceptDistribution> = dists
                .iter()
                .map(|d| ConceptDistribution::new(d.mean.clone(), Array1::zeros(d.dim())))
                .collect::<Result<_>>()?;
            DistributionClassifier::build(&means, tau)
        }
        ClassifierKind::Random => {
            let dim = dists.first().map_or(0, ConceptDistribution::dim);
            let mut rng = rng_stream(seed, STREAM_RANDOM_CLASSIFIER);
            DistributionClassifier::build(&random_distributions(dists.len(), dim, &mut rng)?, tau)
        }
    }
}

/// Everything a run needs, with every random stream derived from `cfg.seed`.
pub fn build_simulation(cfg: &ExperimentConfig) -> Result<Simulation> {
    cfg.validate()?;
    let embeddings = load_embeddings(cfg)?;
    let bench = load_benchmark(cfg)?;
    let classes = bench.train.classes();
    if embeddings.class_count() != classes {
        return Err(FedbmError::config(
            "embeddings",
            format!(
                "{} concept classes for a {classes}-class benchmark",
                embeddings.class_count()
            ),
        ));
    }
    let input_dim = bench.train.dim();
    let embed_dim = embeddings.dim();
    let dists = estimate_distributions(&embeddings);

    let plan = dirichlet_partition(
        bench.train.labels(),
        cfg.clients,
        cfg.beta,
        &mut rng_stream(cfg.seed, STREAM_PARTITION),
    )?;

    let mut init = rng_stream(cfg.seed, STREAM_MODEL_INIT);
    let extractor = FeatureExtractor::new(input_dim, embed_dim, &mut init);
    let head = match cfg.classifier_kind() {
        Some(kind) => Head::Frozen(Arc::new(build_classifier(kind, &dists, cfg.tau, cfg.seed)?)),
        None => Head::Linear(LinearHead::new(embed_dim, classes, &mut init)),
    };
    let generator = cfg
        .method
        .uses_generator()
        .then(|| ConditionalGenerator::new(embed_dim, input_dim, &mut init));
    let network = Network::new(extractor, head);

    let clients = plan
        .clients
        .iter()
        .enumerate()
        .map(|(c, idx)| {
            ClientState::new(
                c,
                bench.train.subset(idx),
                network.clone(),
                client_stream(cfg.seed, c),
            )
        })
        .collect();
    let server = ServerState::new(
        network,
        generator,
        dists,
        cfg.refresh_period,
        cfg.sample_ratio,
    );
    let local = LocalTrainingConfig {
        local_epochs: cfg.local_epochs,
        batch_size: cfg.batch_size,
        synthetic_batch_size: if cfg.method.uses_generator() {
            cfg.synthetic_batch_size
        } else {
            0
        },
        learning_rate: cfg.learning_rate,
    };
    let generator_cfg = GeneratorTrainingConfig {
        steps: cfg.generator_steps,
        batch_size: cfg.generator_batch_size,
        learning_rate: cfg.generator_learning_rate,
        loss: GeneratorLossConfig {
            lambda_div: cfg.lambda_div,
            lambda_dis: cfg.lambda_dis,
        },
    };
    Ok(Simulation::new(
        server,
        clients,
        bench.val,
        bench.test,
        local,
        generator_cfg,
        rng_stream(cfg.seed, STREAM_SERVER),
        cfg.parallel,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitMetrics {
    pub val: Evaluation,
    pub test: Evaluation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub config: ExperimentConfig,
    pub seed: u64,
    pub method: Method,
    pub rounds_completed: usize,
    pub initial: SplitMetrics,
    /// Round with the highest validation accuracy; `None` when no round ran.
    pub best_round: Option<usize>,
    pub best: SplitMetrics,
    #[serde(rename = "final")]
    pub last: SplitMetrics,
    pub wall_seconds: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub reports: Vec<RoundReport>,
    pub summary: RunSummary,
}

/// Runs all rounds in memory. `on_round` sees each report as it is produced.
pub fn simulate(
    cfg: &ExperimentConfig,
    mut on_round: impl FnMut(&RoundReport),
) -> Result<(RunOutcome, ParameterVector)> {
    let start = Instant::now();
    let mut sim = build_simulation(cfg)?;
    let (val, test) = sim.evaluate()?;
    let initial = SplitMetrics { val, test };
    let mut best = (None, initial, sim.server.global_vector());
    let mut reports = Vec::with_capacity(cfg.rounds);
    for _ in 0..cfg.rounds {
        let report = sim.run_round()?;
        on_round(&report);
        let metrics = SplitMetrics {
            val: report.val,
            test: report.test,
        };
        if best.0.is_none() || metrics.val.accuracy > best.1.val.accuracy {
            best = (Some(report.round), metrics, sim.server.global_vector());
        }
        reports.push(report);
    }
    let last = reports.last().map_or(initial, |r| SplitMetrics {
        val: r.val,
        test: r.test,
    });
    let summary = RunSummary {
        config: cfg.clone(),
        seed: cfg.seed,
        method: cfg.method,
        rounds_completed: reports.len(),
        initial,
        best_round: best.0,
        best: best.1,
        last,
        wall_seconds: cfg.record_timings.then(|| start.elapsed().as_secs_f64()),
    };
    Ok((RunOutcome { reports, summary }, best.2))
}

/// Runs the experiment and writes the metrics CSV, the JSON summary and the
/// best-validation checkpoint into `cfg.output_dir`.
pub fn run(cfg: &ExperimentConfig) -> Result<RunOutcome> {
    let dir = cfg.output_dir.as_path();
    fs::create_dir_all(dir).map_err(|e| FedbmError::io(dir, e))?;
    let (outcome, best) = simulate(cfg, |r| {
        log::info!(
            "round {} participants={} loss={:.4} test_acc={:.4} val_acc={:.4}",
            r.round,
            r.participants.len(),
            r.mean_local_loss,
            r.test.accuracy,
            r.val.accuracy
        )
    })?;
    write_artifacts(dir, cfg, &outcome)?;
    checkpoint::save(dir.join(CHECKPOINT_FILE), &best)?;
    Ok(outcome)
}

fn write_artifacts(dir: &Path, cfg: &ExperimentConfig, outcome: &RunOutcome) -> Result<()> {
    let csv_path = dir.join(METRICS_FILE);
    let file = fs::File::create(&csv_path).map_err(|e| FedbmError::io(&csv_path, e))?;
    write_reports_csv(file, &outcome.reports, cfg.record_timings)?;
    let summary_path = dir.join(SUMMARY_FILE);
    let json = serde_json::to_string_pretty(&outcome.summary)?;
    fs::write(&summary_path, json + "\n").map_err(|e| FedbmError::io(&summary_path, e))
}

/// Writes a synthetic concept set as CEB1.
pub fn gen_synthetic_embeddings(
    path: impl AsRef<Path>,
    classes: usize,
    prompts: usize,
    dim: usize,
    spread: f64,
    seed: u64,
) -> Result<ConceptEmbeddingSet> {
    let set = synthetic_embeddings(
        classes,
        prompts,
        dim,
        spread,
        &mut rng_stream(seed, STREAM_EMBEDDINGS),
    )?;
    set.save(path)?;
    Ok(set)
}

use std::sync::Arc;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::client::{draw_conditions, GeneratorBroadcast};
use super::model::Network;
use crate::concept::{ConceptDistribution, DistributionClassifier};
use crate::error::{FedbmError, Result};
use crate::losses::{
    distribution_loss, diversity_loss, generator_loss, semantic_loss, GeneratorLoss,
    GeneratorLossConfig,
};
use crate::nn::{
    load_params, Adam, ConditionalGenerator, Normalization, ParameterVector, Parameterized,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeneratorTrainingConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub loss: GeneratorLossConfig,
}

/// Mean loss components over one generator refresh.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeneratorStats {
    pub total: f64,
    pub semantic: f64,
    pub diversity: f64,
    pub distribution: f64,
    pub steps: usize,
}

pub struct ServerState {
    global: Network,
    generator: Option<ConditionalGenerator>,
    generator_opt: Option<Adam>,
    conditions: Arc<Vec<ConceptDistribution>>,
    refreshed: bool,
    pub round: usize,
    pub refresh_period: usize,
    pub sample_ratio: f64,
}

impl ServerState {
    /// `generator` is `None` for methods that never synthesize data.
    pub fn new(
        global: Network,
        generator: Option<ConditionalGenerator>,
        conditions: Vec<ConceptDistribution>,
        refresh_period: usize,
        sample_ratio: f64,
    ) -> Self {
        Self {
            global,
            generator,
            generator_opt: None,
            conditions: Arc::new(conditions),
            refreshed: false,
            round: 0,
            refresh_period,
            sample_ratio,
        }
    }

    pub fn global(&self) -> &Network {
        &self.global
    }

    pub fn global_vector(&self) -> ParameterVector {
        self.global.flatten()
    }

    pub fn set_global(&mut self, vector: &ParameterVector) -> Result<()> {
        self.global.load(vector)
    }

    pub fn classifier(&self) -> Option<&DistributionClassifier> {
        self.global.frozen_classifier()
    }

    pub fn generator(&self) -> Option<&ConditionalGenerator> {
        self.generator.as_ref()
    }

    pub fn conditions(&self) -> &[ConceptDistribution] {
        &self.conditions
    }

    /// What clients receive this round; `None` until the first refresh.
    pub fn broadcast(&self) -> Option<GeneratorBroadcast> {
        match (&self.generator, self.refreshed) {
            (Some(g), true) => Some(GeneratorBroadcast {
                generator: Arc::new(g.clone()),
                conditions: Arc::clone(&self.conditions),
            }),
            _ => None,
        }
    }

    /// Refreshes happen at the start of every `refresh_period`-th round,
    /// never before the first aggregation.
    pub fn refresh_due(&self) -> bool {
        self.generator.is_some()
            && self.refresh_period > 0
            && self.round > 0
            && self.round.is_multiple_of(self.refresh_period)
    }

    /// Trains the generator against the frozen global model.
    pub fn train_generator<R: Rng + ?Sized>(
        &mut self,
        cfg: &GeneratorTrainingConfig,
        rng: &mut R,
    ) -> Result<GeneratorStats> {
        let generator = self
            .generator
            .as_mut()
            .ok_or_else(|| FedbmError::InvalidArgument("server has no generator".into()))?;
        let stats = train_generator(
            generator,
            &mut self.generator_opt,
            &self.global,
            &self.conditions,
            cfg,
            rng,
        )?;
        self.refreshed = true;
        Ok(stats)
    }
}

/// Generator objective and its flat parameter gradient on fixed conditions.
/// The teacher normalizes with batch statistics but never commits them.
pub fn generator_objective(
    generator: &ConditionalGenerator,
    teacher: &Network,
    conditions: &Array2<f64>,
    labels: &[usize],
    cfg: &GeneratorLossConfig,
) -> Result<(GeneratorLoss, Vec<f64>)> {
    let (samples, gen_cache) = generator.forward(conditions)?;
    let out = teacher
        .extractor
        .forward_with(&samples, Normalization::Batch)?;
    let logits = teacher.head_logits(&out.features)?;
    let sem = semantic_loss(&logits, labels)?;
    let div = diversity_loss(conditions, &samples)?;
    let dis = distribution_loss(&out.batch_stats, &teacher.extractor.running_stats())?;
    let loss = generator_loss(sem, div, dis, cfg);

    let d_features = teacher.head_feature_grad(&out.features, &loss.d_logits);
    let through_teacher =
        teacher
            .extractor
            .backward(&out.cache, &d_features, Some(&loss.d_stats))?;
    let d_samples = through_teacher.input + &loss.d_samples;
    let grads = generator.backward(&gen_cache, &d_samples)?;
    Ok((loss, grads.params))
}

pub fn train_generator<R: Rng + ?Sized>(
    generator: &mut ConditionalGenerator,
    optimizer: &mut Option<Adam>,
    teacher: &Network,
    conditions: &[ConceptDistribution],
    cfg: &GeneratorTrainingConfig,
    rng: &mut R,
) -> Result<GeneratorStats> {
    if cfg.steps > 0 && cfg.batch_size < 2 {
        return Err(FedbmError::config(
            "generator_batch_size",
            "must be at least 2",
        ));
    }
    cfg.loss.validate()?;
    let len = generator.layout().param_len();
    let opt = optimizer.get_or_insert_with(|| Adam::new(cfg.learning_rate, len));
    let mut sums = [0.0; 4];
    for _ in 0..cfg.steps {
        let (z, labels) = draw_conditions(conditions, cfg.batch_size, rng)?;
        let (loss, grads) = generator_objective(generator, teacher, &z, &labels, &cfg.loss)?;
        let mut params = generator.param_slices().concat();
        opt.step(&mut params, &grads)?;
        load_params(generator, &params)?;
        for (s, v) in
            sums.iter_mut()
                .zip([loss.value, loss.semantic, loss.diversity, loss.distribution])
        {
            *s += v;
        }
    }
    let n = cfg.steps.max(1) as f64;
    Ok(GeneratorStats {
        total: sums[0] / n,
        semantic: sums[1] / n,
        diversity: sums[2] / n,
        distribution: sums[3] / n,
        steps: cfg.steps,
    })
}

/// Semantic loss of the current generator on freshly drawn conditions.
pub fn fresh_semantic_loss<R: Rng + ?Sized>(
    generator: &ConditionalGenerator,
    teacher: &Network,
    conditions: &[ConceptDistribution],
    n: usize,
    rng: &mut R,
) -> Result<f64> {
    let (z, labels) = draw_conditions(conditions, n, rng)?;
    let samples = generator.generate(&z)?;
    let features = teacher
        .extractor
        .forward_with(&samples, Normalization::Batch)?
        .features;
    Ok(semantic_loss(&teacher.head_logits(&features)?, &labels)?.value)
}

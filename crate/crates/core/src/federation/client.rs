use std::sync::Arc;

use ndarray::{concatenate, Array2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::model::Network;
use crate::concept::{sample_concept_condition, ConceptDistribution, DistributionClassifier};
use crate::data::LabeledDataset;
use crate::error::{FedbmError, Result};
use crate::nn::{Adam, ConditionalGenerator, ParameterVector, Parameterized};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalTrainingConfig {
    pub local_epochs: usize,
    pub batch_size: usize,
    /// Generated samples appended to every real batch once a generator exists.
    pub synthetic_batch_size: usize,
    pub learning_rate: f64,
}

/// What the server sends along with the generator: the generator itself
/// and the concept distributions that condition it.
#[derive(Debug, Clone)]
pub struct GeneratorBroadcast {
    pub generator: Arc<ConditionalGenerator>,
    pub conditions: Arc<Vec<ConceptDistribution>>,
}

impl GeneratorBroadcast {
    /// `n` uniformly drawn labels, their concept conditions and generated samples.
    pub fn synthesize<R: Rng + ?Sized>(
        &self,
        n: usize,
        rng: &mut R,
    ) -> Result<(Array2<f64>, Array2<f64>, Vec<usize>)> {
        let (conditions, labels) = draw_conditions(&self.conditions, n, rng)?;
        let samples = self.generator.generate(&conditions)?;
        Ok((conditions, samples, labels))
    }
}

/// Labels uniform over classes, each paired with a draw from its concept distribution.
pub fn draw_conditions<R: Rng + ?Sized>(
    dists: &[ConceptDistribution],
    n: usize,
    rng: &mut R,
) -> Result<(Array2<f64>, Vec<usize>)> {
    let dim = dists.first().map_or(0, ConceptDistribution::dim);
    let mut conditions = Array2::zeros((n, dim));
    let mut labels = Vec::with_capacity(n);
    for mut row in conditions.rows_mut() {
        let label = rng.random_range(0..dists.len());
        let (z, label) = sample_concept_condition(dists, label, rng)?;
        row.assign(&z);
        labels.push(label);
    }
    Ok((conditions, labels))
}

#[derive(Debug, Clone)]
pub struct ClientUpdate {
    pub client: usize,
    pub vector: ParameterVector,
    pub mean_loss: f64,
    pub steps: usize,
}

/// One simulated participant. Its samples are private to this type; only
/// parameter vectors leave it.
pub struct ClientState {
    id: usize,
    data: LabeledDataset,
    network: Network,
    optimizer: Option<Adam>,
    rng: ChaCha8Rng,
}

impl ClientState {
    /// `network` carries the broadcast classifier; its trainable weights are
    /// overwritten by the global vector on every update.
    pub fn new(id: usize, data: LabeledDataset, network: Network, rng: ChaCha8Rng) -> Self {
        Self {
            id,
            data,
            network,
            optimizer: None,
            rng,
        }
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn sample_count(&self) -> usize {
        self.data.len()
    }

    pub fn classifier(&self) -> Option<&DistributionClassifier> {
        self.network.frozen_classifier()
    }

    /// Local training from the global weights. With `E = 0` the global
    /// vector comes back unchanged.
    pub fn update(
        &mut self,
        global: &ParameterVector,
        generator: Option<&GeneratorBroadcast>,
        cfg: &LocalTrainingConfig,
    ) -> Result<ClientUpdate> {
        if self.data.is_empty() {
            return Err(FedbmError::InvalidArgument(format!(
                "client {} has no data",
                self.id
            )));
        }
        if cfg.batch_size == 0 {
            return Err(FedbmError::config("batch_size", "must be positive"));
        }
        self.network.load(global)?;
        let param_len = self.network.layout().param_len();
        let opt = self
            .optimizer
            .get_or_insert_with(|| Adam::new(cfg.learning_rate, param_len));

        let synthetic = generator.filter(|_| cfg.synthetic_batch_size > 0);
        let mut order: Vec<usize> = (0..self.data.len()).collect();
        let mut total = 0.0;
        let mut steps = 0;
        for _ in 0..cfg.local_epochs {
            // every epoch permutes the identity order
            order.iter_mut().enumerate().for_each(|(i, o)| *o = i);
            order.shuffle(&mut self.rng);
            for chunk in order.chunks(cfg.batch_size) {
                let (mut x, mut y) = self.data.batch(chunk);
                if let Some(g) = synthetic {
                    let (_, samples, labels) =
                        g.synthesize(cfg.synthetic_batch_size, &mut self.rng)?;
                    x = concatenate(Axis(0), &[x.view(), samples.view()])
                        .expect("real and synthetic samples share a width");
                    y.extend(labels);
                }
                if y.len() < 2 {
                    continue;
                }
                total += self.network.train_step(&x, &y, opt)?;
                steps += 1;
            }
            opt.end_epoch();
        }
        Ok(ClientUpdate {
            client: self.id,
            vector: self.network.flatten(),
            mean_loss: if steps == 0 {
                f64::NAN
            } else {
                total / steps as f64
            },
            steps,
        })
    }
}

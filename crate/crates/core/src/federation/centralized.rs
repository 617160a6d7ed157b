use rand::seq::SliceRandom;
use rand::Rng;

use super::model::Network;
use crate::data::LabeledDataset;
use crate::error::{FedbmError, Result};
use crate::nn::{Adam, ParameterVector, Parameterized};

/// Trains a single model on pooled data and returns its parameter vector
/// after every epoch.
pub fn train_centralized<R: Rng + ?Sized>(
    network: &mut Network,
    data: &LabeledDataset,
    batch_size: usize,
    learning_rate: f64,
    epochs: usize,
    rng: &mut R,
) -> Result<Vec<ParameterVector>> {
    if batch_size == 0 {
        return Err(FedbmError::config("batch_size", "must be positive"));
    }
    let mut opt = Adam::new(learning_rate, network.layout().param_len());
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut history = Vec::with_capacity(epochs);
    for _ in 0..epochs {
        // every epoch permutes the identity order
        order.iter_mut().enumerate().for_each(|(i, o)| *o = i);
        order.shuffle(rng);
        for chunk in order.chunks(batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let (x, y) = data.batch(chunk);
            network.train_step(&x, &y, &mut opt)?;
        }
        opt.end_epoch();
        history.push(network.flatten());
    }
    Ok(history)
}

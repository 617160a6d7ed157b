use ndarray::Array2;
use rand::Rng;

use super::layers::{relu, relu_backward, Linear};
use super::params::{segment, Layout, Parameterized};
use crate::error::{FedbmError, Result};

pub const GENERATOR_HIDDEN: usize = 128;

/// Maps a concept condition `z` (dimension `D`) to a synthetic sample.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionalGenerator {
    pub fc1: Linear,
    pub fc2: Linear,
    pub fc3: Linear,
    generation: u64,
}

#[derive(Debug, Clone)]
pub struct GeneratorCache {
    generation: u64,
    input: Array2<f64>,
    pre1: Array2<f64>,
    act1: Array2<f64>,
    pre2: Array2<f64>,
    act2: Array2<f64>,
}

pub struct GeneratorGrads {
    pub params: Vec<f64>,
    pub input: Array2<f64>,
}

impl ConditionalGenerator {
    pub fn new<R: Rng + ?Sized>(condition_dim: usize, sample_dim: usize, rng: &mut R) -> Self {
        Self {
            fc1: Linear::new(condition_dim, GENERATOR_HIDDEN, rng),
            fc2: Linear::new(GENERATOR_HIDDEN, GENERATOR_HIDDEN, rng),
            fc3: Linear::new(GENERATOR_HIDDEN, sample_dim, rng),
            generation: 0,
        }
    }

    pub fn zeros(condition_dim: usize, sample_dim: usize) -> Self {
        Self {
            fc1: Linear::zeros(condition_dim, GENERATOR_HIDDEN),
            fc2: Linear::zeros(GENERATOR_HIDDEN, GENERATOR_HIDDEN),
            fc3: Linear::zeros(GENERATOR_HIDDEN, sample_dim),
            generation: 0,
        }
    }

    pub fn condition_dim(&self) -> usize {
        self.fc1.input_dim()
    }

    pub fn sample_dim(&self) -> usize {
        self.fc3.output_dim()
    }

    pub fn forward(&self, conditions: &Array2<f64>) -> Result<(Array2<f64>, GeneratorCache)> {
        if conditions.ncols() != self.condition_dim() {
            return Err(FedbmError::DimensionMismatch(format!(
                "conditions have {} columns, generator expects {}",
                conditions.ncols(),
                self.condition_dim()
            )));
        }
        if conditions.iter().any(|v| !v.is_finite()) {
            return Err(FedbmError::NonFinite("generator input".into()));
        }
        let pre1 = self.fc1.forward(conditions);
        let act1 = relu(&pre1);
        let pre2 = self.fc2.forward(&act1);
        let act2 = relu(&pre2);
        let out = self.fc3.forward(&act2);
        Ok((
            out,
            GeneratorCache {
                generation: self.generation,
                input: conditions.clone(),
                pre1,
                act1,
                pre2,
                act2,
            },
        ))
    }

    pub fn generate(&self, conditions: &Array2<f64>) -> Result<Array2<f64>> {
        self.forward(conditions).map(|(x, _)| x)
    }

    pub fn backward(
        &self,
        cache: &GeneratorCache,
        d_samples: &Array2<f64>,
    ) -> Result<GeneratorGrads> {
        if cache.generation != self.generation {
            return Err(FedbmError::StaleCache);
        }
        if d_samples.nrows() != cache.input.nrows() || d_samples.ncols() != self.sample_dim() {
            return Err(FedbmError::DimensionMismatch(format!(
                "upstream gradient {:?} does not match generator output",
                d_samples.dim()
            )));
        }
        let fc3 = self.fc3.backward(&cache.act2, d_samples);
        let d_pre2 = relu_backward(&cache.pre2, &fc3.input);
        let fc2 = self.fc2.backward(&cache.act1, &d_pre2);
        let d_pre1 = relu_backward(&cache.pre1, &fc2.input);
        let fc1 = self.fc1.backward(&cache.input, &d_pre1);
        let params = [
            fc1.weight.as_slice().unwrap(),
            fc1.bias.as_slice().unwrap(),
            fc2.weight.as_slice().unwrap(),
            fc2.bias.as_slice().unwrap(),
            fc3.weight.as_slice().unwrap(),
            fc3.bias.as_slice().unwrap(),
        ]
        .concat();
        Ok(GeneratorGrads {
            params,
            input: fc1.input,
        })
    }
}

impl Parameterized for ConditionalGenerator {
    fn layout(&self) -> Layout {
        Layout {
            params: vec![
                segment("fc1.weight", self.fc1.weight.len()),
                segment("fc1.bias", self.fc1.bias.len()),
                segment("fc2.weight", self.fc2.weight.len()),
                segment("fc2.bias", self.fc2.bias.len()),
                segment("fc3.weight", self.fc3.weight.len()),
                segment("fc3.bias", self.fc3.bias.len()),
            ],
            buffers: Vec::new(),
        }
    }

    fn param_slices(&self) -> Vec<&[f64]> {
        vec![
            self.fc1.weight.as_slice().unwrap(),
            self.fc1.bias.as_slice().unwrap(),
            self.fc2.weight.as_slice().unwrap(),
            self.fc2.bias.as_slice().unwrap(),
            self.fc3.weight.as_slice().unwrap(),
            self.fc3.bias.as_slice().unwrap(),
        ]
    }

    fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        vec![
            self.fc1.weight.as_slice_mut().unwrap(),
            self.fc1.bias.as_slice_mut().unwrap(),
            self.fc2.weight.as_slice_mut().unwrap(),
            self.fc2.bias.as_slice_mut().unwrap(),
            self.fc3.weight.as_slice_mut().unwrap(),
            self.fc3.bias.as_slice_mut().unwrap(),
        ]
    }

    fn touch(&mut self) {
        self.generation += 1;
    }
}

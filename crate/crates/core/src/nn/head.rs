use ndarray::Array2;
use rand::Rng;

use super::layers::Linear;
use super::params::{segment, Layout, Parameterized};

/// Trainable affine classifier used by the plain averaging baseline.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearHead {
    pub fc: Linear,
}

impl LinearHead {
    pub fn new<R: Rng + ?Sized>(dim: usize, classes: usize, rng: &mut R) -> Self {
        Self {
            fc: Linear::new(dim, classes, rng),
        }
    }

    pub fn logits(&self, features: &Array2<f64>) -> Array2<f64> {
        self.fc.forward(features)
    }

    /// Returns flat parameter gradients and the feature gradient.
    pub fn backward(
        &self,
        features: &Array2<f64>,
        d_logits: &Array2<f64>,
    ) -> (Vec<f64>, Array2<f64>) {
        let g = self.fc.backward(features, d_logits);
        let params = [g.weight.as_slice().unwrap(), g.bias.as_slice().unwrap()].concat();
        (params, g.input)
    }
}

impl Parameterized for LinearHead {
    fn layout(&self) -> Layout {
        Layout {
            params: vec![
                segment("fc.weight", self.fc.weight.len()),
                segment("fc.bias", self.fc.bias.len()),
            ],
            buffers: Vec::new(),
        }
    }

    fn param_slices(&self) -> Vec<&[f64]> {
        vec![
            self.fc.weight.as_slice().unwrap(),
            self.fc.bias.as_slice().unwrap(),
        ]
    }

    fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        vec![
            self.fc.weight.as_slice_mut().unwrap(),
            self.fc.bias.as_slice_mut().unwrap(),
        ]
    }
}

//! Feature extractor: two affine+BN+ReLU blocks, an affine projection to the
//! concept-embedding dimension, and row-wise L2 normalization.

use ndarray::Array2;
use rand::Rng;

use super::layers::{
    l2_normalize, l2_normalize_backward, relu, relu_backward, BatchNorm, BnCache, BnStats, Linear,
    Normalization,
};
use super::params::{segment, Layout, Parameterized};
use crate::error::{FedbmError, Result};

pub const HIDDEN: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics normalize and are committed to the running averages.
    Train,
    /// Running statistics normalize; no state changes.
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureExtractor {
    pub fc1: Linear,
    pub bn1: BatchNorm,
    pub fc2: Linear,
    pub bn2: BatchNorm,
    pub proj: Linear,
    generation: u64,
}

#[derive(Debug, Clone)]
pub struct ExtractorCache {
    generation: u64,
    input: Array2<f64>,
    bn1: BnCache,
    pre1: Array2<f64>,
    act1: Array2<f64>,
    bn2: BnCache,
    pre2: Array2<f64>,
    act2: Array2<f64>,
    normalized: Array2<f64>,
    norms: ndarray::Array1<f64>,
}

pub struct ExtractorOutput {
    /// Unit-norm rows, `B x D`.
    pub features: Array2<f64>,
    /// Batch mean/var of each BN layer's input, in layer order.
    pub batch_stats: Vec<BnStats>,
    pub cache: ExtractorCache,
}

pub struct ExtractorGrads {
    /// Flat, in [`Parameterized::layout`] order.
    pub params: Vec<f64>,
    pub input: Array2<f64>,
}

impl FeatureExtractor {
    pub fn new<R: Rng + ?Sized>(input_dim: usize, embed_dim: usize, rng: &mut R) -> Self {
        Self {
            fc1: Linear::new(input_dim, HIDDEN, rng),
            bn1: BatchNorm::new(HIDDEN),
            fc2: Linear::new(HIDDEN, HIDDEN, rng),
            bn2: BatchNorm::new(HIDDEN),
            proj: Linear::new(HIDDEN, embed_dim, rng),
            generation: 0,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.fc1.input_dim()
    }

    pub fn embed_dim(&self) -> usize {
        self.proj.output_dim()
    }

    pub fn running_stats(&self) -> Vec<BnStats> {
        vec![self.bn1.running_stats(), self.bn2.running_stats()]
    }

    /// In train mode the running statistics are updated after the pass.
    pub fn forward(&mut self, x: &Array2<f64>, mode: Mode) -> Result<ExtractorOutput> {
        match mode {
            Mode::Eval => self.forward_with(x, Normalization::Running),
            Mode::Train => {
                let mut out = self.forward_with(x, Normalization::Batch)?;
                self.bn1.commit(&out.batch_stats[0]);
                self.bn2.commit(&out.batch_stats[1]);
                self.generation += 1;
                out.cache.generation = self.generation;
                Ok(out)
            }
        }
    }

    /// Side-effect free pass with an explicit BN normalization source.
    pub fn forward_with(
        &self,
        x: &Array2<f64>,
        normalization: Normalization,
    ) -> Result<ExtractorOutput> {
        if x.ncols() != self.input_dim() {
            return Err(FedbmError::DimensionMismatch(format!(
                "input has {} columns, extractor expects {}",
                x.ncols(),
                self.input_dim()
            )));
        }
        if x.nrows() == 0 {
            return Err(FedbmError::InvalidArgument("empty batch".into()));
        }
        if normalization == Normalization::Batch && x.nrows() < 2 {
            return Err(FedbmError::InvalidArgument(
                "batch statistics need at least 2 samples".into(),
            ));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(FedbmError::NonFinite("extractor input".into()));
        }
        let (pre1, bn1) = self.bn1.forward(&self.fc1.forward(x), normalization);
        let act1 = relu(&pre1);
        let (pre2, bn2) = self.bn2.forward(&self.fc2.forward(&act1), normalization);
        let act2 = relu(&pre2);
        let (normalized, norms) = l2_normalize(&self.proj.forward(&act2));
        let batch_stats = vec![bn1.stats.clone(), bn2.stats.clone()];
        Ok(ExtractorOutput {
            features: normalized.clone(),
            batch_stats,
            cache: ExtractorCache {
                generation: self.generation,
                input: x.clone(),
                bn1,
                pre1,
                act1,
                bn2,
                pre2,
                act2,
                normalized,
                norms,
            },
        })
    }

    /// `d_stats`, when given, holds gradients on each BN layer's batch statistics.
    pub fn backward(
        &self,
        cache: &ExtractorCache,
        d_features: &Array2<f64>,
        d_stats: Option<&[BnStats]>,
    ) -> Result<ExtractorGrads> {
        if cache.generation != self.generation {
            return Err(FedbmError::StaleCache);
        }
        if d_features.dim() != cache.normalized.dim() {
            return Err(FedbmError::DimensionMismatch(format!(
                "upstream gradient {:?} vs features {:?}",
                d_features.dim(),
                cache.normalized.dim()
            )));
        }
        if let Some(ds) = d_stats {
            if ds.len() != 2 {
                return Err(FedbmError::DimensionMismatch(format!(
                    "{} statistic gradients for 2 BN layers",
                    ds.len()
                )));
            }
        }
        let stat = |i: usize| d_stats.map(|ds| &ds[i]);

        let d_proj_out = l2_normalize_backward(&cache.normalized, &cache.norms, d_features);
        let proj = self.proj.backward(&cache.act2, &d_proj_out);
        let d_pre2 = relu_backward(&cache.pre2, &proj.input);
        let bn2 = self.bn2.backward(&cache.bn2, &d_pre2, stat(1));
        let fc2 = self.fc2.backward(&cache.act1, &bn2.input);
        let d_pre1 = relu_backward(&cache.pre1, &fc2.input);
        let bn1 = self.bn1.backward(&cache.bn1, &d_pre1, stat(0));
        let fc1 = self.fc1.backward(&cache.input, &bn1.input);

        let params = [
            fc1.weight.as_slice().unwrap(),
            fc1.bias.as_slice().unwrap(),
            bn1.gamma.as_slice().unwrap(),
            bn1.beta.as_slice().unwrap(),
            fc2.weight.as_slice().unwrap(),
            fc2.bias.as_slice().unwrap(),
            bn2.gamma.as_slice().unwrap(),
            bn2.beta.as_slice().unwrap(),
            proj.weight.as_slice().unwrap(),
            proj.bias.as_slice().unwrap(),
        ]
        .concat();
        Ok(ExtractorGrads {
            params,
            input: fc1.input,
        })
    }
}

impl Parameterized for FeatureExtractor {
    fn layout(&self) -> Layout {
        Layout {
            params: vec![
                segment("fc1.weight", self.fc1.weight.len()),
                segment("fc1.bias", self.fc1.bias.len()),
                segment("bn1.gamma", self.bn1.gamma.len()),
                segment("bn1.beta", self.bn1.beta.len()),
                segment("fc2.weight", self.fc2.weight.len()),
                segment("fc2.bias", self.fc2.bias.len()),
                segment("bn2.gamma", self.bn2.gamma.len()),
                segment("bn2.beta", self.bn2.beta.len()),
                segment("proj.weight", self.proj.weight.len()),
                segment("proj.bias", self.proj.bias.len()),
            ],
            buffers: vec![
                segment("bn1.running_mean", self.bn1.running_mean.len()),
                segment("bn1.running_var", self.bn1.running_var.len()),
                segment("bn2.running_mean", self.bn2.running_mean.len()),
                segment("bn2.running_var", self.bn2.running_var.len()),
            ],
        }
    }

    fn param_slices(&self) -> Vec<&[f64]> {
        vec![
            self.fc1.weight.as_slice().unwrap(),
            self.fc1.bias.as_slice().unwrap(),
            self.bn1.gamma.as_slice().unwrap(),
            self.bn1.beta.as_slice().unwrap(),
            self.fc2.weight.as_slice().unwrap(),
            self.fc2.bias.as_slice().unwrap(),
            self.bn2.gamma.as_slice().unwrap(),
            self.bn2.beta.as_slice().unwrap(),
            self.proj.weight.as_slice().unwrap(),
            self.proj.bias.as_slice().unwrap(),
        ]
    }

    fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        vec![
            self.fc1.weight.as_slice_mut().unwrap(),
            self.fc1.bias.as_slice_mut().unwrap(),
            self.bn1.gamma.as_slice_mut().unwrap(),
            self.bn1.beta.as_slice_mut().unwrap(),
            self.fc2.weight.as_slice_mut().unwrap(),
            self.fc2.bias.as_slice_mut().unwrap(),
            self.bn2.gamma.as_slice_mut().unwrap(),
            self.bn2.beta.as_slice_mut().unwrap(),
            self.proj.weight.as_slice_mut().unwrap(),
            self.proj.bias.as_slice_mut().unwrap(),
        ]
    }

    fn buffer_slices(&self) -> Vec<&[f64]> {
        vec![
            self.bn1.running_mean.as_slice().unwrap(),
            self.bn1.running_var.as_slice().unwrap(),
            self.bn2.running_mean.as_slice().unwrap(),
            self.bn2.running_var.as_slice().unwrap(),
        ]
    }

    fn buffer_slices_mut(&mut self) -> Vec<&mut [f64]> {
        vec![
            self.bn1.running_mean.as_slice_mut().unwrap(),
            self.bn1.running_var.as_slice_mut().unwrap(),
            self.bn2.running_mean.as_slice_mut().unwrap(),
            self.bn2.running_var.as_slice_mut().unwrap(),
        ]
    }

    fn touch(&mut self) {
        self.generation += 1;
    }
}

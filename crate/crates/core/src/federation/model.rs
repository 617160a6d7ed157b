use std::sync::Arc;

use ndarray::Array2;

use crate::concept::DistributionClassifier;
use crate::data::LabeledDataset;
use crate::error::Result;
use crate::losses::{cross_entropy, surrogate_align_loss};
use crate::metrics::ConfusionMatrix;
use crate::nn::{load_params, Adam, FeatureExtractor, Layout, LinearHead, Mode, Parameterized};

/// Classifier on top of the extractor. The frozen variant is shared
/// read-only and never appears in a parameter vector.
#[derive(Debug, Clone)]
pub enum Head {
    Frozen(Arc<DistributionClassifier>),
    Linear(LinearHead),
}

#[derive(Debug, Clone)]
pub struct Network {
    pub extractor: FeatureExtractor,
    pub head: Head,
}

impl Network {
    pub fn new(extractor: FeatureExtractor, head: Head) -> Self {
        Self { extractor, head }
    }

    pub fn classes(&self) -> usize {
        match &self.head {
            Head::Frozen(clf) => clf.class_count(),
            Head::Linear(h) => h.fc.output_dim(),
        }
    }

    pub fn frozen_classifier(&self) -> Option<&DistributionClassifier> {
        match &self.head {
            Head::Frozen(clf) => Some(clf),
            Head::Linear(_) => None,
        }
    }

    pub fn head_logits(&self, features: &Array2<f64>) -> Result<Array2<f64>> {
        match &self.head {
            Head::Frozen(clf) => clf.logits(features),
            Head::Linear(h) => Ok(h.logits(features)),
        }
    }

    /// Feature gradient of `sum(d_logits * logits)`; head parameters are not updated.
    pub fn head_feature_grad(&self, features: &Array2<f64>, d_logits: &Array2<f64>) -> Array2<f64> {
        match &self.head {
            Head::Frozen(clf) => clf.logits_backward(features, d_logits),
            Head::Linear(h) => h.backward(features, d_logits).1,
        }
    }

    /// One optimizer step on a batch; returns the batch loss.
    ///
    /// With a frozen head the objective is the surrogate alignment loss and
    /// only the extractor moves; a linear head trains jointly under
    /// cross-entropy.
    pub fn train_step(&mut self, x: &Array2<f64>, y: &[usize], opt: &mut Adam) -> Result<f64> {
        let out = self.extractor.forward(x, Mode::Train)?;
        let (loss, d_features, head_grads) = match &self.head {
            Head::Frozen(clf) => {
                let l = surrogate_align_loss(&out.features, y, clf)?;
                (l.value, l.grad, Vec::new())
            }
            Head::Linear(head) => {
                let logits = head.logits(&out.features);
                let l = cross_entropy(&logits, y)?;
                let (grads, d_features) = head.backward(&out.features, &l.grad);
                (l.value, d_features, grads)
            }
        };
        let mut grads = self
            .extractor
            .backward(&out.cache, &d_features, None)?
            .params;
        grads.extend(head_grads);
        let mut params = self.param_slices().concat();
        opt.step(&mut params, &grads)?;
        load_params(self, &params)?;
        Ok(loss)
    }

    pub fn predict(&self, x: &Array2<f64>) -> Result<Vec<usize>> {
        let features = self
            .extractor
            .forward_with(x, crate::nn::Normalization::Running)?
            .features;
        let logits = self.head_logits(&features)?;
        Ok(logits
            .rows()
            .into_iter()
            .map(|r| {
                r.iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (k, v)| {
                        if *v > best.1 {
                            (k, *v)
                        } else {
                            best
                        }
                    })
                    .0
            })
            .collect())
    }

    /// `(accuracy, macro-F1)` in eval mode.
    pub fn evaluate(&self, data: &LabeledDataset) -> Result<Evaluation> {
        let predicted = self.predict(data.samples())?;
        let cm = ConfusionMatrix::new(data.labels(), &predicted, self.classes())?;
        Ok(Evaluation {
            accuracy: cm.accuracy(),
            macro_f1: cm.macro_f1(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Evaluation {
    pub accuracy: f64,
    pub macro_f1: f64,
}

impl Parameterized for Network {
    fn layout(&self) -> Layout {
        let mut layout = self.extractor.layout().prefixed("extractor");
        if let Head::Linear(h) = &self.head {
            layout.extend(h.layout().prefixed("head"));
        }
        layout
    }

    fn param_slices(&self) -> Vec<&[f64]> {
        let mut out = self.extractor.param_slices();
        if let Head::Linear(h) = &self.head {
            out.extend(h.param_slices());
        }
        out
    }

    fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = self.extractor.param_slices_mut();
        if let Head::Linear(h) = &mut self.head {
            out.extend(h.param_slices_mut());
        }
        out
    }

    fn buffer_slices(&self) -> Vec<&[f64]> {
        self.extractor.buffer_slices()
    }

    fn buffer_slices_mut(&mut self) -> Vec<&mut [f64]> {
        self.extractor.buffer_slices_mut()
    }

    fn touch(&mut self) {
        self.extractor.touch();
    }
}

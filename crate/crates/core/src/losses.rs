//! Training objectives with explicit gradients.
//!
//! Each loss returns a [`LossValue`] carrying the scalar and the gradient with
//! respect to the tensor the caller back-propagates through. The network
//! modules chain these by hand.

use ndarray::{Array1, Array2, ArrayView1};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::concept::{ConceptDistribution, ConceptEmbeddingSet, DistributionClassifier};
use crate::error::{FedbmError, Result};
use crate::nn::BnStats;

/// Added to the diversity denominator so exact collapse stays finite.
pub const DIVERSITY_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct LossValue<G> {
    pub value: f64,
    pub grad: G,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeneratorLossConfig {
    pub lambda_div: f64,
    pub lambda_dis: f64,
}

impl Default for GeneratorLossConfig {
    fn default() -> Self {
        Self {
            lambda_div: 1.0,
            lambda_dis: 1.0,
        }
    }
}

impl GeneratorLossConfig {
    pub fn validate(&self) -> Result<()> {
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
        Ok(())
    }
}

pub(crate) fn dot(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).fold(0.0, |acc, (x, y)| acc + x * y)
}

pub(crate) fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn softmax_in_place(values: &mut [f64]) {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in values.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    values.iter_mut().for_each(|v| *v /= total);
}

fn check_batch(features: &Array2<f64>, labels: &[usize], classes: usize, dim: usize) -> Result<()> {
    if features.nrows() != labels.len() {
        return Err(FedbmError::DimensionMismatch(format!(
            "{} feature rows for {} labels",
            features.nrows(),
            labels.len()
        )));
    }
    if features.nrows() == 0 {
        return Err(FedbmError::InvalidArgument("empty batch".into()));
    }
    if features.ncols() != dim {
        return Err(FedbmError::DimensionMismatch(format!(
            "features have {} columns, expected {dim}",
            features.ncols()
        )));
    }
    if features.iter().any(|v| !v.is_finite()) {
        return Err(FedbmError::NonFinite("features".into()));
    }
    check_labels(labels, classes)
}

fn check_labels(labels: &[usize], classes: usize) -> Result<()> {
    match labels.iter().find(|l| **l >= classes) {
        Some(&label) => Err(FedbmError::InvalidLabel { label, classes }),
        None => Ok(()),
    }
}

/// Closed-form upper bound on the infinite-sample alignment loss:
/// cross-entropy over the distribution classifier's logits plus the
/// `0.5 * tau^2 * <h*h, sigma_y>` variance penalty. Gradient is w.r.t. `features`.
pub fn surrogate_align_loss(
    features: &Array2<f64>,
    labels: &[usize],
    clf: &DistributionClassifier,
) -> Result<LossValue<Array2<f64>>> {
    check_batch(features, labels, clf.class_count(), clf.dim())?;
    let logits = clf.logits(features)?;
    let tau = clf.tau();
    let batch = features.nrows() as f64;
    let mut total = 0.0;
    let mut d_logits = Array2::zeros(logits.raw_dim());
    for (i, &y) in labels.iter().enumerate() {
        let row = logits.row(i).to_vec();
        let h = features.row(i);
        let penalty = 0.5 * tau * tau * dot(h.mapv(|v| v * v).view(), clf.variances().column(y));
        total += (log_sum_exp(&row) - row[y]) + penalty;

        let mut probs = row;
        softmax_in_place(&mut probs);
        probs[y] -= 1.0;
        for (k, p) in probs.into_iter().enumerate() {
            d_logits[[i, k]] = p / batch;
        }
    }
    // variance penalty: tau^2 * h * sigma_y
    let mut grad = clf.logits_backward(features, &d_logits);
    for (i, &y) in labels.iter().enumerate() {
        let sigma = clf.variances().column(y);
        for d in 0..features.ncols() {
            grad[[i, d]] += tau * tau * features[[i, d]] * sigma[d] / batch;
        }
    }
    Ok(LossValue {
        value: total / batch,
        grad,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MonteCarloEstimate {
    pub estimate: f64,
    pub stderr: f64,
}

pub const MIN_MONTE_CARLO_SAMPLES: usize = 100;

/// Sampling estimate of the infinite-sample alignment loss.
///
/// Per feature row: `samples` draws per negative class feed log-mean-exp
/// estimates of the inner expectations, then `samples` positive draws form
/// the outer average. The standard error covers the outer average only.
pub fn monte_carlo_align_loss<R: Rng + ?Sized>(
    features: &Array2<f64>,
    labels: &[usize],
    dists: &[ConceptDistribution],
    tau: f64,
    samples: usize,
    rng: &mut R,
) -> Result<MonteCarloEstimate> {
    if samples < MIN_MONTE_CARLO_SAMPLES {
        return Err(FedbmError::InvalidArgument(format!(
            "need at least {MIN_MONTE_CARLO_SAMPLES} samples, got {samples}"
        )));
    }
    let dim = dists.first().map_or(0, ConceptDistribution::dim);
    check_batch(features, labels, dists.len(), dim)?;
    let classes = dists.len();
    let mut draws = vec![0.0; samples];
    let mut terms = vec![0.0; classes];
    let mut estimate = 0.0;
    let mut variance_sum = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let h = features.row(i);
        for (k, dist) in dists.iter().enumerate() {
            if k == y {
                continue;
            }
            for slot in draws.iter_mut() {
                *slot = tau * sampled_dot(h, dist, rng);
            }
            let max = draws.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mean = draws.iter().map(|a| (a - max).exp()).sum::<f64>() / samples as f64;
            terms[k] = max + mean.ln();
        }
        // Welford keeps identical draws bit-exact in the mean.
        let mut mean = 0.0;
        let mut m2 = 0.0;
        for n in 1..=samples {
            let positive = tau * sampled_dot(h, &dists[y], rng);
            terms[y] = positive;
            let term = log_sum_exp(&terms) - positive;
            let delta = term - mean;
            mean += delta / n as f64;
            m2 += delta * (term - mean);
        }
        estimate += mean;
        variance_sum += m2 / (samples - 1) as f64 / samples as f64;
    }
    let batch = labels.len() as f64;
    Ok(MonteCarloEstimate {
        estimate: estimate / batch,
        stderr: variance_sum.sqrt() / batch,
    })
}

fn sampled_dot<R: Rng + ?Sized>(
    h: ArrayView1<f64>,
    dist: &ConceptDistribution,
    rng: &mut R,
) -> f64 {
    let mut acc = 0.0;
    for ((hd, mu), var) in h.iter().zip(dist.mean.iter()).zip(dist.variance.iter()) {
        let eps: f64 = rng.sample(StandardNormal);
        acc += hd * (mu + var.sqrt() * eps);
    }
    acc
}

/// Finite-prompt contrastive alignment: the positive-prompt average sits
/// outside the log, negative-class prompt averages inside the denominator.
pub fn contrastive_align_loss(
    features: &Array2<f64>,
    labels: &[usize],
    set: &ConceptEmbeddingSet,
    tau: f64,
) -> Result<LossValue<Array2<f64>>> {
    if set.prompt_count() < 2 {
        return Err(FedbmError::VarianceInfeasible(set.prompt_count()));
    }
    check_batch(features, labels, set.class_count(), set.dim())?;
    let classes = set.class_count();
    let prompts = set.prompt_count();
    let batch = features.nrows() as f64;
    let mut grad = Array2::zeros(features.raw_dim());
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let h = features.row(i);
        // scores[k][m] = tau * <h, e_m^k>
        let scores: Vec<Vec<f64>> = (0..classes)
            .map(|k| {
                (0..prompts)
                    .map(|m| tau * dot(h, ArrayView1::from(set.embedding(k, m))))
                    .collect()
            })
            .collect();
        // log of each negative class's prompt-averaged exp score, and the
        // prompt weights of its gradient
        let mut neg_log = vec![0.0; classes];
        let mut neg_dir = Array2::<f64>::zeros((classes, set.dim()));
        for k in (0..classes).filter(|k| *k != y) {
            neg_log[k] = log_sum_exp(&scores[k]) - (prompts as f64).ln();
            let mut w = scores[k].clone();
            softmax_in_place(&mut w);
            for (m, wm) in w.iter().enumerate() {
                neg_dir
                    .row_mut(k)
                    .scaled_add(tau * wm, &ArrayView1::from(set.embedding(k, m)));
            }
        }
        let mut row_grad = Array1::<f64>::zeros(set.dim());
        for (m, &positive) in scores[y].iter().enumerate() {
            let mut terms = neg_log.clone();
            terms[y] = positive;
            total += (log_sum_exp(&terms) - positive) / prompts as f64;
            softmax_in_place(&mut terms);
            let e_pos = ArrayView1::from(set.embedding(y, m));
            row_grad.scaled_add(tau * (terms[y] - 1.0) / prompts as f64, &e_pos);
            for k in (0..classes).filter(|k| *k != y) {
                row_grad.scaled_add(terms[k] / prompts as f64, &neg_dir.row(k));
            }
        }
        grad.row_mut(i).assign(&(row_grad / batch));
    }
    Ok(LossValue {
        value: total / batch,
        grad,
    })
}

/// Mean cross-entropy of the teacher's logits against the sampled labels.
pub fn semantic_loss(logits: &Array2<f64>, labels: &[usize]) -> Result<LossValue<Array2<f64>>> {
    cross_entropy(logits, labels)
}

/// Mean softmax cross-entropy; gradient is w.r.t. the logits.
pub fn cross_entropy(logits: &Array2<f64>, labels: &[usize]) -> Result<LossValue<Array2<f64>>> {
    if logits.nrows() != labels.len() || labels.is_empty() {
        return Err(FedbmError::DimensionMismatch(format!(
            "{} logit rows for {} labels",
            logits.nrows(),
            labels.len()
        )));
    }
    check_labels(labels, logits.ncols())?;
    let batch = labels.len() as f64;
    let mut grad = Array2::zeros(logits.raw_dim());
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let mut row = logits.row(i).to_vec();
        total += log_sum_exp(&row) - row[y];
        softmax_in_place(&mut row);
        row[y] -= 1.0;
        for (k, p) in row.into_iter().enumerate() {
            grad[[i, k]] = p / batch;
        }
    }
    Ok(LossValue {
        value: total / batch,
        grad,
    })
}

/// Ring-paired L1 ratio `|z_i - z_j| / (|x_i - x_j| + eps)` with
/// `j = (i + 1) mod B`, averaged over the batch. Gradient is w.r.t. `samples`.
pub fn diversity_loss(
    conditions: &Array2<f64>,
    samples: &Array2<f64>,
) -> Result<LossValue<Array2<f64>>> {
    let batch = samples.nrows();
    if batch < 2 {
        return Err(FedbmError::InvalidArgument(format!(
            "diversity loss needs at least 2 samples, got {batch}"
        )));
    }
    if conditions.nrows() != batch {
        return Err(FedbmError::DimensionMismatch(format!(
            "{} conditions for {batch} samples",
            conditions.nrows()
        )));
    }
    let mut grad = Array2::zeros(samples.raw_dim());
    let mut total = 0.0;
    for i in 0..batch {
        let j = (i + 1) % batch;
        let num: f64 = (&conditions.row(i) - &conditions.row(j))
            .mapv(f64::abs)
            .sum();
        let diff = &samples.row(i) - &samples.row(j);
        let den = diff.mapv(f64::abs).sum() + DIVERSITY_EPS;
        total += num / den;
        let scale = -num / (den * den) / batch as f64;
        for (c, d) in diff.iter().enumerate() {
            let g = scale * sign(*d);
            grad[[i, c]] += g;
            grad[[j, c]] -= g;
        }
    }
    Ok(LossValue {
        value: total / batch as f64,
        grad,
    })
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Sum over BN layers of the L2 distances between synthetic-batch statistics
/// and the running statistics. Gradient is w.r.t. the batch statistics.
pub fn distribution_loss(
    batch_stats: &[BnStats],
    running_stats: &[BnStats],
) -> Result<LossValue<Vec<BnStats>>> {
    if batch_stats.len() != running_stats.len() {
        return Err(FedbmError::DimensionMismatch(format!(
            "{} batch layers vs {} running layers",
            batch_stats.len(),
            running_stats.len()
        )));
    }
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(batch_stats.len());
    for (l, (b, r)) in batch_stats.iter().zip(running_stats).enumerate() {
        if b.mean.len() != r.mean.len() || b.var.len() != r.var.len() {
            return Err(FedbmError::DimensionMismatch(format!(
                "layer {l} widths differ"
            )));
        }
        let (mean_norm, mean_grad) = l2_distance(&b.mean, &r.mean);
        let (var_norm, var_grad) = l2_distance(&b.var, &r.var);
        total += mean_norm + var_norm;
        grads.push(BnStats {
            mean: mean_grad,
            var: var_grad,
        });
    }
    Ok(LossValue {
        value: total,
        grad: grads,
    })
}

fn l2_distance(a: &Array1<f64>, b: &Array1<f64>) -> (f64, Array1<f64>) {
    let diff = a - b;
    let norm = diff.mapv(|v| v * v).sum().sqrt();
    if norm == 0.0 {
        (0.0, Array1::zeros(diff.len()))
    } else {
        (norm, diff / norm)
    }
}

/// Weighted generator objective; each gradient part is already scaled by its weight.
#[derive(Debug, Clone)]
pub struct GeneratorLoss {
    pub value: f64,
    pub semantic: f64,
    pub diversity: f64,
    pub distribution: f64,
    pub d_logits: Array2<f64>,
    pub d_samples: Array2<f64>,
    pub d_stats: Vec<BnStats>,
}

pub fn generator_loss(
    sem: LossValue<Array2<f64>>,
    div: LossValue<Array2<f64>>,
    dis: LossValue<Vec<BnStats>>,
    cfg: &GeneratorLossConfig,
) -> GeneratorLoss {
    GeneratorLoss {
        value: sem.value + cfg.lambda_div * div.value + cfg.lambda_dis * dis.value,
        semantic: sem.value,
        diversity: div.value,
        distribution: dis.value,
        d_logits: sem.grad,
        d_samples: div.grad * cfg.lambda_div,
        d_stats: dis
            .grad
            .into_iter()
            .map(|s| BnStats {
                mean: s.mean * cfg.lambda_dis,
                var: s.var * cfg.lambda_dis,
            })
            .collect(),
    }
}

//! Concept embeddings and the frozen distribution classifier built from them.
//!
//! Every class is described by `M` text embeddings. Their per-dimension mean
//! and unbiased variance define a diagonal Gaussian, and the classifier
//! scores a normalized feature `h` against class `k` with
//!
//! ```text
//! logit_k(h) = tau * <h, mu_k> + 0.5 * tau^2 * <h * h, sigma_k>
//! ```
//!
//! which is the log moment generating function of `tau * <h, e>` for
//! `e ~ N(mu_k, diag(sigma_k))`.

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{FedbmError, Result};
use crate::losses::dot;

pub const CEB1_MAGIC: &[u8; 4] = b"CEB1";

/// `K x M x D` concept embeddings, class-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ConceptEmbeddingSet {
    class_names: Vec<String>,
    prompt_count: usize,
    dim: usize,
    values: Vec<f64>,
}

impl ConceptEmbeddingSet {
    /// Builds a set from nested `[class][prompt][dim]` vectors.
    pub fn new(class_names: Vec<String>, embeddings: Vec<Vec<Vec<f64>>>) -> Result<Self> {
        if embeddings.is_empty() {
            return Err(FedbmError::DimensionMismatch("no classes".into()));
        }
        if class_names.len() != embeddings.len() {
            return Err(FedbmError::DimensionMismatch(format!(
                "{} class names for {} classes",
                class_names.len(),
                embeddings.len()
            )));
        }
        let prompt_count = embeddings[0].len();
        let dim = embeddings[0].first().map_or(0, Vec::len);
        if dim == 0 {
            return Err(FedbmError::DimensionMismatch(
                "zero embedding dimension".into(),
            ));
        }
        let mut values = Vec::with_capacity(embeddings.len() * prompt_count * dim);
        for (k, class) in embeddings.iter().enumerate() {
            if class.len() != prompt_count {
                return Err(FedbmError::DimensionMismatch(format!(
                    "class {k} has {} prompts, expected {prompt_count}",
                    class.len()
                )));
            }
            for (m, e) in class.iter().enumerate() {
                if e.len() != dim {
                    return Err(FedbmError::DimensionMismatch(format!(
                        "embedding ({k}, {m}) has dimension {}, expected {dim}",
                        e.len()
                    )));
                }
                values.extend_from_slice(e);
            }
        }
        Self::from_flat(class_names, prompt_count, dim, values)
    }

    fn from_flat(
        class_names: Vec<String>,
        prompt_count: usize,
        dim: usize,
        values: Vec<f64>,
    ) -> Result<Self> {
        if prompt_count < 2 {
            return Err(FedbmError::VarianceInfeasible(prompt_count));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            let per_class = prompt_count * dim;
            return Err(FedbmError::NonFinite(format!(
                "embedding ({}, {}), dim {}",
                i / per_class,
                (i % per_class) / dim,
                i % dim
            )));
        }
        Ok(Self {
            class_names,
            prompt_count,
            dim,
            values,
        })
    }

    pub fn class_count(&self) -> usize {
        self.class_names.len()
    }

    pub fn prompt_count(&self) -> usize {
        self.prompt_count
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn embedding(&self, class: usize, prompt: usize) -> &[f64] {
        let start = (class * self.prompt_count + prompt) * self.dim;
        &self.values[start..start + self.dim]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Reads a CEB1 file.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| FedbmError::io(path, e))?;
        Self::from_ceb1(&bytes)
    }

    pub fn from_ceb1(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        let magic = cur
            .take(4)
            .ok_or_else(|| FedbmError::MalformedHeader("file shorter than magic".into()))?;
        if magic != CEB1_MAGIC {
            return Err(FedbmError::MalformedHeader(format!("bad magic {magic:?}")));
        }
        let mut header = [0usize; 3];
        for (slot, name) in header.iter_mut().zip(["K", "M", "D"]) {
            *slot = cur
                .u32()
                .ok_or_else(|| FedbmError::MalformedHeader(format!("missing {name}")))?
                as usize;
        }
        let [k, m, d] = header;
        if k == 0 || d == 0 {
            return Err(FedbmError::MalformedHeader(format!(
                "K={k}, D={d} must be positive"
            )));
        }
        if m < 2 {
            return Err(FedbmError::VarianceInfeasible(m));
        }
        let mut names = Vec::with_capacity(k);
        for i in 0..k {
            let len = cur.u32().ok_or_else(|| {
                FedbmError::MalformedHeader(format!("missing length of class name {i}"))
            })? as usize;
            let raw = cur
                .take(len)
                .ok_or_else(|| FedbmError::MalformedHeader(format!("class name {i} truncated")))?;
            let name = std::str::from_utf8(raw)
                .map_err(|_| FedbmError::MalformedHeader(format!("class name {i} is not UTF-8")))?;
            names.push(name.to_string());
        }
        let count = k
            .checked_mul(m)
            .and_then(|v| v.checked_mul(d))
            .ok_or_else(|| FedbmError::MalformedHeader("K*M*D overflows".into()))?;
        let payload = &bytes[cur.pos..];
        let expected = count * 4;
        if payload.len() != expected {
            return Err(FedbmError::PayloadLength {
                expected,
                found: payload.len(),
            });
        }
        let values = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        Self::from_flat(names, m, d, values)
    }

    /// Serializes to CEB1. Values are narrowed to `f32`.
    pub fn to_ceb1(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.values.len() * 4);
        out.extend_from_slice(CEB1_MAGIC);
        for v in [self.class_count(), self.prompt_count, self.dim] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for name in &self.class_names {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
        }
        for v in &self.values {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = fs::File::create(path).map_err(|e| FedbmError::io(path, e))?;
        f.write_all(&self.to_ceb1())
            .map_err(|e| FedbmError::io(path, e))
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let out = self.bytes.get(self.pos..end)?;
        self.pos = end;
        Some(out)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4)
            .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Diagonal Gaussian over one class's concept embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct ConceptDistribution {
    pub mean: Array1<f64>,
    pub variance: Array1<f64>,
}

impl ConceptDistribution {
    pub fn new(mean: Array1<f64>, variance: Array1<f64>) -> Result<Self> {
        if mean.len() != variance.len() {
            return Err(FedbmError::DimensionMismatch(format!(
                "mean has {} entries, variance {}",
                mean.len(),
                variance.len()
            )));
        }
        if mean.iter().chain(variance.iter()).any(|v| !v.is_finite()) {
            return Err(FedbmError::NonFinite("concept distribution".into()));
        }
        if variance.iter().any(|v| *v < 0.0) {
            return Err(FedbmError::InvalidArgument("negative variance".into()));
        }
        Ok(Self { mean, variance })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Per-class mean and unbiased per-dimension variance (divides by `M - 1`).
pub fn estimate_distributions(set: &ConceptEmbeddingSet) -> Vec<ConceptDistribution> {
    let m = set.prompt_count();
    let d = set.dim();
    (0..set.class_count())
        .map(|k| {
            let mut mean = Array1::<f64>::zeros(d);
            for p in 0..m {
                mean += &ArrayView1::from(set.embedding(k, p));
            }
            mean /= m as f64;
            let mut variance = Array1::<f64>::zeros(d);
            for p in 0..m {
                let diff = &ArrayView1::from(set.embedding(k, p)) - &mean;
                variance += &(&diff * &diff);
            }
            variance /= (m - 1) as f64;
            ConceptDistribution { mean, variance }
        })
        .collect()
}

/// Frozen `D x K` classifier. There are no mutating methods: once built the
/// parameters stay bit-identical for the lifetime of the value.
#[derive(Debug, Clone, PartialEq)]
pub struct DistributionClassifier {
    means: Array2<f64>,
    variances: Array2<f64>,
    tau: f64,
}

impl DistributionClassifier {
    pub fn build(dists: &[ConceptDistribution], tau: f64) -> Result<Self> {
        if dists.is_empty() {
            return Err(FedbmError::InvalidArgument("no class distributions".into()));
        }
        if !(tau.is_finite() && tau > 0.0) {
            return Err(FedbmError::InvalidArgument(format!(
                "temperature {tau} must be positive"
            )));
        }
        let d = dists[0].dim();
        let k = dists.len();
        let mut means = Array2::zeros((d, k));
        let mut variances = Array2::zeros((d, k));
        for (c, dist) in dists.iter().enumerate() {
            if dist.dim() != d || dist.variance.len() != d {
                return Err(FedbmError::DimensionMismatch(format!(
                    "class {c} has dimension {}, expected {d}",
                    dist.dim()
                )));
            }
            means.column_mut(c).assign(&dist.mean);
            variances.column_mut(c).assign(&dist.variance);
        }
        if variances.iter().any(|v| *v < 0.0 || !v.is_finite())
            || means.iter().any(|v| !v.is_finite())
        {
            return Err(FedbmError::InvalidArgument(
                "invalid classifier statistics".into(),
            ));
        }
        Ok(Self {
            means,
            variances,
            tau,
        })
    }

    pub fn means(&self) -> &Array2<f64> {
        &self.means
    }

    pub fn variances(&self) -> &Array2<f64> {
        &self.variances
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn frozen(&self) -> bool {
        true
    }

    pub fn dim(&self) -> usize {
        self.means.nrows()
    }

    pub fn class_count(&self) -> usize {
        self.means.ncols()
    }

    /// Column `k` as a distribution, e.g. for drawing generator conditions.
    pub fn distribution(&self, k: usize) -> ConceptDistribution {
        ConceptDistribution {
            mean: self.means.column(k).to_owned(),
            variance: self.variances.column(k).to_owned(),
        }
    }

    /// `B x K` logits for `B x D` features. Labels are not consulted.
    pub fn logits(&self, features: &Array2<f64>) -> Result<Array2<f64>> {
        if features.ncols() != self.dim() {
            return Err(FedbmError::DimensionMismatch(format!(
                "features have {} columns, classifier expects {}",
                features.ncols(),
                self.dim()
            )));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(FedbmError::NonFinite("classifier input".into()));
        }
        let half_tau_sq = 0.5 * self.tau * self.tau;
        let mut out = Array2::zeros((features.nrows(), self.class_count()));
        for (i, h) in features.rows().into_iter().enumerate() {
            let squared = h.mapv(|v| v * v);
            for k in 0..self.class_count() {
                out[[i, k]] = self.tau * dot(h, self.means.column(k))
                    + half_tau_sq * dot(squared.view(), self.variances.column(k));
            }
        }
        Ok(out)
    }

    /// Gradient of `sum_{i,k} d_logits[i,k] * logits[i,k]` with respect to the features.
    pub fn logits_backward(&self, features: &Array2<f64>, d_logits: &Array2<f64>) -> Array2<f64> {
        let linear = d_logits.dot(&self.means.t()) * self.tau;
        let quad = d_logits.dot(&self.variances.t()) * (self.tau * self.tau);
        linear + quad * features
    }

    /// Little-endian dump of every parameter; used to assert immutability.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity((self.means.len() * 2 + 1) * 8);
        out.extend_from_slice(&self.tau.to_le_bytes());
        for v in self.means.iter().chain(self.variances.iter()) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }
}

/// Draws `z = mu_y + sqrt(sigma_y) * eps` with `eps ~ N(0, I)`.
pub fn sample_concept_condition<R: Rng + ?Sized>(
    dists: &[ConceptDistribution],
    label: usize,
    rng: &mut R,
) -> Result<(Array1<f64>, usize)> {
    let dist = dists.get(label).ok_or(FedbmError::InvalidLabel {
        label,
        classes: dists.len(),
    })?;
    let z = dist
        .mean
        .iter()
        .zip(dist.variance.iter())
        .map(|(mu, var)| {
            let eps: f64 = rng.sample(StandardNormal);
            mu + var.sqrt() * eps
        })
        .collect();
    Ok((z, label))
}

/// Random concept set: each class gets a unit anchor and `M` jittered copies.
///
/// When `K <= D` the anchors are orthonormalized so distinct classes never
/// share a direction.
pub fn synthetic_embeddings<R: Rng + ?Sized>(
    classes: usize,
    prompts: usize,
    dim: usize,
    spread: f64,
    rng: &mut R,
) -> Result<ConceptEmbeddingSet> {
    if classes == 0 || dim == 0 {
        return Err(FedbmError::InvalidArgument(format!(
            "classes={classes} and dim={dim} must be positive"
        )));
    }
    if prompts < 2 {
        return Err(FedbmError::VarianceInfeasible(prompts));
    }
    if !(spread.is_finite() && spread >= 0.0) {
        return Err(FedbmError::InvalidArgument(format!(
            "spread {spread} must be >= 0"
        )));
    }
    let mut anchors: Vec<Vec<f64>> = Vec::with_capacity(classes);
    while anchors.len() < classes {
        let mut a: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        if classes <= dim {
            for b in &anchors {
                let proj: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                a.iter_mut().zip(b).for_each(|(x, y)| *x -= proj * y);
            }
        }
        let norm = a.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm < 1e-8 {
            continue;
        }
        a.iter_mut().for_each(|v| *v /= norm);
        anchors.push(a);
    }
    let embeddings = anchors
        .iter()
        .map(|anchor| {
            (0..prompts)
                .map(|_| {
                    anchor
                        .iter()
                        .map(|a| {
                            let eps: f64 = rng.sample(StandardNormal);
                            // stored as f32 on disk; round now so in-memory and file agree
                            (a + spread * eps) as f32 as f64
                        })
                        .collect()
                })
                .collect()
        })
        .collect();
    let names = (0..classes).map(|k| format!("class_{k}")).collect();
    ConceptEmbeddingSet::new(names, embeddings)
}

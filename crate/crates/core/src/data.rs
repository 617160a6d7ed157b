//! Synthetic benchmarks, Dirichlet label-skew partitioning and CSV import.

use std::path::Path;

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{FedbmError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    x: Array2<f64>,
    y: Vec<usize>,
    classes: usize,
    split: Split,
}

impl LabeledDataset {
    pub fn new(x: Array2<f64>, y: Vec<usize>, classes: usize, split: Split) -> Result<Self> {
        if x.nrows() != y.len() {
            return Err(FedbmError::DimensionMismatch(format!(
                "{} samples for {} labels",
                x.nrows(),
                y.len()
            )));
        }
        if let Some(&label) = y.iter().find(|l| **l >= classes) {
            return Err(FedbmError::InvalidLabel { label, classes });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(FedbmError::NonFinite("dataset samples".into()));
        }
        Ok(Self {
            x,
            y,
            classes,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x.ncols()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn samples(&self) -> &Array2<f64> {
        &self.x
    }

    pub fn labels(&self) -> &[usize] {
        &self.y
    }

    /// Rows at `indices`, in the given order.
    pub fn batch(&self, indices: &[usize]) -> (Array2<f64>, Vec<usize>) {
        let x = self.x.select(ndarray::Axis(0), indices);
        let y = indices.iter().map(|&i| self.y[i]).collect();
        (x, y)
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        let (x, y) = self.batch(indices);
        Self {
            x,
            y,
            classes: self.classes,
            split: self.split,
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &l in &self.y {
            counts[l] += 1;
        }
        counts
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Benchmark {
    pub train: LabeledDataset,
    pub val: LabeledDataset,
    pub test: LabeledDataset,
}

/// Split sizes for `n` samples in a 7:1:2 ratio.
pub fn split_sizes(n: usize) -> (usize, usize, usize) {
    let train = (n as f64 * 0.7).round() as usize;
    let val = (n as f64 * 0.1).round() as usize;
    (train, val, n - train - val)
}

/// Gaussian blobs: class means at `separation` times a random unit
/// direction, identity covariance, shuffled and split 7:1:2.
pub fn make_synthetic_benchmark(
    classes: usize,
    dim: usize,
    n_per_class: usize,
    separation: f64,
    seed: u64,
) -> Result<Benchmark> {
    if classes < 2 || dim < 2 {
        return Err(FedbmError::InvalidArgument(format!(
            "benchmark needs classes >= 2 and dim >= 2, got {classes} and {dim}"
        )));
    }
    if !(separation.is_finite() && separation >= 0.0) {
        return Err(FedbmError::InvalidArgument(format!(
            "separation {separation} must be finite and >= 0"
        )));
    }
    let n = classes * n_per_class;
    let (n_train, n_val, n_test) = split_sizes(n);
    if n_train == 0 || n_val == 0 || n_test == 0 {
        return Err(FedbmError::InvalidArgument(format!(
            "{n} samples cannot fill a 7:1:2 split"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers: Vec<Array1<f64>> = (0..classes)
        .map(|_| {
            let v = Array1::from_shape_fn(dim, |_| rng.sample::<f64, _>(StandardNormal));
            let norm = v.dot(&v).sqrt().max(1e-12);
            v * (separation / norm)
        })
        .collect();
    let mut x = Array2::zeros((n, dim));
    let mut y = Vec::with_capacity(n);
    for (k, center) in centers.iter().enumerate() {
        for i in 0..n_per_class {
            let row = k * n_per_class + i;
            for d in 0..dim {
                x[[row, d]] = center[d] + rng.sample::<f64, _>(StandardNormal);
            }
            y.push(k);
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let full = LabeledDataset::new(x, y, classes, Split::Train)?;
    let make = |idx: &[usize], split| LabeledDataset {
        split,
        ..full.subset(idx)
    };
    Ok(Benchmark {
        train: make(&order[..n_train], Split::Train),
        val: make(&order[n_train..n_train + n_val], Split::Val),
        test: make(&order[n_train + n_val..], Split::Test),
    })
}

/// Client index lists over a training set. Each list is sorted ascending.
#[derive(Debug, Clone, PartialEq)]
pub struct PartitionPlan {
    pub clients: Vec<Vec<usize>>,
    pub beta: f64,
}

pub const MAX_PARTITION_ATTEMPTS: usize = 100;

/// Label-skew split: for every class, proportions over clients are drawn
/// from `Dir(beta * 1_C)` (normalized Gamma draws) and that class's indices
/// are cut accordingly. Plans leaving any client empty are redrawn.
pub fn dirichlet_partition<R: Rng + ?Sized>(
    labels: &[usize],
    clients: usize,
    beta: f64,
    rng: &mut R,
) -> Result<PartitionPlan> {
    if clients == 0 {
        return Err(FedbmError::InvalidArgument(
            "need at least one client".into(),
        ));
    }
    if !(beta.is_finite() && beta > 0.0) {
        return Err(FedbmError::InvalidArgument(format!(
            "beta {beta} must be positive"
        )));
    }
    if labels.len() < clients {
        return Err(FedbmError::InvalidArgument(format!(
            "{} samples cannot cover {clients} clients",
            labels.len()
        )));
    }
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, &l) in labels.iter().enumerate() {
        by_class[l].push(i);
    }
    let gamma = Gamma::new(beta, 1.0)
        .map_err(|e| FedbmError::InvalidArgument(format!("gamma({beta}): {e}")))?;

    for _ in 0..MAX_PARTITION_ATTEMPTS {
        let mut plan: Vec<Vec<usize>> = vec![Vec::new(); clients];
        for members in &by_class {
            let mut idx = members.clone();
            idx.shuffle(rng);
            let mut props: Vec<f64> = (0..clients).map(|_| gamma.sample(rng)).collect();
            let total: f64 = props.iter().sum();
            if !(total > 0.0 && total.is_finite()) {
                // every draw underflowed; fall back to a single random owner
                props.iter_mut().for_each(|p| *p = 0.0);
                props[rng.random_range(0..clients)] = 1.0;
            } else {
                props.iter_mut().for_each(|p| *p /= total);
            }
            let n = idx.len();
            let mut start = 0;
            let mut cum = 0.0;
            for (c, p) in props.iter().enumerate() {
                cum += p;
                let end = if c + 1 == clients {
                    n
                } else {
                    ((cum * n as f64).floor() as usize).min(n)
                };
                let end = end.max(start);
                plan[c].extend_from_slice(&idx[start..end]);
                start = end;
            }
        }
        if plan.iter().all(|c| !c.is_empty()) {
            plan.iter_mut().for_each(|c| c.sort_unstable());
            return Ok(PartitionPlan {
                clients: plan,
                beta,
            });
        }
    }
    Err(FedbmError::PartitionExhausted {
        attempts: MAX_PARTITION_ATTEMPTS,
        clients,
        beta,
    })
}

/// Mean over clients of the largest single-class share of that client's data.
pub fn mean_max_label_share(plan: &PartitionPlan, labels: &[usize]) -> f64 {
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let shares: Vec<f64> = plan
        .clients
        .iter()
        .filter(|c| !c.is_empty())
        .map(|c| {
            let mut counts = vec![0usize; classes];
            for &i in c {
                counts[labels[i]] += 1;
            }
            *counts.iter().max().unwrap() as f64 / c.len() as f64
        })
        .collect();
    shares.iter().sum::<f64>() / shares.len() as f64
}

/// Reads a CSV with a header row; `label_column` names the integer label
/// column, every other column is a feature.
pub fn load_csv(
    path: impl AsRef<Path>,
    label_column: &str,
    classes: usize,
    split: Split,
) -> Result<LabeledDataset> {
    let path = path.as_ref();
    let mut reader = csv::Reader::from_path(path)?;
    let headers = reader.headers()?.clone();
    let label_at = headers
        .iter()
        .position(|h| h == label_column)
        .ok_or_else(|| {
            FedbmError::InvalidArgument(format!("{}: no `{label_column}` column", path.display()))
        })?;
    let dim = headers.len() - 1;
    if dim == 0 {
        return Err(FedbmError::InvalidArgument(format!(
            "{}: no feature columns",
            path.display()
        )));
    }
    let mut values = Vec::new();
    let mut labels = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record?;
        if record.len() != headers.len() {
            return Err(FedbmError::DimensionMismatch(format!(
                "{} row {row}: {} fields, header has {}",
                path.display(),
                record.len(),
                headers.len()
            )));
        }
        for (c, field) in record.iter().enumerate() {
            if c == label_at {
                let label = field.trim().parse::<usize>().map_err(|_| {
                    FedbmError::InvalidArgument(format!("row {row}: bad label `{field}`"))
                })?;
                labels.push(label);
            } else {
                let v = field.trim().parse::<f64>().map_err(|_| {
                    FedbmError::InvalidArgument(format!("row {row}: bad value `{field}`"))
                })?;
                values.push(v);
            }
        }
    }
    let x = Array2::from_shape_vec((labels.len(), dim), values)
        .map_err(|e| FedbmError::DimensionMismatch(e.to_string()))?;
    LabeledDataset::new(x, labels, classes, split)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    #[test]
    fn split_arithmetic() {
        assert_eq!(split_sizes(1000), (700, 100, 200));
        let b = make_synthetic_benchmark(4, 3, 250, 2.0, 0).unwrap();
        assert_eq!((b.train.len(), b.val.len(), b.test.len()), (700, 100, 200));
    }

    #[test]
    fn benchmark_is_seed_deterministic() {
        let a = make_synthetic_benchmark(3, 4, 20, 1.0, 9).unwrap();
        let b = make_synthetic_benchmark(3, 4, 20, 1.0, 9).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn degenerate_benchmarks_are_rejected() {
        assert!(make_synthetic_benchmark(1, 4, 20, 1.0, 0).is_err());
        assert!(make_synthetic_benchmark(3, 1, 20, 1.0, 0).is_err());
        assert!(make_synthetic_benchmark(2, 4, 1, 1.0, 0).is_err());
        assert!(make_synthetic_benchmark(2, 4, 10, f64::NAN, 0).is_err());
    }

    #[test]
    fn single_client_gets_everything() {
        let labels: Vec<usize> = (0..50).map(|i| i % 3).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let plan = dirichlet_partition(&labels, 1, 0.1, &mut rng).unwrap();
        assert_eq!(plan.clients[0], (0..50).collect::<Vec<_>>());
    }

    #[test]
    fn impossible_partition_exhausts() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(dirichlet_partition(&[0, 0], 3, 1.0, &mut rng).is_err());
        let labels = vec![0usize; 3];
        let r = dirichlet_partition(&labels, 3, 1e-4, &mut rng);
        assert!(matches!(r, Err(FedbmError::PartitionExhausted { .. })));
    }

    #[test]
    fn csv_import() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, "a,b,label\n0.5,1.0,1\n-2,3,0").unwrap();
        let d = load_csv(f.path(), "label", 2, Split::Test).unwrap();
        assert_eq!(d.labels(), &[1, 0]);
        assert_eq!(d.samples()[[1, 0]], -2.0);
        assert!(load_csv(f.path(), "missing", 2, Split::Test).is_err());
        assert!(load_csv(f.path(), "label", 1, Split::Test).is_err());
    }
}

use ndarray::{Array1, Array2, Axis};
use rand::Rng;

/// Per-feature mean and biased variance over a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BnStats {
    pub mean: Array1<f64>,
    pub var: Array1<f64>,
}

impl BnStats {
    pub fn of(x: &Array2<f64>) -> Self {
        let n = x.nrows() as f64;
        let mean = x.sum_axis(Axis(0)) / n;
        let centered = x - &mean;
        let var = centered.mapv(|v| v * v).sum_axis(Axis(0)) / n;
        Self { mean, var }
    }

    pub fn zeros(width: usize) -> Self {
        Self {
            mean: Array1::zeros(width),
            var: Array1::zeros(width),
        }
    }
}

/// `y = x W + b` with `W` stored `in x out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

pub struct LinearGrads {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub input: Array2<f64>,
}

impl Linear {
    /// Uniform in `[-1/sqrt(in), 1/sqrt(in)]` for weights and biases.
    pub fn new<R: Rng + ?Sized>(input: usize, output: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (input as f64).sqrt();
        Self {
            weight: Array2::from_shape_fn((input, output), |_| rng.random_range(-bound..bound)),
            bias: Array1::from_shape_fn(output, |_| rng.random_range(-bound..bound)),
        }
    }

    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: Array2::zeros((input, output)),
            bias: Array1::zeros(output),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.weight) + &self.bias
    }

    pub fn backward(&self, x: &Array2<f64>, dy: &Array2<f64>) -> LinearGrads {
        LinearGrads {
            weight: x.t().dot(dy).as_standard_layout().into_owned(),
            bias: dy.sum_axis(Axis(0)),
            input: dy.dot(&self.weight.t()),
        }
    }
}

pub fn relu(x: &Array2<f64>) -> Array2<f64> {
    x.mapv(|v| v.max(0.0))
}

pub fn relu_backward(pre: &Array2<f64>, dy: &Array2<f64>) -> Array2<f64> {
    let mut out = dy.clone();
    out.zip_mut_with(pre, |g, p| {
        if *p <= 0.0 {
            *g = 0.0;
        }
    });
    out
}

/// Which statistics a BN layer normalizes with.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Normalization {
    Batch,
    Running,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
    pub momentum: f64,
    pub eps: f64,
}

#[derive(Debug, Clone)]
pub struct BnCache {
    normalization: Normalization,
    input: Array2<f64>,
    normalized: Array2<f64>,
    inv_std: Array1<f64>,
    pub stats: BnStats,
}

pub struct BnGrads {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    pub input: Array2<f64>,
}

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

impl BatchNorm {
    pub fn new(width: usize) -> Self {
        Self {
            gamma: Array1::ones(width),
            beta: Array1::zeros(width),
            running_mean: Array1::zeros(width),
            running_var: Array1::ones(width),
            momentum: BN_MOMENTUM,
            eps: BN_EPS,
        }
    }

    /// Normalizes `x`; batch statistics of `x` are always recorded in the cache.
    pub fn forward(&self, x: &Array2<f64>, normalization: Normalization) -> (Array2<f64>, BnCache) {
        let stats = BnStats::of(x);
        let (mean, var) = match normalization {
            Normalization::Batch => (&stats.mean, &stats.var),
            Normalization::Running => (&self.running_mean, &self.running_var),
        };
        let inv_std = var.mapv(|v| 1.0 / (v + self.eps).sqrt());
        let normalized = (x - mean) * &inv_std;
        let y = &normalized * &self.gamma + &self.beta;
        (
            y,
            BnCache {
                normalization,
                input: x.clone(),
                normalized,
                inv_std,
                stats,
            },
        )
    }

    /// `d_stats` injects gradients that reach the batch statistics directly
    /// (e.g. a statistic-matching loss) on top of the output gradient.
    pub fn backward(
        &self,
        cache: &BnCache,
        dy: &Array2<f64>,
        d_stats: Option<&BnStats>,
    ) -> BnGrads {
        let n = dy.nrows() as f64;
        let gamma_grad = (dy * &cache.normalized).sum_axis(Axis(0));
        let beta_grad = dy.sum_axis(Axis(0));
        let d_norm = dy * &self.gamma;
        let mut input = match cache.normalization {
            Normalization::Running => &d_norm * &cache.inv_std,
            Normalization::Batch => {
                let sum = d_norm.sum_axis(Axis(0));
                let dot = (&d_norm * &cache.normalized).sum_axis(Axis(0));
                let inner = &d_norm * n - &sum - &cache.normalized * &dot;
                inner * &(&cache.inv_std / n)
            }
        };
        if let Some(ds) = d_stats {
            let centered = &cache.input - &cache.stats.mean;
            input = input + &(&ds.mean / n) + centered * &(&ds.var * (2.0 / n));
        }
        BnGrads {
            gamma: gamma_grad,
            beta: beta_grad,
            input,
        }
    }

    /// `running <- (1 - m) * running + m * batch`.
    pub fn commit(&mut self, stats: &BnStats) {
        let m = self.momentum;
        self.running_mean = &self.running_mean * (1.0 - m) + &stats.mean * m;
        self.running_var = &self.running_var * (1.0 - m) + &stats.var * m;
    }

    pub fn running_stats(&self) -> BnStats {
        BnStats {
            mean: self.running_mean.clone(),
            var: self.running_var.clone(),
        }
    }
}

/// Row-wise L2 normalization; returns the normalized rows and the row norms.
pub fn l2_normalize(x: &Array2<f64>) -> (Array2<f64>, Array1<f64>) {
    let norms = x
        .rows()
        .into_iter()
        .map(|r| r.dot(&r).sqrt().max(1e-12))
        .collect::<Array1<f64>>();
    let out = x / &norms.view().insert_axis(Axis(1));
    (out, norms)
}

/// Projects `dy` onto the tangent space of each unit row: `(dy - h <h, dy>) / |x|`.
pub fn l2_normalize_backward(
    normalized: &Array2<f64>,
    norms: &Array1<f64>,
    dy: &Array2<f64>,
) -> Array2<f64> {
    let mut out = dy.clone();
    for ((mut row, h), norm) in out.rows_mut().into_iter().zip(normalized.rows()).zip(norms) {
        let along = h.dot(&row);
        row.scaled_add(-along, &h);
        row /= *norm;
    }
    out
}

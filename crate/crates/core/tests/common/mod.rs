#![allow(dead_code)]

use std::sync::Arc;

use fedbm::concept::{ConceptDistribution, ConceptEmbeddingSet, DistributionClassifier};
use fedbm::federation::{generator_objective, Head, Network};
use fedbm::losses::{
    contrastive_align_loss, distribution_loss, diversity_loss, semantic_loss, surrogate_align_loss,
    GeneratorLossConfig,
};
use fedbm::nn::{
    load_params, BnStats, ConditionalGenerator, FeatureExtractor, Normalization, Parameterized,
};
use ndarray::{Array1, Array2};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub const FD_STEP: f64 = 1e-6;
pub const GRAD_TOL: f64 = 1e-4;
pub const INSTANCES: u64 = 20;
/// Parameters probed per network instance.
pub const PROBED_PARAMS: usize = 200;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

pub fn normal_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| normal(rng))
}

pub fn normal_vector(len: usize, rng: &mut ChaCha8Rng) -> Array1<f64> {
    Array1::from_shape_fn(len, |_| normal(rng))
}

pub fn unit_rows(mut m: Array2<f64>) -> Array2<f64> {
    for mut row in m.rows_mut() {
        let n = row.dot(&row).sqrt();
        row.mapv_inplace(|v| v / n);
    }
    m
}

pub fn labels(n: usize, classes: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(0..classes)).collect()
}

pub fn tau_choice(rng: &mut ChaCha8Rng) -> f64 {
    [0.5, 1.0, 2.0][rng.random_range(0..3)]
}

pub fn random_distributions(
    classes: usize,
    dim: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<ConceptDistribution> {
    (0..classes)
        .map(|_| {
            let mean = normal_vector(dim, rng) * 0.5;
            let var = Array1::from_shape_fn(dim, |_| rng.random_range(0.0..0.5));
            ConceptDistribution::new(mean, var).unwrap()
        })
        .collect()
}

pub fn random_concept_set(
    classes: usize,
    prompts: usize,
    dim: usize,
    rng: &mut ChaCha8Rng,
) -> ConceptEmbeddingSet {
    let names = (0..classes).map(|k| format!("c{k}")).collect();
    let values = (0..classes)
        .map(|_| {
            (0..prompts)
                .map(|_| (0..dim).map(|_| normal(rng) * 0.5).collect())
                .collect()
        })
        .collect();
    ConceptEmbeddingSet::new(names, values).unwrap()
}

/// `||a - b|| / max(||a||, ||b||)`, zero when both vanish.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let diff: f64 = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).powi(2))
        .sum::<f64>()
        .sqrt();
    let na: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn: f64 = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    let scale = na.max(nn);
    if scale < 1e-300 {
        0.0
    } else {
        diff / scale
    }
}

/// Central differences of `f` at `x` along the listed coordinates.
pub fn numeric_gradient(x: &[f64], coords: &[usize], mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    coords
        .iter()
        .map(|&i| {
            let orig = probe[i];
            probe[i] = orig + FD_STEP;
            let up = f(&probe);
            probe[i] = orig - FD_STEP;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * FD_STEP)
        })
        .collect()
}

pub fn all_coords(n: usize) -> Vec<usize> {
    (0..n).collect()
}

pub fn some_coords(n: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut c = index::sample(rng, n, k.min(n)).into_vec();
    c.sort_unstable();
    c
}

fn check_matrix_gradient(
    x: &Array2<f64>,
    analytic: &Array2<f64>,
    f: impl Fn(&Array2<f64>) -> f64,
) -> f64 {
    let shape = x.raw_dim();
    let flat = x.iter().copied().collect::<Vec<_>>();
    let numeric = numeric_gradient(&flat, &all_coords(flat.len()), |v| {
        f(&Array2::from_shape_vec(shape, v.to_vec()).unwrap())
    });
    relative_error(&analytic.iter().copied().collect::<Vec<_>>(), &numeric)
}

/// Small random sizes: `B <= 4`, `D <= 8`, `K <= 5`.
pub fn small_sizes(rng: &mut ChaCha8Rng) -> (usize, usize, usize) {
    (
        rng.random_range(1..=4),
        rng.random_range(1..=8),
        rng.random_range(2..=5),
    )
}

pub fn contrastive_instance(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (b, d, k) = small_sizes(&mut r);
    let m = r.random_range(2..=5);
    let tau = tau_choice(&mut r);
    let set = random_concept_set(k, m, d, &mut r);
    let y = labels(b, k, &mut r);
    let h = normal_matrix(b, d, &mut r);
    let loss = contrastive_align_loss(&h, &y, &set, tau).unwrap();
    check_matrix_gradient(&h, &loss.grad, |x| {
        contrastive_align_loss(x, &y, &set, tau).unwrap().value
    })
}

pub fn surrogate_instance(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (b, d, k) = small_sizes(&mut r);
    let tau = tau_choice(&mut r);
    let clf = DistributionClassifier::build(&random_distributions(k, d, &mut r), tau).unwrap();
    let y = labels(b, k, &mut r);
    let h = normal_matrix(b, d, &mut r);
    let loss = surrogate_align_loss(&h, &y, &clf).unwrap();
    check_matrix_gradient(&h, &loss.grad, |x| {
        surrogate_align_loss(x, &y, &clf).unwrap().value
    })
}

pub fn semantic_instance(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (b, _, k) = small_sizes(&mut r);
    let y = labels(b, k, &mut r);
    let logits = normal_matrix(b, k, &mut r) * 2.0;
    let loss = semantic_loss(&logits, &y).unwrap();
    check_matrix_gradient(&logits, &loss.grad, |x| semantic_loss(x, &y).unwrap().value)
}

pub fn diversity_instance(seed: u64) -> f64 {
    let mut r = rng(seed);
    let b = r.random_range(2..=6);
    let dz = r.random_range(1..=8);
    let dx = r.random_range(1..=8);
    let z = normal_matrix(b, dz, &mut r);
    let x = normal_matrix(b, dx, &mut r);
    let loss = diversity_loss(&z, &x).unwrap();
    check_matrix_gradient(&x, &loss.grad, |s| diversity_loss(&z, s).unwrap().value)
}

fn flatten_stats(stats: &[BnStats]) -> Vec<f64> {
    stats
        .iter()
        .flat_map(|s| {
            s.mean
                .iter()
                .chain(s.var.iter())
                .copied()
                .collect::<Vec<_>>()
        })
        .collect()
}

fn unflatten_stats(flat: &[f64], widths: &[usize]) -> Vec<BnStats> {
    let mut offset = 0;
    widths
        .iter()
        .map(|&w| {
            let mean = Array1::from(flat[offset..offset + w].to_vec());
            let var = Array1::from(flat[offset + w..offset + 2 * w].to_vec());
            offset += 2 * w;
            BnStats { mean, var }
        })
        .collect()
}

pub fn distribution_instance(seed: u64) -> f64 {
    let mut r = rng(seed);
    let layers = r.random_range(1..=3);
    let widths: Vec<usize> = (0..layers).map(|_| r.random_range(1..=8)).collect();
    let make = |r: &mut ChaCha8Rng| -> Vec<BnStats> {
        widths
            .iter()
            .map(|&w| BnStats {
                mean: normal_vector(w, r),
                var: normal_vector(w, r).mapv(|v| v.abs() + 0.1),
            })
            .collect()
    };
    let batch = make(&mut r);
    let running = make(&mut r);
    let loss = distribution_loss(&batch, &running).unwrap();
    let flat = flatten_stats(&batch);
    let numeric = numeric_gradient(&flat, &all_coords(flat.len()), |v| {
        distribution_loss(&unflatten_stats(v, &widths), &running)
            .unwrap()
            .value
    });
    relative_error(&flatten_stats(&loss.grad), &numeric)
}

/// A teacher network with a frozen distribution classifier and perturbed
/// running statistics.
pub fn random_teacher(
    input_dim: usize,
    embed_dim: usize,
    classes: usize,
    r: &mut ChaCha8Rng,
) -> Network {
    let mut extractor = FeatureExtractor::new(input_dim, embed_dim, r);
    for bn in [&mut extractor.bn1, &mut extractor.bn2] {
        bn.running_mean = normal_vector(bn.running_mean.len(), r) * 0.3;
        bn.running_var = normal_vector(bn.running_var.len(), r).mapv(|v| 0.5 + v.abs());
        bn.gamma = normal_vector(bn.gamma.len(), r).mapv(|v| 1.0 + 0.2 * v);
        bn.beta = normal_vector(bn.beta.len(), r) * 0.2;
    }
    let tau = tau_choice(r);
    let clf =
        DistributionClassifier::build(&random_distributions(classes, embed_dim, r), tau).unwrap();
    Network::new(extractor, Head::Frozen(Arc::new(clf)))
}

pub fn generator_objective_instance(seed: u64) -> f64 {
    let mut r = rng(seed);
    let input_dim = r.random_range(2..=8);
    let embed_dim = r.random_range(2..=8);
    let classes = r.random_range(2..=5);
    let batch = r.random_range(2..=6);
    let teacher = random_teacher(input_dim, embed_dim, classes, &mut r);
    let generator = ConditionalGenerator::new(embed_dim, input_dim, &mut r);
    let z = normal_matrix(batch, embed_dim, &mut r);
    let y = labels(batch, classes, &mut r);
    let cfg = GeneratorLossConfig {
        lambda_div: r.random_range(0.1..2.0),
        lambda_dis: r.random_range(0.1..2.0),
    };
    let (_, grads) = generator_objective(&generator, &teacher, &z, &y, &cfg).unwrap();
    let params = generator.param_slices().concat();
    let coords = some_coords(params.len(), PROBED_PARAMS, &mut r);
    let numeric = numeric_gradient(&params, &coords, |p| {
        let mut g = generator.clone();
        load_params(&mut g, p).unwrap();
        generator_objective(&g, &teacher, &z, &y, &cfg)
            .unwrap()
            .0
            .value
    });
    let analytic: Vec<f64> = coords.iter().map(|&i| grads[i]).collect();
    relative_error(&analytic, &numeric)
}

/// Linear functional of the features plus one of every BN batch statistic,
/// so both the feature path and the statistic path are exercised.
pub fn extractor_instance(seed: u64) -> f64 {
    let mut r = rng(seed);
    let input_dim = r.random_range(2..=8);
    let embed_dim = r.random_range(2..=8);
    let batch = r.random_range(2..=6);
    let extractor = FeatureExtractor::new(input_dim, embed_dim, &mut r);
    let x = normal_matrix(batch, input_dim, &mut r);
    let weights = normal_matrix(batch, embed_dim, &mut r);
    let stat_weights: Vec<BnStats> = extractor
        .running_stats()
        .iter()
        .map(|s| BnStats {
            mean: normal_vector(s.mean.len(), &mut r),
            var: normal_vector(s.var.len(), &mut r),
        })
        .collect();
    let objective = |e: &FeatureExtractor, x: &Array2<f64>| -> f64 {
        let out = e.forward_with(x, Normalization::Batch).unwrap();
        let mut v = (&out.features * &weights).sum();
        for (s, w) in out.batch_stats.iter().zip(&stat_weights) {
            v += s.mean.dot(&w.mean) + s.var.dot(&w.var);
        }
        v
    };
    let out = extractor.forward_with(&x, Normalization::Batch).unwrap();
    let grads = extractor
        .backward(&out.cache, &weights, Some(&stat_weights))
        .unwrap();

    let params = extractor.param_slices().concat();
    let coords = some_coords(params.len(), PROBED_PARAMS, &mut r);
    let numeric = numeric_gradient(&params, &coords, |p| {
        let mut e = extractor.clone();
        load_params(&mut e, p).unwrap();
        objective(&e, &x)
    });
    let analytic: Vec<f64> = coords.iter().map(|&i| grads.params[i]).collect();
    let param_err = relative_error(&analytic, &numeric);
    let input_err = check_matrix_gradient(&x, &grads.input, |xi| objective(&extractor, xi));
    param_err.max(input_err)
}

pub fn generator_network_instance(seed: u64) -> f64 {
    let mut r = rng(seed);
    let cond = r.random_range(1..=8);
    let out_dim = r.random_range(1..=8);
    let batch = r.random_range(1..=6);
    let generator = ConditionalGenerator::new(cond, out_dim, &mut r);
    let z = normal_matrix(batch, cond, &mut r);
    let weights = normal_matrix(batch, out_dim, &mut r);
    let objective =
        |g: &ConditionalGenerator, z: &Array2<f64>| (&g.generate(z).unwrap() * &weights).sum();
    let (_, cache) = generator.forward(&z).unwrap();
    let grads = generator.backward(&cache, &weights).unwrap();
    let params = generator.param_slices().concat();
    let coords = some_coords(params.len(), PROBED_PARAMS, &mut r);
    let numeric = numeric_gradient(&params, &coords, |p| {
        let mut g = generator.clone();
        load_params(&mut g, p).unwrap();
        objective(&g, &z)
    });
    let analytic: Vec<f64> = coords.iter().map(|&i| grads.params[i]).collect();
    relative_error(&analytic, &numeric).max(check_matrix_gradient(&z, &grads.input, |zi| {
        objective(&generator, zi)
    }))
}

/// Worst relative error over `INSTANCES` seeded instances.
pub fn worst_over_instances(offset: u64, f: impl Fn(u64) -> f64) -> f64 {
    (0..INSTANCES).map(|i| f(offset + i)).fold(0.0, f64::max)
}

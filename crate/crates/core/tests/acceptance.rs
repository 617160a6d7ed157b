//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion.
//! Set `FEDBM_ACCEPTANCE_STRICT=1` to exit non-zero when any criterion fails.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use common::*;
use fedbm::concept::{ConceptDistribution, DistributionClassifier};
use fedbm::config::{ExperimentConfig, Method};
use fedbm::data::{dirichlet_partition, mean_max_label_share};
use fedbm::federation::{client_stream, train_centralized, GeneratorTrainingConfig};
use fedbm::losses::{
    cross_entropy, monte_carlo_align_loss, surrogate_align_loss, GeneratorLossConfig,
};
use fedbm::runner::{build_simulation, load_benchmark, run, simulate, METRICS_FILE};
use ndarray::{Array1, Array2};
use rand::Rng;

type Verdict = (bool, String);
type Named<F> = (&'static str, F);
/// Worst relative gradient error over the instances of one seed offset.
type Suite = fn(u64) -> f64;

fn bound_suite() -> Verdict {
    let start = Instant::now();
    let mut held = 0;
    let mut worst_gap = f64::NEG_INFINITY;
    for seed in 0..100 {
        let mut r = rng(10_000 + seed);
        let (b, d, k) = small_sizes(&mut r);
        let tau = tau_choice(&mut r);
        let dists = random_distributions(k, d, &mut r);
        let clf = DistributionClassifier::build(&dists, tau).unwrap();
        let y = labels(b, k, &mut r);
        // unit rows, as produced by the extractor
        let h = unit_rows(normal_matrix(b, d, &mut r));
        let bound = surrogate_align_loss(&h, &y, &clf).unwrap().value;
        let mc = monte_carlo_align_loss(&h, &y, &dists, tau, 10_000, &mut r).unwrap();
        let gap = mc.estimate - (bound + 3.0 * mc.stderr);
        worst_gap = worst_gap.max(gap);
        if gap <= 0.0 {
            held += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    (
        held == 100 && secs < 60.0,
        format!("{held}/100 instances within bound + 3 stderr (worst margin {worst_gap:.3e}), {secs:.1} s"),
    )
}

fn mgf_identity() -> Verdict {
    let mut r = rng(20_000);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let tau = tau_choice(&mut r);
        let h: f64 = r.random_range(-1.0..1.0);
        let mu: f64 = r.random_range(-1.0..1.0);
        let sigma: f64 = r.random_range(0.0..0.7);
        let exact = (tau * h * mu + 0.5 * tau * tau * h * h * sigma * sigma).exp();
        let n = 100_000;
        let mean = (0..n)
            .map(|_| (tau * h * (mu + sigma * normal(&mut r))).exp())
            .sum::<f64>()
            / n as f64;
        worst = worst.max((mean - exact).abs() / exact);
    }
    (
        worst <= 0.05,
        format!("worst relative deviation {worst:.2e} over 50 tuples"),
    )
}

fn gradient_suite() -> Verdict {
    let suites: [Named<Suite>; 8] = [
        ("contrastive", contrastive_instance),
        ("surrogate", surrogate_instance),
        ("semantic", semantic_instance),
        ("diversity", diversity_instance),
        ("distribution", distribution_instance),
        ("generator objective", generator_objective_instance),
        ("extractor", extractor_instance),
        ("generator network", generator_network_instance),
    ];
    let mut ok = true;
    let mut parts = Vec::new();
    for (i, (name, f)) in suites.iter().enumerate() {
        let worst = worst_over_instances(30_000 + 100 * i as u64, f);
        ok &= worst <= GRAD_TOL;
        parts.push(format!("{name} {worst:.1e}"));
    }
    (ok, format!("worst relative error: {}", parts.join(", ")))
}

fn zero_variance_reduction() -> Verdict {
    let mut worst = 0.0f64;
    let mut exact = true;
    for seed in 0..20 {
        let mut r = rng(40_000 + seed);
        let (b, d, k) = small_sizes(&mut r);
        let tau = tau_choice(&mut r);
        let dists: Vec<ConceptDistribution> = (0..k)
            .map(|_| ConceptDistribution::new(normal_vector(d, &mut r), Array1::zeros(d)).unwrap())
            .collect();
        let clf = DistributionClassifier::build(&dists, tau).unwrap();
        let y = labels(b, k, &mut r);
        let h = normal_matrix(b, d, &mut r);
        let surrogate = surrogate_align_loss(&h, &y, &clf).unwrap().value;
        // tau * H * means, by scalar loops
        let logits = Array2::from_shape_fn((b, k), |(i, c)| {
            tau * (0..d).map(|j| h[[i, j]] * dists[c].mean[j]).sum::<f64>()
        });
        let ce = cross_entropy(&logits, &y).unwrap().value;
        worst = worst.max((surrogate - ce).abs());
        let mc = monte_carlo_align_loss(&h, &y, &dists, tau, 200, &mut r).unwrap();
        exact &= mc.estimate == surrogate;
    }
    (
        worst <= 1e-10 && exact,
        format!("max |surrogate - CE| = {worst:.1e}; Monte Carlo exactly equal: {exact}"),
    )
}

fn partition_suite() -> Verdict {
    let mut r = rng(50_000);
    let mut conserved = 0;
    for _ in 0..200 {
        let clients = r.random_range(1..=8);
        let beta = 10f64.powf(r.random_range(-1.0..1.0));
        let seed = r.random::<u64>();
        let classes = r.random_range(2..=6);
        let y: Vec<usize> = (0..classes * 300).map(|i| i % classes).collect();
        let plan = dirichlet_partition(&y, clients, beta, &mut rng(seed)).unwrap();
        let mut all: Vec<usize> = plan.clients.concat();
        all.sort_unstable();
        if all == (0..y.len()).collect::<Vec<_>>() && plan.clients.iter().all(|c| !c.is_empty()) {
            conserved += 1;
        }
    }
    let y: Vec<usize> = (0..2000).map(|i| i % 4).collect();
    let shares: Vec<f64> = [0.05, 0.1, 1.0, 10.0]
        .iter()
        .map(|&beta| {
            (0..50)
                .map(|s| {
                    mean_max_label_share(
                        &dirichlet_partition(&y, 8, beta, &mut rng(60_000 + s)).unwrap(),
                        &y,
                    )
                })
                .sum::<f64>()
                / 50.0
        })
        .collect();
    let decreasing = shares.windows(2).all(|w| w[0] > w[1]);
    (
        conserved == 200 && decreasing,
        format!(
            "{conserved}/200 plans conserve indices; mean max share {}",
            shares
                .iter()
                .map(|s| format!("{s:.3}"))
                .collect::<Vec<_>>()
                .join(" > ")
        ),
    )
}

fn single_client_equivalence() -> Verdict {
    let mut ok = true;
    let mut epochs = 0;
    for method in [Method::LkccOnly, Method::FedAvg] {
        let cfg = ExperimentConfig {
            method,
            clients: 1,
            sample_ratio: 1.0,
            local_epochs: 1,
            rounds: 5,
            parallel: true,
            seed: 7,
            benchmark: fedbm::config::BenchmarkSource::Synthetic {
                classes: 4,
                input_dim: 16,
                n_per_class: 100,
                separation: 4.0,
            },
            ..Default::default()
        };
        let mut sim = build_simulation(&cfg).unwrap();
        let mut central = sim.server.global().clone();
        let train = load_benchmark(&cfg).unwrap().train;
        let history = train_centralized(
            &mut central,
            &train,
            cfg.batch_size,
            cfg.learning_rate,
            cfg.rounds,
            &mut client_stream(cfg.seed, 0),
        )
        .unwrap();
        for expected in &history {
            sim.run_round().unwrap();
            ok &= sim.server.global_vector().to_bits() == expected.to_bits();
            epochs += 1;
        }
    }
    (
        ok,
        format!("{epochs} epochs compared bitwise across frozen and linear heads"),
    )
}

fn frozen_byte_equality() -> Verdict {
    let cfg = ExperimentConfig {
        rounds: 20,
        refresh_period: 2,
        generator_steps: 5,
        seed: 3,
        ..Default::default()
    };
    let gen_cfg = GeneratorTrainingConfig {
        steps: 5,
        batch_size: cfg.generator_batch_size,
        learning_rate: cfg.generator_learning_rate,
        loss: GeneratorLossConfig::default(),
    };
    let mut sim = build_simulation(&cfg).unwrap();
    let reference = sim.server.classifier().unwrap().to_bytes();
    let mut r = rng(70_000);
    let mut classifier_ok = true;
    let mut teacher_ok = true;
    for _ in 0..cfg.rounds {
        let before = sim.server.global_vector().to_bits();
        sim.server.train_generator(&gen_cfg, &mut r).unwrap();
        teacher_ok &= sim.server.global_vector().to_bits() == before;
        sim.run_round().unwrap();
        classifier_ok &= sim.server.classifier().unwrap().to_bytes() == reference;
        classifier_ok &= sim
            .clients()
            .iter()
            .all(|c| c.classifier().unwrap().to_bytes() == reference);
    }
    (
        classifier_ok && teacher_ok,
        format!("classifier unchanged on server and all clients: {classifier_ok}; teacher unchanged by generator training: {teacher_ok}"),
    )
}

fn directional_config(method: Method, seed: u64) -> ExperimentConfig {
    ExperimentConfig {
        method,
        seed,
        clients: 8,
        beta: 0.05,
        sample_ratio: 0.5,
        rounds: 50,
        parallel: true,
        ..Default::default()
    }
}

fn central_accuracy() -> f64 {
    let seeds = [0u64, 1, 2];
    seeds
        .iter()
        .map(|&seed| {
            let cfg = directional_config(Method::LkccOnly, seed);
            let bench = load_benchmark(&cfg).unwrap();
            let mut net = build_simulation(&cfg).unwrap().server.global().clone();
            train_centralized(
                &mut net,
                &bench.train,
                cfg.batch_size,
                cfg.learning_rate,
                20,
                &mut rng(seed),
            )
            .unwrap();
            net.evaluate(&bench.test).unwrap().accuracy
        })
        .sum::<f64>()
        / seeds.len() as f64
}

fn directional() -> Verdict {
    let start = Instant::now();
    let central = central_accuracy();
    let mean = |method: Method| -> f64 {
        [0u64, 1, 2]
            .iter()
            .map(|&s| {
                simulate(&directional_config(method, s), |_| {})
                    .unwrap()
                    .0
                    .summary
                    .last
                    .test
                    .accuracy
            })
            .sum::<f64>()
            / 3.0
    };
    let fedbm = mean(Method::FedBm);
    let lkcc = mean(Method::LkccOnly);
    let fedavg = mean(Method::FedAvg);
    let secs = start.elapsed().as_secs_f64();
    let ok = central >= 0.95
        && fedbm >= lkcc
        && lkcc >= fedavg
        && fedbm - fedavg >= 0.02
        && secs < 600.0;
    (
        ok,
        format!(
            "central {central:.4}; final test accuracy fedbm {fedbm:.4}, lkcc-only {lkcc:.4}, fedavg {fedavg:.4}; {secs:.0} s"
        ),
    )
}

fn determinism() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let csv = |name: &str| {
        let cfg = ExperimentConfig {
            rounds: 12,
            refresh_period: 3,
            parallel: true,
            seed: 11,
            output_dir: dir.path().join(name),
            ..Default::default()
        };
        run(&cfg).unwrap();
        std::fs::read(dir.path().join(name).join(METRICS_FILE)).unwrap()
    };
    let a = csv("a");
    let b = csv("b");
    (
        a == b,
        format!(
            "two parallel runs wrote {} and {} CSV bytes, identical: {}",
            a.len(),
            b.len(),
            a == b
        ),
    )
}

fn main() {
    let criteria: [Named<fn() -> Verdict>; 9] = [
        ("bound suite", bound_suite),
        ("MGF identity", mgf_identity),
        ("gradient suite", gradient_suite),
        ("zero-variance reduction", zero_variance_reduction),
        ("partition suite", partition_suite),
        ("single-client equivalence", single_client_equivalence),
        ("frozen classifier and teacher", frozen_byte_equality),
        ("directional end-to-end", directional),
        ("determinism", determinism),
    ];
    let filter: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .collect();
    let mut failed = 0;
    for (name, check) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let (ok, detail) = catch_unwind(AssertUnwindSafe(check))
            .unwrap_or_else(|e| (false, format!("panicked: {:?}", e.downcast_ref::<String>())));
        println!("{} {name}: {detail}", if ok { "PASS" } else { "FAIL" });
        if !ok {
            failed += 1;
        }
    }
    println!("{failed} acceptance criteria failed");
    if failed > 0 && std::env::var("FEDBM_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1") {
        std::process::exit(1);
    }
}

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fedbm::config::{ExperimentConfig, Method};
use fedbm::runner;
use fedbm::FedbmError;

#[derive(Parser)]
#[command(
    name = "fedbm",
    version,
    about = "Federated learning simulator with concept-distribution classifiers"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write metrics, summary and checkpoint.
    Run {
        /// JSON config; omitted fields take their defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum)]
        method: Option<Method>,
    },
    /// Write a random concept-embedding set in CEB1 format.
    GenEmbeddings {
        #[arg(long)]
        classes: usize,
        #[arg(long)]
        prompts: usize,
        #[arg(long)]
        dim: usize,
        #[arg(long, default_value_t = 0.1)]
        spread: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

const EXIT_CONFIG: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

fn exit_code(err: &FedbmError) -> u8 {
    match err {
        FedbmError::Config { .. } => EXIT_CONFIG,
        _ => EXIT_RUNTIME,
    }
}

fn load_config(
    path: Option<PathBuf>,
    seed: Option<u64>,
    out: Option<PathBuf>,
    method: Option<Method>,
) -> fedbm::Result<ExperimentConfig> {
    let mut cfg = match path {
        Some(p) => ExperimentConfig::load(&p).map_err(|e| match e {
            FedbmError::Io { .. } => FedbmError::Config {
                field: "config".into(),
                reason: e.to_string(),
            },
            other => other,
        })?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    if let Some(out) = out {
        cfg.output_dir = out;
    }
    if let Some(method) = method {
        cfg.method = method;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let result = match Cli::parse().command {
        Command::Run {
            config,
            seed,
            out,
            method,
        } => load_config(config, seed, out, method).and_then(|cfg| {
            let outcome = runner::run(&cfg)?;
            let s = &outcome.summary;
            println!(
                "{}: final test accuracy {:.4}, macro-F1 {:.4}; best round {:?} test accuracy {:.4}",
                s.method.name(),
                s.last.test.accuracy,
                s.last.test.macro_f1,
                s.best_round,
                s.best.test.accuracy
            );
            Ok(())
        }),
        Command::GenEmbeddings {
            classes,
            prompts,
            dim,
            spread,
            seed,
            out,
        } => runner::gen_synthetic_embeddings(&out, classes, prompts, dim, spread, seed).map(|set| {
            println!(
                "wrote {} classes x {} prompts x {} dims to {}",
                set.class_count(),
                set.prompt_count(),
                set.dim(),
                out.display()
            )
        }),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

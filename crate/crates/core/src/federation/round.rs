use std::io::Write;
use std::time::Instant;

use rand::seq::index;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::client::{ClientState, ClientUpdate, LocalTrainingConfig};
use super::model::Evaluation;
use super::server::{GeneratorStats, GeneratorTrainingConfig, ServerState};
use crate::data::LabeledDataset;
use crate::error::{FedbmError, Result};
use crate::nn::ParameterVector;

/// Elementwise uniform mean of parameters and buffers.
///
/// Each coordinate is summed in ascending order so the result does not
/// depend on the order of `vectors`.
pub fn aggregate(vectors: &[ParameterVector]) -> Result<ParameterVector> {
    let first = vectors
        .first()
        .ok_or_else(|| FedbmError::InvalidArgument("nothing to aggregate".into()))?;
    for v in &vectors[1..] {
        if v.layout != first.layout {
            return Err(FedbmError::LayoutMismatch(
                "aggregated vectors differ in layout".into(),
            ));
        }
    }
    let n = vectors.len() as f64;
    let mut column = Vec::with_capacity(vectors.len());
    let mut mean_of = |pick: &dyn Fn(&ParameterVector) -> &[f64], len: usize| -> Vec<f64> {
        (0..len)
            .map(|i| {
                column.clear();
                column.extend(vectors.iter().map(|v| pick(v)[i]));
                column.sort_by(f64::total_cmp);
                column[1..].iter().fold(column[0], |acc, v| acc + v) / n
            })
            .collect()
    };
    let params = mean_of(&|v| &v.params, first.params.len());
    let buffers = mean_of(&|v| &v.buffers, first.buffers.len());
    ParameterVector::new(first.layout.clone(), params, buffers)
}

/// `ceil(ratio * clients)` distinct ids in ascending order, at least one.
pub fn sample_clients(clients: usize, ratio: f64, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let n = ((ratio * clients as f64).ceil() as usize).clamp(1, clients.max(1));
    let mut ids = index::sample(rng, clients, n).into_vec();
    ids.sort_unstable();
    ids
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: usize,
    pub participants: Vec<usize>,
    /// Sampled clients that had nothing to train on.
    pub skipped: Vec<usize>,
    pub mean_local_loss: f64,
    pub test: Evaluation,
    pub val: Evaluation,
    pub generator: Option<GeneratorStats>,
    pub seconds: f64,
}

pub const CSV_HEADER: [&str; 9] = [
    "round",
    "n_participants",
    "mean_local_loss",
    "test_accuracy",
    "test_macro_f1",
    "gen_sem",
    "gen_div",
    "gen_dis",
    "seconds",
];

/// Writes one CSV row per report. The `seconds` column stays empty unless
/// `timings` is set so that reruns produce identical files.
pub fn write_reports_csv<W: Write>(out: W, reports: &[RoundReport], timings: bool) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_HEADER)?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in reports {
        let g = r.generator.as_ref();
        w.write_record([
            r.round.to_string(),
            r.participants.len().to_string(),
            r.mean_local_loss.to_string(),
            r.test.accuracy.to_string(),
            r.test.macro_f1.to_string(),
            opt(g.map(|g| g.semantic)),
            opt(g.map(|g| g.diversity)),
            opt(g.map(|g| g.distribution)),
            if timings {
                r.seconds.to_string()
            } else {
                String::new()
            },
        ])?;
    }
    w.flush().map_err(|e| FedbmError::io("<csv>", e))?;
    Ok(())
}

/// A server, its clients and the held-out sets, advanced one round at a time.
pub struct Simulation {
    pub server: ServerState,
    clients: Vec<ClientState>,
    val: LabeledDataset,
    test: LabeledDataset,
    local: LocalTrainingConfig,
    generator: GeneratorTrainingConfig,
    rng: ChaCha8Rng,
    parallel: bool,
}

impl Simulation {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        server: ServerState,
        clients: Vec<ClientState>,
        val: LabeledDataset,
        test: LabeledDataset,
        local: LocalTrainingConfig,
        generator: GeneratorTrainingConfig,
        rng: ChaCha8Rng,
        parallel: bool,
    ) -> Self {
        Self {
            server,
            clients,
            val,
            test,
            local,
            generator,
            rng,
            parallel,
        }
    }

    pub fn clients(&self) -> &[ClientState] {
        &self.clients
    }

    pub fn evaluate(&self) -> Result<(Evaluation, Evaluation)> {
        let global = self.server.global();
        Ok((global.evaluate(&self.val)?, global.evaluate(&self.test)?))
    }

    pub fn run_round(&mut self) -> Result<RoundReport> {
        let start = Instant::now();
        let round = self.server.round;
        let generator = if self.server.refresh_due() {
            Some(
                self.server
                    .train_generator(&self.generator, &mut self.rng)?,
            )
        } else {
            None
        };

        let selected = sample_clients(self.clients.len(), self.server.sample_ratio, &mut self.rng);
        let global = self.server.global_vector();
        let broadcast = self.server.broadcast();
        let local = self.local;
        let (active, skipped): (Vec<usize>, Vec<usize>) = selected
            .iter()
            .partition(|&&id| self.clients[id].sample_count() > 0);
        for id in &skipped {
            log::warn!("round {round}: client {id} has no local data, skipped");
        }

        let work = |c: &mut ClientState| c.update(&global, broadcast.as_ref(), &local);
        let chosen = self
            .clients
            .iter_mut()
            .filter(|c| active.binary_search(&c.id()).is_ok());
        let updates: Vec<ClientUpdate> = if self.parallel {
            chosen
                .collect::<Vec<_>>()
                .into_par_iter()
                .map(work)
                .collect::<Result<_>>()?
        } else {
            chosen.map(work).collect::<Result<_>>()?
        };

        if !updates.is_empty() {
            let vectors: Vec<ParameterVector> = updates.iter().map(|u| u.vector.clone()).collect();
            self.server.set_global(&aggregate(&vectors)?)?;
        }
        let losses: Vec<f64> = updates
            .iter()
            .map(|u| u.mean_loss)
            .filter(|l| l.is_finite())
            .collect();
        let mean_local_loss = if losses.is_empty() {
            f64::NAN
        } else {
            losses.iter().sum::<f64>() / losses.len() as f64
        };
        let (val, test) = self.evaluate()?;
        self.server.round += 1;
        Ok(RoundReport {
            round,
            participants: active,
            skipped,
            mean_local_loss,
            test,
            val,
            generator,
            seconds: start.elapsed().as_secs_f64(),
        })
    }
}

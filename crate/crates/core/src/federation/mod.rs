//! Client and server state, local training, generator refreshes and the
//! round loop.

mod centralized;
mod client;
mod model;
mod round;
mod server;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use centralized::train_centralized;
pub use client::{
    draw_conditions, ClientState, ClientUpdate, GeneratorBroadcast, LocalTrainingConfig,
};
pub use model::{Evaluation, Head, Network};
pub use round::{
    aggregate, sample_clients, write_reports_csv, RoundReport, Simulation, CSV_HEADER,
};
pub use server::{
    fresh_semantic_loss, generator_objective, train_generator, GeneratorStats,
    GeneratorTrainingConfig, ServerState,
};

pub const STREAM_BENCHMARK: u64 = 1;
pub const STREAM_PARTITION: u64 = 2;
pub const STREAM_MODEL_INIT: u64 = 3;
pub const STREAM_SERVER: u64 = 4;
pub const STREAM_RANDOM_CLASSIFIER: u64 = 5;
pub const STREAM_EMBEDDINGS: u64 = 6;
const STREAM_CLIENT_BASE: u64 = 100;

/// Independent random stream `id` of a run seeded with `seed`.
pub fn rng_stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

pub fn client_stream(seed: u64, client: usize) -> ChaCha8Rng {
    rng_stream(seed, STREAM_CLIENT_BASE + client as u64)
}

//! Heterogeneous federated learning with a frozen classifier built from
//! concept-embedding distributions and a server-trained conditional
//! generator that supplies shared synthetic data to clients.

pub mod concept;
pub mod config;
pub mod data;
pub mod error;
pub mod federation;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod runner;

pub use error::{FedbmError, Result};

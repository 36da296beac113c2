//! Minimum-action-distance state embeddings learned from offline
//! trajectories, a latent transition model with random-shooting planning,
//! and potential-based reward shaping, with an exact graph-search oracle for
//! small gridworlds.

pub mod collect;
pub mod embed;
pub mod envs;
pub mod error;
pub mod exec;
pub mod gcsl;
pub mod latent;
pub mod neural;
pub mod oracle;
pub mod pipeline;
pub mod shaping;
pub mod trajdata;

pub use error::{Error, Result};
pub use exec::Exec;

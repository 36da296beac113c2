//! Feed-forward networks with hand-written backprop, AdamW, and a text
//! checkpoint format.

mod adamw;
mod checkpoint;
mod mlp;

pub use adamw::{AdamW, AdamWConfig};
pub use checkpoint::Checkpoint;
pub use mlp::{
    prefixed_views, Activation, ForwardCache, Layer, Mlp, MlpGrads, Parameters, SELU_ALPHA,
    SELU_LAMBDA,
};

use ndarray::Array2;

use crate::envs::State;

/// Stacks state feature vectors into a row matrix.
pub fn stack_states<'a>(states: impl IntoIterator<Item = &'a State>, dim: usize) -> Array2<f64> {
    let flat: Vec<f64> = states
        .into_iter()
        .flat_map(|s| s.features().iter().copied())
        .collect();
    let rows = flat.len() / dim.max(1);
    Array2::from_shape_vec((rows, dim), flat).expect("consistent state dims")
}

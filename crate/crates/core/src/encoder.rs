//! Parameter-free graph propagation over the joint user-item-concept graph.
//!
//! Each layer is `z^(l) = Â z^(l-1)` with the symmetric-normalized adjacency
//! `Â`; the readout is the uniform mean of layers `0..=L`.

use std::sync::Arc;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::sparse::SparseOperator;
use crate::tape::{Tape, Var};

/// Standard deviation of the layer-0 initialization.
pub const INIT_STD: f64 = 0.1;

/// `num_nodes x dim` matrix with `N(0, 0.1²)` entries.
pub fn init_layer0(num_nodes: usize, dim: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, INIT_STD).expect("valid std");
    Array2::from_shape_simple_fn((num_nodes, dim), || normal.sample(&mut rng))
}

/// Returns the `L + 1` layer embeddings, starting with `layer0` itself.
pub fn propagate(tape: &mut Tape, adjacency: &Arc<SparseOperator>, layer0: Var, layers: usize) -> Result<Vec<Var>> {
    if layers == 0 {
        return Err(Error::Config("propagation needs at least one layer".into()));
    }
    let (rows, _) = tape.shape(layer0);
    let adj = adjacency.matrix();
    if adj.rows() != rows || adj.cols() != rows {
        return Err(Error::shape(
            "propagate",
            format!("adjacency {}x{} vs {} embedding rows", adj.rows(), adj.cols(), rows),
        ));
    }
    let mut out = Vec::with_capacity(layers + 1);
    out.push(layer0);
    for _ in 0..layers {
        let prev = *out.last().unwrap();
        out.push(tape.spmm(adjacency, prev));
    }
    Ok(out)
}

/// Uniform mean of the layer embeddings.
pub fn readout(tape: &mut Tape, layers: &[Var]) -> Result<Var> {
    let (&first, rest) = layers
        .split_first()
        .ok_or_else(|| Error::shape("readout", "no layers"))?;
    let shape = tape.shape(first);
    let mut total = first;
    for &layer in rest {
        if tape.shape(layer) != shape {
            return Err(Error::shape("readout", format!("{:?} vs {:?}", tape.shape(layer), shape)));
        }
        total = tape.add(total, layer);
    }
    Ok(tape.scale(total, 1.0 / layers.len() as f64))
}

/// Entangled behavior embedding `z_u ⊙ z_i`.
pub fn behavior_embedding(tape: &mut Tape, users: Var, items: Var) -> Result<Var> {
    if tape.shape(users) != tape.shape(items) {
        return Err(Error::shape(
            "behavior_embedding",
            format!("{:?} vs {:?}", tape.shape(users), tape.shape(items)),
        ));
    }
    Ok(tape.mul(users, items))
}

/// Propagates and reads out in one call, on plain matrices.
pub fn encode(adjacency: &Arc<SparseOperator>, layer0: &Array2<f64>, layers: usize) -> Result<Array2<f64>> {
    let mut tape = Tape::new();
    let x = tape.constant(layer0.clone());
    let all = propagate(&mut tape, adjacency, x, layers)?;
    let out = readout(&mut tape, &all)?;
    Ok(tape.value(out).clone())
}

//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Graph`] records every operation as it executes; [`Graph::backward`]
//! replays the record in reverse to accumulate gradients into every node
//! the loss depends on. Leaves created with [`Graph::param`] receive
//! gradients, leaves created with [`Graph::constant`] never do.

mod functional;
mod graph;

pub use functional::{
    cosine_matrix, cosine_similarity, finite_diff_grad, gru_cell, l2_normalize, layer_norm,
    linear, relative_error, GruParams, FD_STEP, LAYER_NORM_EPS, NORM_EPS,
};
pub use graph::{Graph, NumericMode, Var, CLAMP_EPS};

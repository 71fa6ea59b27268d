//! Deterministic reverse-mode differentiation over dense `f64` matrices.
//!
//! Everything runs on one thread in a fixed order, so identical inputs give
//! bit-identical values and gradients.

mod graph;
mod matrix;
mod params;

pub use graph::{bilinear_taps, Gradients, Graph, Var};
pub use matrix::Matrix;
pub use params::{init_matrix, Init, ParamId, ParamStore};

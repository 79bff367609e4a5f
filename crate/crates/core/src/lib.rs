//! Background clustering pre-training.
//!
//! Pixels labelled as background during pre-training are partitioned online
//! into `K` clusters whose centres are maintained by exponential moving
//! averages. Background pixels are then trained against their assigned
//! centre while base-class pixels use ordinary cross-entropy. Optionally the
//! base-class projection vectors steer the centres ("guidance").
//!
//! The crate also contains a synthetic scene generator that hides novel
//! classes inside the background, a small per-pixel embedder trained with
//! hand-written backpropagation, and the evaluation used to compare
//! pre-training schemes.

pub mod cluster;
pub mod error;
pub mod eval;
pub mod guidance;
pub mod losses;
pub mod registry;
pub mod seed;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};

/// Dense column-major matrix used throughout. Columns are vectors
/// (embeddings, centres, projection vectors).
pub type Mat = nalgebra::DMatrix<f64>;
pub type Vector = nalgebra::DVector<f64>;

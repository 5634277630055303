//! Scalar-f64 numerical kernel: tensors, a reverse-mode tape, neural-net
//! building blocks, Adam, seeded RNG streams, Gaussian utilities, finite
//! differences, and binary checkpoint I/O.
//!
//! Everything downstream (environment simulation, both training stages, the
//! diagnostics) is built on these primitives, so this module carries the
//! strictest tests in the workspace: hand-derived single-step values, exact
//! round-trips, and finite-difference sweeps over every differentiable op.

mod adam;
mod checkpoint;
mod gaussian;
mod gradcheck;
mod nn;
mod rng;
mod tape;
mod tensor;

pub use adam::AdamState;
pub use checkpoint::{load_checkpoint, save_checkpoint, sha256_hex_file, write_atomic};
pub use gaussian::{gaussian_kl, gaussian_kl_value, reparam_sample};
pub use gradcheck::central_diff_grad;
pub use nn::{
    assign_params, collect_params, scoped, xavier_uniform, BindIndex, Dense, DenseVars, GradAccum,
    Gru, GruVars, Mlp, MlpVars, ParamVisit,
};
pub use rng::Rng;
pub use tape::{Gradients, Tape, VarId};
pub use tensor::Tensor;

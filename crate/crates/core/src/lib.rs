//! Core library for latent-context system identification and causal diffusion
//! planning on synthetic control tasks.
//!
//! The crate is organized as a stack: [`numerics`] provides tensors, a reverse-mode
//! tape, optimizers, and checkpoint I/O; [`envsim`] generates demonstration data
//! from small closed-form environments with a time-varying hidden context;
//! [`latentid`] trains a sequential variational model that infers that context from
//! short observation windows; [`causaldiff`] trains and samples a block-causal
//! denoising diffusion planner conditioned on the inferred context; [`verify`]
//! computes the transition-kernel diagnostics that justify the whole construction;
//! and [`evalprobe`] holds the probing, clustering, and rollout statistics used to
//! score results.

pub mod causaldiff;
pub mod envsim;
pub mod error;
pub mod evalprobe;
pub mod latentid;
pub mod numerics;
pub mod verify;

pub use error::{CoreError, Result};

//! Synthetic control environments with time-varying hidden context, scripted
//! experts, and dataset generation / (de)serialization.

mod context;
mod data;
mod spec;

pub use context::{ContextKind, ContextProcess};
pub use data::{generate_dataset, generate_dataset_seeded, Dataset, StepRecord};
pub use spec::{EnvKind, EnvSpec, ExpertParams, RewardVariant};

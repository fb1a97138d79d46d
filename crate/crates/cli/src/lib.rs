//! Config-driven experiment runner: corpus synthesis, noise injection,
//! filter evaluation, training under several objectives, evaluation and
//! histogram export.

pub mod config;
pub mod manifest;
pub mod pipeline;
pub mod sweep;

pub use config::{ExperimentConfig, Stage};
pub use manifest::RunManifest;
pub use pipeline::{run_experiment, run_stage, ObjectiveReport};
pub use sweep::sweep;

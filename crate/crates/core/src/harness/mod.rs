//! Experiment plumbing: configuration, manifests, training, sampling,
//! evaluation, ablation suites and the gradient check suite.

pub mod ablate;
pub mod check;
pub mod config;
pub mod data;
pub mod eval;
pub mod manifest;
pub mod train;

pub use ablate::{run_ablation, AblationSuite};
pub use config::ExperimentConfig;
pub use eval::{run_eval, run_sample};
pub use manifest::Manifest;
pub use train::{run_train, Trainer};

//! Multitask Gaussian process regression with composite Kronecker covariances.
//!
//! The model covariance over observed (input, task) pairs is a sum of terms
//! `A_t ⊗ K_t` plus per-task (optionally correlated) noise. Single-task GP,
//! shared-covariance, structured-noise and composite multitask models are all
//! presets of one [`ModelConfig`](model::ModelConfig).

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod error;
pub mod experiment;
pub mod kernels;
pub mod linalg;
pub mod mapping;
pub mod model;
pub mod model_file;
pub mod optimizer;
pub mod synth;
pub mod task_corr;

pub use error::{Error, Result};
pub use experiment::{r_squared, run_experiment, run_trial, ExperimentPlan, Summary, TrialReport};
pub use kernels::{KernelKind, KernelSpec};
pub use mapping::{predict_map, prepare_cube, MapOptions};
pub use model::{
    assemble_sigma, fit, negative_log_marginal_likelihood, nlml_gradient, FittedModel, Method,
    ModelConfig, Observation, ObservationSet, Term,
};
pub use model_file::SavedModel;
pub use optimizer::{minimize, multi_restart_minimize, OptimizerSettings};
pub use synth::SyntheticSpec;
pub use task_corr::TaskCorrMatrix;

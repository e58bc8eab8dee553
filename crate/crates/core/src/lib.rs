//! Sparse additive Gaussian process regression on recursively partitioned domains.
//!
//! The input domain `[0,1]^d` is split into nested layers of boxes. Each box
//! hosts a sparse Gaussian process anchored at a few training points, and the
//! response is modelled as the sum of all components whose box contains it.
//! Fitting is by a back-fitting Markov chain Monte Carlo sampler.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod data;
pub mod error;
pub mod inference;
pub mod linalg;
pub mod model;
pub mod partition;
pub mod persist;
pub mod rng;
pub mod sampler;
pub mod sgp;
pub mod simulate;

pub use config::RunConfig;
pub use data::{load_csv, Dataset, RawTable, Transform};
pub use error::{ErrorKind, Result, SagpError};
pub use inference::{
    complexity_estimate, coverage, cv_select_layers, interval_score, mean_interval_score, mse, predict, CvReport,
    PredictionResult,
};
pub use linalg::{HyperBox, KernelParams, Points};
pub use model::{Fit, FittedModel, ModelSpec};
pub use partition::{build_full_rp, Component, ComponentId, RpScheme};
pub use sampler::{run_mcmc, McmcConfig, PosteriorSamples, PriorPreset, Priors, Sampler};
pub use simulate::{generate, run_study, true_mean, SimScenario, Split, StudyConfig, StudyResult};

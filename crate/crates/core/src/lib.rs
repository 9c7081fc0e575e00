//! Average treatment effect estimation from a small unbiased dataset, with
//! variance reduced by odds-ratio control variates computed on a large
//! dataset that was subsampled on the outcome.

pub mod ate;
pub mod cli;
pub mod cvboot;
pub mod data;
pub mod error;
pub mod glm;
pub mod orest;
pub mod rng;
pub mod scenario;
pub mod simgen;

pub use ate::{ate_interaction_imputation, ate_stratified_imputation, AteEstimate, AteMethod};
pub use cvboot::{
    bootstrap_replicates, combine, estimate_gamma_v, run_cv_pipeline, CvResult, PipelineConfig, ReplicateMatrix,
};
pub use data::{load_dataset, save_dataset, CovPoint, Dataset, Sample};
pub use error::{Error, Result};
pub use orest::{or_interaction, or_kernel, or_stratified, psi_mean_log, psi_vector, OddsRatioEstimate, Scale};
pub use rng::RngStream;
pub use scenario::{run_scenario, ScenarioKind, ScenarioResult, ScenarioSpec};
pub use simgen::{default_config, simple_config, true_ate, SimConfig};

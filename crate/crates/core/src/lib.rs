//! Generalized cluster-weighted models (GCWM) and their zero-inflated Poisson
//! extension (ZI-GCWM), fitted by EM.
//!
//! A GCWM models the joint density of a response `y` and covariates `x` as a
//! finite mixture whose components pair a GLM conditional `q(y | x)` with
//! covariate marginals: multivariate Gaussian for Gaussian-role covariates,
//! multivariate log-normal for log-normal-role covariates, and independent
//! categoricals for discrete covariates.
//!
//! Module map:
//! - [`data`]: datasets, design matrices, CSV schema
//! - [`density`]: log-density kernels
//! - [`glm`]: weighted IRLS solvers
//! - [`em`]: GCWM EM, per-cluster ZIP EM and the Bernoulli-Poisson pipeline
//! - [`selection`]: information criteria, the zero-inflation LR test, classification metrics
//! - [`simgen`]: seeded simulation designs and study runner
//! - [`model_io`]: the JSON model document

pub mod data;
pub mod density;
pub mod em;
pub mod error;
pub mod glm;
pub mod model_io;
pub mod numeric;
pub mod selection;
pub mod simgen;

/// Engine version recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

pub use data::{build_design, load_csv, CovariateRole, CovariateSpec, Dataset, DesignMatrix, Schema};
pub use em::{
    estep, fit_gcwm, fit_zigcwm, fit_zip_cluster, mstep, ComponentParams, FitConfig, GcwmModel, Init, Partitioning,
    ResponseKind, Selections, StopRule, ZiConfig, ZipFit,
};
pub use model_io::ModelDocument;
pub use error::{Error, Result};
pub use glm::{Family, GlmFit};
pub use selection::{
    confusion_report, info_criteria, select_k, zero_inflation_lr_test, ConfusionReport, InfoCriteria, LrTestResult,
};
pub use simgen::{first_run_samples, generate_gcwm_study, generate_zip_study, run_study, Condition, SimDesign, StudyConfig, StudyReport};

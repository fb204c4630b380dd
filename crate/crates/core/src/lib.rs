//! Cost-effectiveness analysis for two-arm cluster randomized trials with
//! missing outcomes.
//!
//! The crate is organised along the analysis pipeline:
//!
//! - [`data`]: trial datasets, CSV ingestion and preprocessing filters.
//! - [`quadrature`]: Gauss-Hermite rules.
//! - [`glmm`]: per-arm bivariate cost/QALY random-effects models fitted by
//!   quadrature-based maximum likelihood.
//! - [`impute`]: single-level and multilevel multivariate-Normal Gibbs
//!   imputation of missing outcomes.
//! - [`pool`]: Rubin's rules.
//! - [`cea`]: increments and incremental net benefit.
//! - [`analysis`]: the impute, fit, pool and report chain for one strategy.
//! - [`diagnostics`]: missingness screening and complete-case analysis.
//! - [`sim`]: synthetic trial generator with known truth.

pub mod analysis;
pub mod cea;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod glmm;
pub mod impute;
pub mod optim;
pub mod pool;
pub mod quadrature;
pub mod rng;
pub mod sim;

pub use error::{Error, Result};

/// Library version, recorded in output provenance headers.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

//! Multiple imputation of missing `(log cost, QALY)` outcomes.
//!
//! Each arm is imputed separately from a bivariate Normal linear model in
//! the auxiliary variables, optionally with correlated cluster random
//! intercepts. Parameters are drawn by Gibbs sampling (flat prior on the
//! coefficients, inverse-Wishart priors on the covariances) and completed
//! datasets are taken from widely spaced iterations after burn-in. Costs
//! are imputed on the log scale and exponentiated.

mod design;
mod gibbs;
mod spec;
mod wishart;

pub use design::{build_design, check_full_rank, Design, CLUSTER_SIZE_COLUMN, INTERCEPT};
pub use gibbs::{gibbs_run, gibbs_run_with_states, impute_single_level, impute_trial, CompletedSet, ImputerState};
pub use spec::{ArmOverride, ImputationSpec, Strategy};
pub use wishart::inverse_wishart;

//! Bivariate cost/QALY model with correlated cluster effects, fitted
//! separately in each arm.
//!
//! For cluster `i` and participant `j`:
//!
//! ```text
//! (u_i, w_i) ~ N(0, [[σ_u², ρσ_uσ_w], [ρσ_uσ_w, σ_w²]])
//! E[C_ij | u_i]               = β₁ + u_i
//! Q_ij | C_ij, u_i, w_i       ~ N(γ₁ + α C_ij + w_i, σ_q²)
//! ```
//!
//! with Normal, Lognormal or Gamma costs. The cluster effects are
//! integrated out numerically and the marginal likelihood is maximised by
//! Newton-Raphson.

mod density;
mod fit;
mod likelihood;

pub use density::{cost_loglik, cost_loglik_literal_lognormal, qaly_cond_loglik};
pub use fit::{fit_arm, ArmFit, FitOptions};
pub use likelihood::{cluster_marginal_loglik, ArmLikelihood, ClusterStats, CostModel, Integration};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of free parameters on the unconstrained scale.
pub const N_PARAMS: usize = 8;

/// Positions in the unconstrained parameter vector
/// `(β₁, γ₁, α, log σ_q², log dispersion, log σ_u², log σ_w², atanh ρ)`.
pub mod idx {
    pub const BETA: usize = 0;
    pub const GAMMA: usize = 1;
    pub const ALPHA: usize = 2;
    pub const LOG_SIGMA_Q: usize = 3;
    pub const LOG_DISP: usize = 4;
    pub const LOG_SIGMA_U: usize = 5;
    pub const LOG_SIGMA_W: usize = 6;
    pub const ATANH_RHO: usize = 7;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CostKind {
    Normal,
    Lognormal,
    Gamma,
}

impl CostKind {
    pub const ALL: [CostKind; 3] = [CostKind::Normal, CostKind::Lognormal, CostKind::Gamma];

    pub fn name(self) -> &'static str {
        match self {
            CostKind::Normal => "normal",
            CostKind::Lognormal => "lognormal",
            CostKind::Gamma => "gamma",
        }
    }

    /// Short label used in result tables (N-N, L-N, G-N).
    pub fn label(self) -> &'static str {
        match self {
            CostKind::Normal => "N-N",
            CostKind::Lognormal => "L-N",
            CostKind::Gamma => "G-N",
        }
    }

    pub fn positive_support(self) -> bool {
        !matches!(self, CostKind::Normal)
    }
}

impl fmt::Display for CostKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CostKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "normal" | "n-n" => Ok(CostKind::Normal),
            "lognormal" | "l-n" => Ok(CostKind::Lognormal),
            "gamma" | "g-n" => Ok(CostKind::Gamma),
            other => Err(Error::InvalidArgument(format!("unknown cost distribution `{other}`"))),
        }
    }
}

/// Cost distribution given the cluster effect.
///
/// `dispersion` is the variance `σ_c²` for Normal costs, the shape `η` for
/// Gamma costs (so `CV = 1/√η`) and the squared coefficient of variation
/// `η` for Lognormal costs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostDistribution {
    pub kind: CostKind,
    pub dispersion: f64,
}

impl CostDistribution {
    /// Conditional variance of a cost with mean `mu`.
    pub fn conditional_variance(&self, mu: f64) -> f64 {
        match self.kind {
            CostKind::Normal => self.dispersion,
            CostKind::Gamma => mu * mu / self.dispersion,
            CostKind::Lognormal => mu * mu * self.dispersion,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClusterEffectCov {
    pub sigma_u_sq: f64,
    pub sigma_w_sq: f64,
    pub rho: f64,
}

impl ClusterEffectCov {
    pub fn validate(&self) -> Result<()> {
        let ok = self.sigma_u_sq.is_finite()
            && self.sigma_w_sq.is_finite()
            && self.sigma_u_sq >= 0.0
            && self.sigma_w_sq >= 0.0
            && self.rho.abs() <= 1.0;
        if ok {
            Ok(())
        } else {
            Err(Error::NotPositiveDefinite {
                context: format!(
                    "cluster-effect covariance (σ_u²={}, σ_w²={}, ρ={})",
                    self.sigma_u_sq, self.sigma_w_sq, self.rho
                ),
                iteration: None,
            })
        }
    }

    pub fn covariance(&self) -> f64 {
        self.rho * (self.sigma_u_sq * self.sigma_w_sq).sqrt()
    }

    /// Lower Cholesky factor `[[l00, 0], [l10, l11]]`.
    pub fn cholesky(&self) -> [f64; 3] {
        let su = self.sigma_u_sq.sqrt();
        let sw = self.sigma_w_sq.sqrt();
        [su, self.rho * sw, sw * (1.0 - self.rho * self.rho).max(0.0).sqrt()]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArmParams {
    pub beta1: f64,
    pub gamma1: f64,
    pub alpha: f64,
    pub sigma_q_sq: f64,
    pub cost_dist: CostDistribution,
    pub cluster_cov: ClusterEffectCov,
}

impl ArmParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_q_sq.is_finite() && self.sigma_q_sq > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "QALY variance must be positive, got {}",
                self.sigma_q_sq
            )));
        }
        if !(self.cost_dist.dispersion.is_finite() && self.cost_dist.dispersion > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "cost dispersion must be positive, got {}",
                self.cost_dist.dispersion
            )));
        }
        if !(self.beta1.is_finite() && self.gamma1.is_finite() && self.alpha.is_finite()) {
            return Err(Error::InvalidArgument("non-finite location parameter".into()));
        }
        if self.cost_dist.kind.positive_support() && self.beta1 <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "mean cost must be positive for {} costs, got {}",
                self.cost_dist.kind, self.beta1
            )));
        }
        self.cluster_cov.validate()
    }

    pub fn mean_cost(&self) -> f64 {
        self.beta1
    }

    pub fn mean_qaly(&self) -> f64 {
        self.gamma1 + self.alpha * self.beta1
    }

    /// Unconditional variance of an individual cost.
    pub fn cost_variance(&self) -> f64 {
        let su2 = self.cluster_cov.sigma_u_sq;
        let within = match self.cost_dist.kind {
            CostKind::Normal => self.cost_dist.dispersion,
            CostKind::Gamma => (self.beta1 * self.beta1 + su2) / self.cost_dist.dispersion,
            CostKind::Lognormal => (self.beta1 * self.beta1 + su2) * self.cost_dist.dispersion,
        };
        su2 + within
    }

    /// Individual-level cost–QALY correlation implied by the parameters.
    pub fn implied_correlation(&self) -> f64 {
        let vc = self.cost_variance();
        let cuw = self.cluster_cov.covariance();
        let cov = self.alpha * vc + cuw;
        let vq = self.alpha * self.alpha * vc
            + self.cluster_cov.sigma_w_sq
            + 2.0 * self.alpha * cuw
            + self.sigma_q_sq;
        cov / (vc * vq).sqrt()
    }

    /// Intra-cluster correlation of costs.
    pub fn cost_icc(&self) -> f64 {
        self.cluster_cov.sigma_u_sq / self.cost_variance()
    }

    /// Map to the unconstrained vector (see [`idx`]).
    pub fn to_unconstrained(&self) -> [f64; N_PARAMS] {
        [
            self.beta1,
            self.gamma1,
            self.alpha,
            self.sigma_q_sq.ln(),
            self.cost_dist.dispersion.ln(),
            self.cluster_cov.sigma_u_sq.ln(),
            self.cluster_cov.sigma_w_sq.ln(),
            self.cluster_cov.rho.atanh(),
        ]
    }

    pub fn from_unconstrained(theta: &[f64], kind: CostKind) -> Self {
        ArmParams {
            beta1: theta[idx::BETA],
            gamma1: theta[idx::GAMMA],
            alpha: theta[idx::ALPHA],
            sigma_q_sq: theta[idx::LOG_SIGMA_Q].exp(),
            cost_dist: CostDistribution {
                kind,
                dispersion: theta[idx::LOG_DISP].exp(),
            },
            cluster_cov: ClusterEffectCov {
                sigma_u_sq: theta[idx::LOG_SIGMA_U].exp(),
                sigma_w_sq: theta[idx::LOG_SIGMA_W].exp(),
                rho: theta[idx::ATANH_RHO].tanh(),
            },
        }
    }
}

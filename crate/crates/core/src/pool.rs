//! Rubin's rules for combining estimates from multiply imputed datasets.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Estimate and covariance from one completed dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimateDraw {
    pub estimate: Vec<f64>,
    pub covariance: DMatrix<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum DfMethod {
    /// `ν = (K−1)(1 + W/((1+1/K)B))²`.
    #[default]
    Rubin,
    /// Small-sample adjustment with the given complete-data degrees of
    /// freedom.
    BarnardRubin { complete_df: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct PooledEstimate {
    pub point: Vec<f64>,
    pub total_cov: DMatrix<f64>,
    pub within: DMatrix<f64>,
    pub between: DMatrix<f64>,
    /// Per-component degrees of freedom; `f64::INFINITY` when the
    /// between-imputation variance is zero.
    pub df: Vec<f64>,
    pub k: usize,
    pub df_method: DfMethod,
}

impl PooledEstimate {
    /// Total variance of `c'θ`.
    pub fn linear_variance(&self, c: &[f64]) -> f64 {
        quad_form(&self.total_cov, c)
    }

    /// Degrees of freedom for the linear combination `c'θ`.
    pub fn linear_df(&self, c: &[f64]) -> f64 {
        df_for(quad_form(&self.within, c), quad_form(&self.between, c), self.k, self.df_method)
    }
}

fn quad_form(m: &DMatrix<f64>, c: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..c.len() {
        for j in 0..c.len() {
            s += c[i] * m[(i, j)] * c[j];
        }
    }
    s
}

fn df_for(w: f64, b: f64, k: usize, method: DfMethod) -> f64 {
    let kf = k as f64;
    let rubin = if b > 0.0 {
        (kf - 1.0) * (1.0 + w / ((1.0 + 1.0 / kf) * b)).powi(2)
    } else {
        f64::INFINITY
    };
    match method {
        DfMethod::Rubin => rubin,
        DfMethod::BarnardRubin { complete_df } => {
            let t = w + (1.0 + 1.0 / kf) * b;
            let gamma = if t > 0.0 { (1.0 + 1.0 / kf) * b / t } else { 0.0 };
            let obs = (complete_df + 1.0) / (complete_df + 3.0) * complete_df * (1.0 - gamma);
            1.0 / (1.0 / rubin + 1.0 / obs)
        }
    }
}

/// Combine `K ≥ 2` draws.
pub fn pool(draws: &[EstimateDraw], method: DfMethod) -> Result<PooledEstimate> {
    let k = draws.len();
    if k < 2 {
        return Err(Error::InvalidArgument(format!("pooling needs at least 2 draws, got {k}")));
    }
    let p = draws[0].estimate.len();
    for (i, d) in draws.iter().enumerate() {
        if d.estimate.len() != p || d.covariance.nrows() != p || d.covariance.ncols() != p {
            return Err(Error::InvalidArgument(format!(
                "draw {} has dimension {} with a {}x{} covariance, expected {p}",
                i + 1,
                d.estimate.len(),
                d.covariance.nrows(),
                d.covariance.ncols()
            )));
        }
    }
    if let DfMethod::BarnardRubin { complete_df } = method {
        if !(complete_df > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "complete-data degrees of freedom must be positive, got {complete_df}"
            )));
        }
    }
    let kf = k as f64;
    let point: Vec<f64> = (0..p)
        .map(|j| draws.iter().map(|d| d.estimate[j]).sum::<f64>() / kf)
        .collect();
    let mut within = DMatrix::zeros(p, p);
    for d in draws {
        within += &d.covariance;
    }
    within /= kf;
    let between = DMatrix::from_fn(p, p, |i, j| {
        draws
            .iter()
            .map(|d| (d.estimate[i] - point[i]) * (d.estimate[j] - point[j]))
            .sum::<f64>()
            / (kf - 1.0)
    });
    let total_cov = &within + &between * (1.0 + 1.0 / kf);
    let df = (0..p)
        .map(|j| df_for(within[(j, j)], between[(j, j)], k, method))
        .collect();
    Ok(PooledEstimate {
        point,
        total_cov,
        within,
        between,
        df,
        k,
        df_method: method,
    })
}

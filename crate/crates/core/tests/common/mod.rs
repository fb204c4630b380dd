#![allow(dead_code)]

use clustered_cea::glmm::{ArmParams, ClusterEffectCov, CostDistribution, CostKind};
use clustered_cea::sim::{sigma_u_sq_for_icc, ArmSimConfig, ClusterSizeLaw, Missingness, SimConfig};

/// Per-arm truth with cost ICC `icc`. Skewed costs have CV 0.5; Normal
/// costs have the same conditional variance at the mean.
pub fn params(kind: CostKind, beta1: f64, icc: f64) -> ArmParams {
    let dispersion = match kind {
        CostKind::Gamma => 4.0,
        CostKind::Lognormal => 0.25,
        CostKind::Normal => 0.25 * beta1 * beta1,
    };
    let cost_dist = CostDistribution { kind, dispersion };
    ArmParams {
        beta1,
        gamma1: 0.02,
        alpha: 1e-5,
        sigma_q_sq: 1e-4,
        cost_dist,
        cluster_cov: ClusterEffectCov {
            sigma_u_sq: sigma_u_sq_for_icc(icc, &cost_dist, beta1).unwrap(),
            sigma_w_sq: 4.17e-6,
            rho: 0.2,
        },
    }
}

pub fn arm(clusters: usize, cluster_size: ClusterSizeLaw, params: ArmParams, cost_missing: Missingness) -> ArmSimConfig {
    ArmSimConfig {
        clusters,
        cluster_size,
        params,
        cost_missing,
        qaly_missing: Missingness::None,
    }
}

pub fn trial(seed: u64, control: ArmSimConfig, intervention: ArmSimConfig) -> SimConfig {
    SimConfig {
        seed,
        covariates: Vec::new(),
        control,
        intervention,
    }
}

/// Mean and Monte-Carlo standard error of the mean.
pub fn mean_mcse(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, (v / n).sqrt())
}

//! Conditional densities of the bivariate cost/QALY model.

use std::f64::consts::PI;

use statrs::function::gamma::ln_gamma;

use super::{CostDistribution, CostKind};
use crate::error::{Error, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Log density of a cost `c` given its conditional mean `mu_c`.
///
/// - Gamma: shape `η`, rate `η / μ`.
/// - Lognormal: `log C ~ N(log μ − ½ log(1+η), log(1+η))`, so that
///   `E[C] = μ` and `CV² = η`.
/// - Normal: mean `μ`, variance `σ_c²`.
///
/// Returns `-inf` for a cost outside the support; invalid parameters are an
/// error.
pub fn cost_loglik(c: f64, mu_c: f64, dist: &CostDistribution) -> Result<f64> {
    let disp = dist.dispersion;
    if !(disp.is_finite() && disp > 0.0) {
        return Err(Error::Evaluation(format!("dispersion must be positive, got {disp}")));
    }
    if !c.is_finite() || !mu_c.is_finite() {
        return Err(Error::Evaluation("non-finite cost or mean".into()));
    }
    match dist.kind {
        CostKind::Normal => Ok(-0.5 * (LN_2PI + disp.ln()) - (c - mu_c).powi(2) / (2.0 * disp)),
        CostKind::Gamma => {
            if mu_c <= 0.0 {
                return Err(Error::Evaluation(format!("Gamma mean must be positive, got {mu_c}")));
            }
            if c <= 0.0 {
                return Ok(f64::NEG_INFINITY);
            }
            let eta = disp;
            Ok(eta * (eta / mu_c).ln() - ln_gamma(eta) + (eta - 1.0) * c.ln() - eta * c / mu_c)
        }
        CostKind::Lognormal => {
            if mu_c <= 0.0 {
                return Err(Error::Evaluation(format!(
                    "Lognormal mean must be positive, got {mu_c}"
                )));
            }
            if c <= 0.0 {
                return Ok(f64::NEG_INFINITY);
            }
            let s2 = disp.ln_1p();
            let loc = mu_c.ln() - 0.5 * s2;
            Ok(lognormal_log_pdf(c, loc, s2))
        }
    }
}

/// Lognormal density with `μ` used directly as the log-scale location:
/// `log C ~ N(μ, log(1+η))`.
pub fn cost_loglik_literal_lognormal(c: f64, location: f64, eta: f64) -> Result<f64> {
    if !(eta.is_finite() && eta > 0.0) {
        return Err(Error::Evaluation(format!("dispersion must be positive, got {eta}")));
    }
    if !c.is_finite() || !location.is_finite() {
        return Err(Error::Evaluation("non-finite cost or location".into()));
    }
    if c <= 0.0 {
        return Ok(f64::NEG_INFINITY);
    }
    Ok(lognormal_log_pdf(c, location, eta.ln_1p()))
}

fn lognormal_log_pdf(c: f64, loc: f64, s2: f64) -> f64 {
    let lc = c.ln();
    -lc - 0.5 * (2.0 * PI * s2).ln() - (lc - loc).powi(2) / (2.0 * s2)
}

/// Normal log density of `q` with mean `γ₁ + α c + w` and variance `σ_q²`.
pub fn qaly_cond_loglik(q: f64, c: f64, gamma1: f64, alpha: f64, sigma_q_sq: f64, w: f64) -> Result<f64> {
    if !(sigma_q_sq.is_finite() && sigma_q_sq > 0.0) {
        return Err(Error::Evaluation(format!(
            "QALY variance must be positive, got {sigma_q_sq}"
        )));
    }
    let mean = gamma1 + alpha * c + w;
    Ok(-0.5 * (LN_2PI + sigma_q_sq.ln()) - (q - mean).powi(2) / (2.0 * sigma_q_sq))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from;
    use rand_distr::{Distribution, StandardNormal};

    fn dist(kind: CostKind, dispersion: f64) -> CostDistribution {
        CostDistribution { kind, dispersion }
    }

    #[test]
    fn gamma_exponential_case() {
        let v = cost_loglik(1.0, 1.0, &dist(CostKind::Gamma, 1.0)).unwrap();
        assert!((v + 1.0).abs() < 1e-14);
    }

    #[test]
    fn gamma_direct_evaluation() {
        // f(2) = 2²/Γ(2) · 2^{1} · e^{-4} = 8 e^{-4}
        let v = cost_loglik(2.0, 1.0, &dist(CostKind::Gamma, 2.0)).unwrap();
        assert!((v - (8f64.ln() - 4.0)).abs() < 1e-13);
        assert!((v + 1.9206).abs() < 1e-4);
    }

    #[test]
    fn support_and_parameter_errors() {
        assert_eq!(cost_loglik(0.0, 1.0, &dist(CostKind::Gamma, 2.0)).unwrap(), f64::NEG_INFINITY);
        assert_eq!(cost_loglik(-1.0, 1.0, &dist(CostKind::Lognormal, 2.0)).unwrap(), f64::NEG_INFINITY);
        assert!(cost_loglik(1.0, -1.0, &dist(CostKind::Gamma, 2.0)).is_err());
        assert!(cost_loglik(1.0, 1.0, &dist(CostKind::Normal, 0.0)).is_err());
        assert!(cost_loglik(-3.0, 1.0, &dist(CostKind::Normal, 1.0)).unwrap().is_finite());
    }

    #[test]
    fn lognormal_mean_targeting_monte_carlo() {
        // log C ~ N(m, s²) sampled directly; the density is checked to be
        // the one being sampled, and the sample mean to be μ.
        let (mu, eta) = (100.0f64, 0.5f64);
        let s2 = f64::ln_1p(eta);
        let m = mu.ln() - 0.5 * s2;
        let mut rng = rng_from(11, 0);
        let n = 1_000_000;
        let mut sum = 0.0;
        let mut sum2 = 0.0;
        for _ in 0..n {
            let z: f64 = StandardNormal.sample(&mut rng);
            let c = (m + s2.sqrt() * z).exp();
            sum += c;
            sum2 += c * c;
        }
        let mean = sum / n as f64;
        let var = sum2 / n as f64 - mean * mean;
        let se = (var / n as f64).sqrt();
        assert!((mean - mu).abs() < 3.0 * se, "mean {mean} se {se}");
        // density integrates to one and has mean μ (trapezoid on log scale)
        let (mut mass, mut first) = (0.0, 0.0);
        let h = 1e-3;
        let mut t = m - 12.0 * s2.sqrt();
        while t < m + 12.0 * s2.sqrt() {
            let c = t.exp();
            let f = cost_loglik(c, mu, &dist(CostKind::Lognormal, eta)).unwrap().exp() * c;
            mass += f * h;
            first += f * c * h;
            t += h;
        }
        assert!((mass - 1.0).abs() < 1e-6);
        assert!((first - mu).abs() < 1e-4 * mu);
    }

    #[test]
    fn qaly_density_values() {
        let v = qaly_cond_loglik(0.3, 2.0, 0.1, 0.05, 0.04, 0.1).unwrap();
        assert!((v + 0.5 * (2.0 * PI * 0.04).ln()).abs() < 1e-14);
        let v = qaly_cond_loglik(2.0, 5.0, 0.0, 0.0, 1.0, 0.0).unwrap();
        assert!((v - (-0.5 * (2.0 * PI).ln() - 2.0)).abs() < 1e-14);
        // reference Normal log-pdf coded independently
        let (q, c, g, a, w, s2) = (0.325f64, 300.0f64, 0.02, 0.001, 0.005, 0.01f64);
        let mean = g + a * c + w;
        let reference = ((-(q - mean) * (q - mean) / (2.0 * s2)).exp() / (2.0 * PI * s2).sqrt()).ln();
        let v = qaly_cond_loglik(q, c, g, a, s2, w).unwrap();
        assert!((v - reference).abs() < 1e-12);
        assert!(qaly_cond_loglik(0.0, 0.0, 0.0, 0.0, 0.0, 0.0).is_err());
    }
}

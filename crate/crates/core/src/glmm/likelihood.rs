//! Marginal log-likelihood of one arm.
//!
//! Each cluster contributes `log ∫∫ Π_j f(c_j | u) f(q_j | c_j, w) φ(u, w) du dw`.
//! The cluster's data enter only through a handful of sums, so every
//! quadrature node costs O(1) regardless of cluster size.

use std::f64::consts::{PI, SQRT_2};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::{digamma, ln_gamma};

use super::{idx, ArmParams, CostKind, N_PARAMS};
use crate::data::TrialDataset;
use crate::error::{Error, Result};
use crate::optim::{fd_gradient, Objective};
use crate::quadrature::QuadratureRule;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// How the cluster effects are integrated out.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Integration {
    /// Tensor-product Gauss-Hermite over `(u, w)` after the Cholesky
    /// change of variables.
    #[default]
    TensorProduct,
    /// Tensor-product rule re-centred on each cluster's posterior mode and
    /// scaled by its curvature.
    Adaptive,
    /// Gauss-Hermite over `u` only; the QALY effect `w | u` is Normal and is
    /// integrated in closed form.
    AnalyticQaly,
}

/// Cost density used by the likelihood. `LognormalLiteral` takes the cost
/// location on the log scale directly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CostModel {
    Normal,
    Gamma,
    Lognormal,
    LognormalLiteral,
}

impl CostModel {
    pub fn new(kind: CostKind, literal_lognormal: bool) -> Self {
        match (kind, literal_lognormal) {
            (CostKind::Normal, _) => CostModel::Normal,
            (CostKind::Gamma, _) => CostModel::Gamma,
            (CostKind::Lognormal, false) => CostModel::Lognormal,
            (CostKind::Lognormal, true) => CostModel::LognormalLiteral,
        }
    }

    pub fn kind(self) -> CostKind {
        match self {
            CostModel::Normal => CostKind::Normal,
            CostModel::Gamma => CostKind::Gamma,
            CostModel::Lognormal | CostModel::LognormalLiteral => CostKind::Lognormal,
        }
    }

    fn needs_positive_cost(self) -> bool {
        !matches!(self, CostModel::Normal)
    }
}

/// Per-cluster sufficient statistics.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ClusterStats {
    pub n: f64,
    pub sum_c: f64,
    pub sum_c2: f64,
    pub sum_logc: f64,
    pub sum_logc2: f64,
    pub sum_q: f64,
    pub sum_q2: f64,
    pub sum_cq: f64,
    pub min_c: f64,
}

impl ClusterStats {
    /// From complete `(cost, qaly)` rows.
    pub fn from_rows(rows: &[(f64, f64)]) -> Self {
        let mut s = ClusterStats {
            min_c: f64::INFINITY,
            ..Default::default()
        };
        for &(c, q) in rows {
            s.n += 1.0;
            s.sum_c += c;
            s.sum_c2 += c * c;
            if c > 0.0 {
                let lc = c.ln();
                s.sum_logc += lc;
                s.sum_logc2 += lc * lc;
            }
            s.sum_q += q;
            s.sum_q2 += q * q;
            s.sum_cq += c * q;
            s.min_c = s.min_c.min(c);
        }
        s
    }
}

/// Natural-scale parameters used inside the integrals.
#[derive(Debug, Clone, Copy)]
struct Natural {
    beta: f64,
    gamma: f64,
    alpha: f64,
    sq2: f64,
    disp: f64,
    su: f64,
    sw: f64,
    rho: f64,
}

impl Natural {
    fn from_theta(t: &[f64]) -> Self {
        Natural {
            beta: t[idx::BETA],
            gamma: t[idx::GAMMA],
            alpha: t[idx::ALPHA],
            sq2: t[idx::LOG_SIGMA_Q].exp(),
            disp: t[idx::LOG_DISP].exp(),
            su: (0.5 * t[idx::LOG_SIGMA_U]).exp(),
            sw: (0.5 * t[idx::LOG_SIGMA_W]).exp(),
            rho: t[idx::ATANH_RHO].tanh(),
        }
    }

    fn from_params(p: &ArmParams) -> Self {
        Natural {
            beta: p.beta1,
            gamma: p.gamma1,
            alpha: p.alpha,
            sq2: p.sigma_q_sq,
            disp: p.cost_dist.dispersion,
            su: p.cluster_cov.sigma_u_sq.sqrt(),
            sw: p.cluster_cov.sigma_w_sq.sqrt(),
            rho: p.cluster_cov.rho,
        }
    }
}

/// Quantities that depend on the parameters but not on the cluster.
#[derive(Debug, Clone, Copy)]
struct CostConst {
    model: CostModel,
    disp: f64,
    /// Gamma: η log η − lnΓ(η); Normal: −½ log(2πσ²); Lognormal: −½ log(2πs²)
    base: f64,
    /// Gamma: log η + 1 − ψ(η); Lognormal: s² = log(1+η)
    aux: f64,
}

impl CostConst {
    fn new(model: CostModel, disp: f64) -> Self {
        match model {
            CostModel::Gamma => CostConst {
                model,
                disp,
                base: disp * disp.ln() - ln_gamma(disp),
                aux: disp.ln() + 1.0 - digamma(disp),
            },
            CostModel::Normal => CostConst {
                model,
                disp,
                base: -0.5 * (LN_2PI + disp.ln()),
                aux: 0.0,
            },
            CostModel::Lognormal | CostModel::LognormalLiteral => {
                let s2 = disp.ln_1p();
                CostConst {
                    model,
                    disp,
                    base: -0.5 * (LN_2PI + s2.ln()),
                    aux: s2,
                }
            }
        }
    }
}

/// Cluster cost term at conditional mean `mu`: value, d/dμ, d/d log(disp),
/// d²/dμ². `None` when `mu` is outside the parameter space.
#[inline]
fn cost_term(k: &CostConst, s: &ClusterStats, mu: f64) -> Option<(f64, f64, f64, f64)> {
    let n = s.n;
    match k.model {
        CostModel::Gamma => {
            if mu <= 0.0 {
                return None;
            }
            let eta = k.disp;
            let lm = mu.ln();
            let inv = 1.0 / mu;
            let v = n * k.base + (eta - 1.0) * s.sum_logc - n * eta * lm - eta * s.sum_c * inv;
            let dmu = eta * (s.sum_c * inv - n) * inv;
            let deta = n * k.aux + s.sum_logc - n * lm - s.sum_c * inv;
            let d2 = eta * (n - 2.0 * s.sum_c * inv) * inv * inv;
            Some((v, dmu, eta * deta, d2))
        }
        CostModel::Normal => {
            let v2 = k.disp;
            let quad = s.sum_c2 - 2.0 * mu * s.sum_c + n * mu * mu;
            let v = n * k.base - quad / (2.0 * v2);
            let dmu = (s.sum_c - n * mu) / v2;
            let dld = -0.5 * n + quad / (2.0 * v2);
            Some((v, dmu, dld, -n / v2))
        }
        CostModel::Lognormal | CostModel::LognormalLiteral => {
            let s2 = k.aux;
            let literal = k.model == CostModel::LognormalLiteral;
            let m = if literal {
                mu
            } else {
                if mu <= 0.0 {
                    return None;
                }
                mu.ln() - 0.5 * s2
            };
            let quad = s.sum_logc2 - 2.0 * m * s.sum_logc + n * m * m;
            let v = n * k.base - s.sum_logc - quad / (2.0 * s2);
            let dm = (s.sum_logc - n * m) / s2;
            let mut ds2 = -0.5 * n / s2 + quad / (2.0 * s2 * s2);
            let (dmu, d2) = if literal {
                (dm, -n / s2)
            } else {
                ds2 -= 0.5 * dm;
                (dm / mu, -(n / s2 + dm) / (mu * mu))
            };
            let eta = k.disp;
            Some((v, dmu, ds2 * eta / (1.0 + eta), d2))
        }
    }
}

/// QALY residual sums `S1 = Σ r`, `S2 = Σ r²`, `Scr = Σ c r` for
/// `r = q − γ₁ − α c`.
#[inline]
fn residual_sums(s: &ClusterStats, gamma: f64, alpha: f64) -> (f64, f64, f64) {
    let n = s.n;
    let s1 = s.sum_q - n * gamma - alpha * s.sum_c;
    let s2 = s.sum_q2 - 2.0 * gamma * s.sum_q - 2.0 * alpha * s.sum_cq
        + n * gamma * gamma
        + 2.0 * gamma * alpha * s.sum_c
        + alpha * alpha * s.sum_c2;
    let scr = s.sum_cq - gamma * s.sum_c - alpha * s.sum_c2;
    (s1, s2.max(0.0), scr)
}

pub struct ArmLikelihood {
    clusters: Vec<ClusterStats>,
    model: CostModel,
    rule: QuadratureRule,
    integration: Integration,
    /// `√2 x` for each node
    z: Vec<f64>,
    /// `log(w / √π)` for each node
    lw: Vec<f64>,
    /// `log w + x²` for adaptive rules
    lw_adapt: Vec<f64>,
}

impl ArmLikelihood {
    pub fn new(clusters: Vec<ClusterStats>, model: CostModel, rule: QuadratureRule, integration: Integration) -> Self {
        let z = rule.nodes().iter().map(|x| SQRT_2 * x).collect();
        let lw = rule.weights().iter().map(|w| (w / PI.sqrt()).ln()).collect();
        let lw_adapt = rule
            .nodes()
            .iter()
            .zip(rule.weights())
            .map(|(x, w)| w.ln() + x * x)
            .collect();
        Self {
            clusters,
            model,
            rule,
            integration,
            z,
            lw,
            lw_adapt,
        }
    }

    /// Build from a one-arm dataset whose rows are all complete.
    pub fn from_dataset(d: &TrialDataset, model: CostModel, rule: QuadratureRule, integration: Integration) -> Result<Self> {
        let mut clusters = Vec::new();
        for (id, rows) in d.rows_by_cluster() {
            let mut pairs = Vec::with_capacity(rows.len());
            for r in rows {
                let p = &d.participants()[r];
                match (p.cost, p.qaly) {
                    (Some(c), Some(q)) => pairs.push((c, q)),
                    _ => {
                        return Err(Error::InvalidArgument(format!(
                            "cluster `{id}` has an incomplete row; fit complete or completed data"
                        )))
                    }
                }
            }
            clusters.push(ClusterStats::from_rows(&pairs));
        }
        Ok(Self::new(clusters, model, rule, integration))
    }

    pub fn clusters(&self) -> &[ClusterStats] {
        &self.clusters
    }

    pub fn model(&self) -> CostModel {
        self.model
    }

    pub fn rule(&self) -> &QuadratureRule {
        &self.rule
    }

    pub fn integration(&self) -> Integration {
        self.integration
    }

    fn support_ok(&self) -> bool {
        !self.model.needs_positive_cost() || self.clusters.iter().all(|s| s.min_c > 0.0)
    }

    /// Total log-likelihood at natural-scale parameters.
    pub fn loglik(&self, params: &ArmParams) -> Result<f64> {
        params.validate()?;
        if !self.support_ok() {
            return Ok(f64::NEG_INFINITY);
        }
        let nat = Natural::from_params(params);
        let k = CostConst::new(self.model, nat.disp);
        Ok(self
            .cluster_values(&nat, &k)
            .iter()
            .sum())
    }

    fn cluster_values(&self, nat: &Natural, k: &CostConst) -> Vec<f64> {
        self.clusters
            .par_iter()
            .map(|s| match self.integration {
                Integration::TensorProduct => self.tensor(s, nat, k, None),
                Integration::AnalyticQaly => self.collapsed(s, nat, k, None),
                Integration::Adaptive => self.adaptive(s, nat, k),
            })
            .collect()
    }

    fn theta_value(&self, theta: &[f64]) -> f64 {
        if !self.support_ok() || theta.iter().any(|v| !v.is_finite()) {
            return f64::NEG_INFINITY;
        }
        let nat = Natural::from_theta(theta);
        let k = CostConst::new(self.model, nat.disp);
        self.cluster_values(&nat, &k).iter().sum()
    }

    fn theta_value_and_gradient(&self, theta: &[f64]) -> (f64, Vec<f64>) {
        if self.integration == Integration::Adaptive {
            let v = self.theta_value(theta);
            let g = fd_gradient(|t| self.theta_value(t), theta, 1e-5);
            return (v, g);
        }
        if !self.support_ok() || theta.iter().any(|v| !v.is_finite()) {
            return (f64::NEG_INFINITY, vec![0.0; N_PARAMS]);
        }
        let nat = Natural::from_theta(theta);
        let k = CostConst::new(self.model, nat.disp);
        let parts: Vec<(f64, [f64; N_PARAMS])> = self
            .clusters
            .par_iter()
            .map(|s| {
                let mut g = [0.0; N_PARAMS];
                let v = match self.integration {
                    Integration::TensorProduct => self.tensor(s, &nat, &k, Some(&mut g)),
                    _ => self.collapsed(s, &nat, &k, Some(&mut g)),
                };
                (v, g)
            })
            .collect();
        let mut total = 0.0;
        let mut grad = vec![0.0; N_PARAMS];
        for (v, g) in parts {
            total += v;
            for (a, b) in grad.iter_mut().zip(g) {
                *a += b;
            }
        }
        (total, grad)
    }

    /// Tensor-product Gauss-Hermite for one cluster.
    fn tensor(&self, s: &ClusterStats, p: &Natural, k: &CostConst, grad: Option<&mut [f64; N_PARAMS]>) -> f64 {
        let m = self.z.len();
        let n = s.n;
        let (s1, s2, scr) = residual_sums(s, p.gamma, p.alpha);
        let sr = (1.0 - p.rho * p.rho).max(0.0).sqrt();
        let qbase = -0.5 * n * (LN_2PI + p.sq2.ln());
        let inv2s = 0.5 / p.sq2;

        // per u-node cost terms
        let mut cost = Vec::with_capacity(m);
        for a in 0..m {
            let u = p.su * self.z[a];
            cost.push(cost_term(k, s, p.beta + u));
        }

        let mut buf = vec![f64::NEG_INFINITY; m * m];
        let mut lmax = f64::NEG_INFINITY;
        for a in 0..m {
            let Some((ca, ..)) = cost[a] else { continue };
            let base = self.lw[a] + ca + qbase;
            let wa = p.sw * p.rho * self.z[a];
            let row = &mut buf[a * m..(a + 1) * m];
            for b in 0..m {
                let w = wa + p.sw * sr * self.z[b];
                let l = base + self.lw[b] - (s2 - 2.0 * w * s1 + n * w * w) * inv2s;
                row[b] = l;
                if l > lmax {
                    lmax = l;
                }
            }
        }
        if !lmax.is_finite() {
            return f64::NEG_INFINITY;
        }

        let Some(g) = grad else {
            let total: f64 = buf.iter().map(|l| (l - lmax).exp()).sum();
            return lmax + total.ln();
        };

        let (mut tot, mut e_dmu, mut e_dmu_u, mut e_dld) = (0.0, 0.0, 0.0, 0.0);
        let (mut ew, mut ew2, mut ez1, mut ez2, mut ewz1, mut ewz2) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
        for a in 0..m {
            let Some((_, dmu, dld, _)) = cost[a] else { continue };
            let z1 = self.z[a];
            let wa = p.sw * p.rho * z1;
            let row = &buf[a * m..(a + 1) * m];
            let (mut pa, mut pw, mut pw2, mut pz2, mut pz2w) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for b in 0..m {
                let pr = (row[b] - lmax).exp();
                let z2 = self.z[b];
                let w = wa + p.sw * sr * z2;
                pa += pr;
                pw += pr * w;
                pw2 += pr * w * w;
                pz2 += pr * z2;
                pz2w += pr * z2 * w;
            }
            let u = p.su * z1;
            tot += pa;
            e_dmu += pa * dmu;
            e_dmu_u += pa * dmu * u;
            e_dld += pa * dld;
            ew += pw;
            ew2 += pw2;
            ez1 += pa * z1;
            ewz1 += pw * z1;
            ez2 += pz2;
            ewz2 += pz2w;
        }
        let inv = 1.0 / tot;
        let (e_dmu, e_dmu_u, e_dld) = (e_dmu * inv, e_dmu_u * inv, e_dld * inv);
        let (ew, ew2, ez1, ez2, ewz1, ewz2) = (ew * inv, ew2 * inv, ez1 * inv, ez2 * inv, ewz1 * inv, ewz2 * inv);

        g[idx::BETA] = e_dmu;
        g[idx::LOG_SIGMA_U] = 0.5 * e_dmu_u;
        g[idx::LOG_DISP] = e_dld;
        let eg = (s1 - n * ew) / p.sq2;
        g[idx::GAMMA] = eg;
        g[idx::ALPHA] = (scr - ew * s.sum_c) / p.sq2;
        g[idx::LOG_SIGMA_Q] = -0.5 * n + (s2 - 2.0 * s1 * ew + n * ew2) * inv2s;
        g[idx::LOG_SIGMA_W] = 0.5 * (s1 * ew - n * ew2) / p.sq2;
        let egz1 = (s1 * ez1 - n * ewz1) / p.sq2;
        let egz2 = (s1 * ez2 - n * ewz2) / p.sq2;
        let ratio = if sr > 0.0 { p.rho / sr } else { 0.0 };
        g[idx::ATANH_RHO] = p.sw * (1.0 - p.rho * p.rho) * (egz1 - ratio * egz2);

        lmax + tot.ln()
    }

    /// Gauss-Hermite over `u`, closed-form Normal integral over `w | u`.
    fn collapsed(&self, s: &ClusterStats, p: &Natural, k: &CostConst, grad: Option<&mut [f64; N_PARAMS]>) -> f64 {
        let m = self.z.len();
        let n = s.n;
        let (s1, s2, scr) = residual_sums(s, p.gamma, p.alpha);
        let sig2 = p.sq2;
        let one_m_r2 = 1.0 - p.rho * p.rho;
        let tau2 = p.sw * p.sw * one_m_r2;
        let dd = sig2 + n * tau2;
        let logdet = (n - 1.0) * sig2.ln() + dd.ln();

        let mut l = vec![f64::NEG_INFINITY; m];
        let mut lmax = f64::NEG_INFINITY;
        for a in 0..m {
            let mu = p.beta + p.su * self.z[a];
            let Some((ca, ..)) = cost_term(k, s, mu) else { continue };
            let mw = p.rho * p.sw * self.z[a];
            let t = s1 - n * mw;
            let aa = s2 - 2.0 * mw * s1 + n * mw * mw;
            let f = -0.5 * n * LN_2PI - 0.5 * logdet - (aa - tau2 * t * t / dd) / (2.0 * sig2);
            l[a] = self.lw[a] + ca + f;
            lmax = lmax.max(l[a]);
        }
        if !lmax.is_finite() {
            return f64::NEG_INFINITY;
        }
        let Some(g) = grad else {
            let total: f64 = l.iter().map(|v| (v - lmax).exp()).sum();
            return lmax + total.ln();
        };

        let mut tot = 0.0;
        let mut acc = [0.0; N_PARAMS];
        for a in 0..m {
            if !l[a].is_finite() {
                continue;
            }
            let z1 = self.z[a];
            let u = p.su * z1;
            let (_, dmu, dld, _) = cost_term(k, s, p.beta + u).expect("finite node");
            let mw = p.rho * p.sw * z1;
            let t = s1 - n * mw;
            let aa = s2 - 2.0 * mw * s1 + n * mw * mw;
            let f_t = tau2 * t / (dd * sig2);
            let f_a = -0.5 / sig2;
            let f_d = -0.5 / dd - tau2 * t * t / (2.0 * sig2 * dd * dd);
            let df_tau2 = t * t / (2.0 * dd * sig2) + n * f_d;
            let df_sig2 = -(n - 1.0) / (2.0 * sig2) + (aa - tau2 * t * t / dd) / (2.0 * sig2 * sig2) + f_d;
            let df_m = -n * f_t + f_a * (2.0 * n * mw - 2.0 * s1);
            let df_s1 = f_t - 2.0 * mw * f_a;
            let df_s2 = f_a;

            let pr = (l[a] - lmax).exp();
            tot += pr;
            acc[idx::BETA] += pr * dmu;
            acc[idx::LOG_SIGMA_U] += pr * dmu * 0.5 * u;
            acc[idx::LOG_DISP] += pr * dld;
            acc[idx::GAMMA] += pr * (-n * df_s1 - 2.0 * s1 * df_s2);
            acc[idx::ALPHA] += pr * (-s.sum_c * df_s1 - 2.0 * scr * df_s2);
            acc[idx::LOG_SIGMA_Q] += pr * sig2 * df_sig2;
            acc[idx::LOG_SIGMA_W] += pr * (0.5 * mw * df_m + tau2 * df_tau2);
            acc[idx::ATANH_RHO] += pr
                * one_m_r2
                * (p.sw * z1 * df_m - 2.0 * p.rho * p.sw * p.sw * df_tau2);
        }
        for (gi, ai) in g.iter_mut().zip(acc) {
            *gi = ai / tot;
        }
        lmax + tot.ln()
    }

    /// Adaptive rule: nodes centred on the mode of the integrand with
    /// spread from its curvature. Falls back to the fixed rule when the
    /// mode cannot be located.
    fn adaptive(&self, s: &ClusterStats, p: &Natural, k: &CostConst) -> f64 {
        let n = s.n;
        if p.su <= 0.0 || p.sw <= 0.0 || p.rho.abs() >= 1.0 {
            return self.tensor(s, p, k, None);
        }
        let (s1, s2, _) = residual_sums(s, p.gamma, p.alpha);
        let su2 = p.su * p.su;
        let sw2 = p.sw * p.sw;
        let c = p.rho * p.su * p.sw;
        let det = su2 * sw2 - c * c;
        if det <= 0.0 {
            return self.tensor(s, p, k, None);
        }
        let (p00, p01, p11) = (sw2 / det, -c / det, su2 / det);
        let qbase = -0.5 * n * (LN_2PI + p.sq2.ln());
        let prior_base = -LN_2PI - 0.5 * det.ln();

        let h = |u: f64, w: f64| -> Option<(f64, f64, f64, f64, f64, f64)> {
            let (cv, dmu, _, d2) = cost_term(k, s, p.beta + u)?;
            let qv = qbase - (s2 - 2.0 * w * s1 + n * w * w) / (2.0 * p.sq2);
            let pv = prior_base - 0.5 * (p00 * u * u + 2.0 * p01 * u * w + p11 * w * w);
            let gu = dmu - (p00 * u + p01 * w);
            let gw = (s1 - n * w) / p.sq2 - (p01 * u + p11 * w);
            Some((cv + qv + pv, gu, gw, d2 - p00, -p01, -n / p.sq2 - p11))
        };

        let (mut u, mut w) = (0.0, 0.0);
        let Some(mut cur) = h(u, w) else {
            return self.tensor(s, p, k, None);
        };
        for _ in 0..50 {
            let (_, gu, gw, huu, huw, hww) = cur;
            let hdet = huu * hww - huw * huw;
            let (du, dw) = if huu < 0.0 && hdet > 0.0 {
                (-(hww * gu - huw * gw) / hdet, -(-huw * gu + huu * gw) / hdet)
            } else {
                (gu * 1e-3, gw * 1e-3)
            };
            let mut t = 1.0;
            let mut moved = false;
            for _ in 0..40 {
                if let Some(next) = h(u + t * du, w + t * dw) {
                    if next.0 >= cur.0 {
                        u += t * du;
                        w += t * dw;
                        cur = next;
                        moved = true;
                        break;
                    }
                }
                t *= 0.5;
            }
            if !moved || (t * du).abs() + (t * dw).abs() < 1e-12 * (1.0 + u.abs() + w.abs()) {
                break;
            }
        }
        let (_, _, _, huu, huw, hww) = cur;
        // covariance = (-H)^{-1}
        let (a, b, d) = (-huu, -huw, -hww);
        let hdet = a * d - b * b;
        if !(a > 0.0 && hdet > 0.0) {
            return self.tensor(s, p, k, None);
        }
        let (c00, c01, c11) = (d / hdet, -b / hdet, a / hdet);
        let l00 = c00.sqrt();
        let l10 = c01 / l00;
        let l11 = (c11 - l10 * l10).max(0.0).sqrt();
        let ln_jac = (2.0 * l00 * l11).ln();

        let m = self.z.len();
        let mut buf = Vec::with_capacity(m * m);
        let mut lmax = f64::NEG_INFINITY;
        for a in 0..m {
            for b in 0..m {
                let (za, zb) = (self.z[a], self.z[b]);
                let uu = u + l00 * za;
                let ww = w + l10 * za + l11 * zb;
                let v = match h(uu, ww) {
                    Some(r) => r.0 + self.lw_adapt[a] + self.lw_adapt[b],
                    None => f64::NEG_INFINITY,
                };
                lmax = lmax.max(v);
                buf.push(v);
            }
        }
        if !lmax.is_finite() {
            return f64::NEG_INFINITY;
        }
        let total: f64 = buf.iter().map(|v| (v - lmax).exp()).sum();
        ln_jac + lmax + total.ln()
    }
}

impl Objective for ArmLikelihood {
    fn dim(&self) -> usize {
        N_PARAMS
    }

    fn value(&self, x: &[f64]) -> f64 {
        self.theta_value(x)
    }

    fn value_and_gradient(&self, x: &[f64]) -> (f64, Vec<f64>) {
        self.theta_value_and_gradient(x)
    }
}

/// Marginal log-likelihood contribution of one cluster of complete
/// `(cost, qaly)` rows, by tensor-product Gauss-Hermite.
pub fn cluster_marginal_loglik(rows: &[(f64, f64)], params: &ArmParams, rule: &QuadratureRule) -> Result<f64> {
    if rows.is_empty() {
        return Err(Error::InvalidArgument("empty cluster".into()));
    }
    params.validate()?;
    let model = CostModel::new(params.cost_dist.kind, false);
    let lik = ArmLikelihood::new(
        vec![ClusterStats::from_rows(rows)],
        model,
        rule.clone(),
        Integration::TensorProduct,
    );
    lik.loglik(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::glmm::{cost_loglik, qaly_cond_loglik, ClusterEffectCov, CostDistribution};
    use crate::quadrature::gauss_hermite;

    fn params(kind: CostKind) -> ArmParams {
        ArmParams {
            beta1: 3.0,
            gamma1: 0.4,
            alpha: 0.1,
            sigma_q_sq: 0.3,
            cost_dist: CostDistribution {
                kind,
                dispersion: match kind {
                    CostKind::Normal => 0.8,
                    CostKind::Gamma => 5.0,
                    CostKind::Lognormal => 0.2,
                },
            },
            cluster_cov: ClusterEffectCov {
                sigma_u_sq: 0.25,
                sigma_w_sq: 0.1,
                rho: 0.4,
            },
        }
    }

    const ROWS: [(f64, f64); 4] = [(2.5, 0.7), (3.1, 0.9), (4.2, 0.5), (1.9, 0.8)];

    #[test]
    fn degenerate_effects_reduce_to_product() {
        for kind in CostKind::ALL {
            let mut p = params(kind);
            p.cluster_cov = ClusterEffectCov {
                sigma_u_sq: 0.0,
                sigma_w_sq: 0.0,
                rho: 0.0,
            };
            let rule = gauss_hermite(20).unwrap();
            let v = cluster_marginal_loglik(&ROWS, &p, &rule).unwrap();
            let direct: f64 = ROWS
                .iter()
                .map(|&(c, q)| {
                    cost_loglik(c, p.beta1, &p.cost_dist).unwrap()
                        + qaly_cond_loglik(q, c, p.gamma1, p.alpha, p.sigma_q_sq, 0.0).unwrap()
                })
                .sum();
            assert!((v - direct).abs() < 1e-12, "{kind}: {v} vs {direct}");
        }
    }

    #[test]
    fn analytic_qaly_matches_tensor() {
        for kind in CostKind::ALL {
            let p = params(kind);
            let rule = gauss_hermite(40).unwrap();
            let stats = vec![ClusterStats::from_rows(&ROWS)];
            let model = CostModel::new(kind, false);
            let t = ArmLikelihood::new(stats.clone(), model, rule.clone(), Integration::TensorProduct);
            let c = ArmLikelihood::new(stats.clone(), model, rule.clone(), Integration::AnalyticQaly);
            let a = ArmLikelihood::new(stats, model, rule, Integration::Adaptive);
            let (vt, vc, va) = (t.loglik(&p).unwrap(), c.loglik(&p).unwrap(), a.loglik(&p).unwrap());
            assert!((vt - vc).abs() < 1e-9, "{kind}: {vt} vs {vc}");
            assert!((vt - va).abs() < 1e-8, "{kind}: {vt} vs {va}");
        }
    }

    #[test]
    fn non_psd_covariance_is_an_error() {
        let mut p = params(CostKind::Normal);
        p.cluster_cov.rho = 1.5;
        let rule = gauss_hermite(10).unwrap();
        assert!(matches!(
            cluster_marginal_loglik(&ROWS, &p, &rule),
            Err(Error::NotPositiveDefinite { .. })
        ));
    }

    #[test]
    fn gradients_match_finite_differences() {
        for integration in [Integration::TensorProduct, Integration::AnalyticQaly] {
            for model in [CostModel::Normal, CostModel::Gamma, CostModel::Lognormal, CostModel::LognormalLiteral] {
                let stats = vec![
                    ClusterStats::from_rows(&ROWS),
                    ClusterStats::from_rows(&[(1.2, 0.3), (2.2, 0.4)]),
                ];
                let lik = ArmLikelihood::new(stats, model, gauss_hermite(30).unwrap(), integration);
                let mut theta = params(model.kind()).to_unconstrained();
                if model == CostModel::LognormalLiteral {
                    theta[idx::BETA] = 1.0;
                }
                let (_, g) = lik.value_and_gradient(&theta);
                let fd = fd_gradient(|t| lik.value(t), &theta, 1e-6);
                for i in 0..N_PARAMS {
                    let tol = 1e-5 * (1.0 + g[i].abs());
                    assert!((g[i] - fd[i]).abs() < tol, "{integration:?} {model:?} i={i}: {} vs {}", g[i], fd[i]);
                }
            }
        }
    }
}

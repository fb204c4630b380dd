//! Maximum-likelihood fit of one arm.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::likelihood::{ArmLikelihood, ClusterStats, CostModel, Integration};
use super::{idx, ArmParams, CostKind, N_PARAMS};
use crate::data::TrialDataset;
use crate::error::{Error, Result};
use crate::optim::{fd_hessian, maximize, NewtonOptions, NewtonResult};
use crate::quadrature::gauss_hermite;

/// Log-variances below this (on the standardised scale) are treated as
/// sitting on the zero boundary.
const BOUNDARY_LOG_VAR: f64 = -15.0;
const LOG_VAR_BOUNDS: (f64, f64) = (-25.0, 12.0);
const ATANH_RHO_BOUND: f64 = 6.0;
const ATANH_RHO_BOUNDARY: f64 = 5.0;
/// Adaptive quadrature differentiates numerically, so its gradient is
/// only accurate to about this level.
const ADAPTIVE_GRAD_TOL: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitOptions {
    pub quadrature_order: usize,
    pub integration: Integration,
    pub grad_tol: f64,
    pub rel_tol: f64,
    pub max_iter: usize,
    /// Central-difference step for the observed information.
    pub hessian_step: f64,
    /// Use the log-scale location parameterisation for Lognormal costs.
    pub literal_lognormal: bool,
    /// Replaces the moment-based first start when given.
    pub start: Option<ArmParams>,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            quadrature_order: 70,
            integration: Integration::TensorProduct,
            grad_tol: 1e-6,
            rel_tol: 1e-10,
            max_iter: 200,
            hessian_step: 1e-4,
            literal_lognormal: false,
            start: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmFit {
    pub params: ArmParams,
    pub mean_cost: f64,
    pub mean_qaly: f64,
    /// Covariance of `(mean_cost, mean_qaly)`.
    pub cov_means: [[f64; 2]; 2],
    pub loglik: f64,
    pub converged: bool,
    pub correlation_cq: f64,
    pub iterations: usize,
    /// Maximised log-likelihood from each start (`None` when the start
    /// failed).
    pub start_logliks: [Option<f64>; 2],
}

impl ArmFit {
    pub fn se_cost(&self) -> f64 {
        self.cov_means[0][0].sqrt()
    }

    pub fn se_qaly(&self) -> f64 {
        self.cov_means[1][1].sqrt()
    }
}

struct Scales {
    cost: f64,
    qaly: f64,
}

fn mean_var(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 {
        v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (m, var)
}

/// One-way random-effects ANOVA moment estimates `(between, within)`.
fn anova(groups: &[Vec<f64>]) -> (f64, f64) {
    let k = groups.len() as f64;
    let n: f64 = groups.iter().map(|g| g.len() as f64).sum();
    let grand = groups.iter().flatten().sum::<f64>() / n;
    let mut ssb = 0.0;
    let mut ssw = 0.0;
    for g in groups {
        let (m, _) = mean_var(g);
        ssb += g.len() as f64 * (m - grand).powi(2);
        ssw += g.iter().map(|x| (x - m).powi(2)).sum::<f64>();
    }
    let msw = if n > k { ssw / (n - k) } else { 0.0 };
    let msb = if k > 1.0 { ssb / (k - 1.0) } else { 0.0 };
    let n0 = (n - groups.iter().map(|g| (g.len() as f64).powi(2)).sum::<f64>() / n) / (k - 1.0).max(1.0);
    let between = if n0 > 0.0 { (msb - msw) / n0 } else { 0.0 };
    let total = mean_var(&groups.iter().flatten().copied().collect::<Vec<_>>()).1;
    let within = if msw > 0.0 { msw } else { total.max(1e-8) };
    (between.max(0.01 * total.max(1e-8)), within)
}

/// Moment-based starting values on the standardised data.
fn moment_start(groups: &[Vec<(f64, f64)>], model: CostModel) -> [f64; N_PARAMS] {
    let costs: Vec<f64> = groups.iter().flatten().map(|r| r.0).collect();
    let qalys: Vec<f64> = groups.iter().flatten().map(|r| r.1).collect();
    let (mc, vc) = mean_var(&costs);
    let (mq, _) = mean_var(&qalys);
    let cov: f64 = costs.iter().zip(&qalys).map(|(c, q)| (c - mc) * (q - mq)).sum::<f64>()
        / (costs.len() as f64 - 1.0).max(1.0);
    let alpha = if vc > 0.0 { cov / vc } else { 0.0 };
    let gamma = mq - alpha * mc;

    let literal = model == CostModel::LognormalLiteral;
    let cost_groups: Vec<Vec<f64>> = groups
        .iter()
        .map(|g| g.iter().map(|r| if literal { r.0.ln() } else { r.0 }).collect())
        .collect();
    let (between_c, within_c) = anova(&cost_groups);
    let resid_groups: Vec<Vec<f64>> = groups
        .iter()
        .map(|g| g.iter().map(|(c, q)| q - gamma - alpha * c).collect())
        .collect();
    let (between_q, within_q) = anova(&resid_groups);

    let (beta, disp) = match model {
        CostModel::Normal => (mc, within_c),
        CostModel::Gamma => (mc, mc * mc / within_c),
        CostModel::Lognormal => (mc, within_c / (mc * mc)),
        CostModel::LognormalLiteral => {
            let logs: Vec<f64> = cost_groups.iter().flatten().copied().collect();
            (mean_var(&logs).0, within_c.exp_m1())
        }
    };
    [
        beta,
        gamma,
        alpha,
        within_q.ln(),
        disp.ln(),
        between_c.ln(),
        between_q.ln(),
        0.0,
    ]
}

fn perturbed_start(t: &[f64; N_PARAMS]) -> [f64; N_PARAMS] {
    let mut s = *t;
    let ln2 = std::f64::consts::LN_2;
    for i in [idx::LOG_SIGMA_Q, idx::LOG_DISP, idx::LOG_SIGMA_U, idx::LOG_SIGMA_W] {
        s[i] += ln2;
    }
    s[idx::ALPHA] *= 0.5;
    s
}

fn to_standardised(p: &ArmParams, sc: &Scales, literal: bool) -> [f64; N_PARAMS] {
    let mut t = p.to_unconstrained();
    let (lc, lq) = (sc.cost.ln(), sc.qaly.ln());
    if literal {
        t[idx::BETA] = p.beta1 - lc;
    } else {
        t[idx::BETA] = p.beta1 / sc.cost;
        t[idx::LOG_SIGMA_U] -= 2.0 * lc;
    }
    t[idx::GAMMA] = p.gamma1 / sc.qaly;
    t[idx::ALPHA] = p.alpha * sc.cost / sc.qaly;
    t[idx::LOG_SIGMA_Q] -= 2.0 * lq;
    t[idx::LOG_SIGMA_W] -= 2.0 * lq;
    if p.cost_dist.kind == CostKind::Normal {
        t[idx::LOG_DISP] -= 2.0 * lc;
    }
    for v in &mut t {
        if !v.is_finite() {
            *v = LOG_VAR_BOUNDS.0;
        }
    }
    t
}

fn from_standardised(t: &[f64], kind: CostKind, sc: &Scales, literal: bool) -> ArmParams {
    let mut p = ArmParams::from_unconstrained(t, kind);
    let (c2, q2) = (sc.cost * sc.cost, sc.qaly * sc.qaly);
    if literal {
        p.beta1 = t[idx::BETA] + sc.cost.ln();
    } else {
        p.beta1 = t[idx::BETA] * sc.cost;
        p.cluster_cov.sigma_u_sq *= c2;
    }
    p.gamma1 = t[idx::GAMMA] * sc.qaly;
    p.alpha = t[idx::ALPHA] * sc.qaly / sc.cost;
    p.sigma_q_sq *= q2;
    p.cluster_cov.sigma_w_sq *= q2;
    if kind == CostKind::Normal {
        p.cost_dist.dispersion *= c2;
    }
    p
}

/// Mean cost on the standardised scale and its gradient.
fn std_mean_cost(t: &[f64], literal: bool) -> (f64, [f64; N_PARAMS]) {
    let mut g = [0.0; N_PARAMS];
    if literal {
        let su2 = t[idx::LOG_SIGMA_U].exp();
        let eta = t[idx::LOG_DISP].exp();
        let m = (t[idx::BETA] + 0.5 * su2 + 0.5 * eta.ln_1p()).exp();
        g[idx::BETA] = m;
        g[idx::LOG_SIGMA_U] = 0.5 * m * su2;
        g[idx::LOG_DISP] = 0.5 * m * eta / (1.0 + eta);
        (m, g)
    } else {
        g[idx::BETA] = 1.0;
        (t[idx::BETA], g)
    }
}

/// Fit the bivariate random-effects model to a one-arm dataset whose rows
/// are all complete.
///
/// The data are rescaled by the sample standard deviations of cost and
/// QALY before optimisation; estimates, log-likelihood and covariances
/// are reported on the original scale.
pub fn fit_arm(d: &TrialDataset, kind: CostKind, opts: &FitOptions) -> Result<ArmFit> {
    let groups: Vec<Vec<(f64, f64)>> = d
        .rows_by_cluster()
        .into_iter()
        .map(|(id, rows)| {
            rows.into_iter()
                .map(|r| {
                    let p = &d.participants()[r];
                    match (p.cost, p.qaly) {
                        (Some(c), Some(q)) => Ok((c, q)),
                        _ => Err(Error::InvalidArgument(format!(
                            "cluster `{id}` has an incomplete row; fit complete or completed data"
                        ))),
                    }
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    fit_groups(&groups, kind, opts)
}

pub(crate) fn fit_groups(groups: &[Vec<(f64, f64)>], kind: CostKind, opts: &FitOptions) -> Result<ArmFit> {
    if groups.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "at least 2 clusters are needed to fit cluster effects, got {}",
            groups.len()
        )));
    }
    let n_rows: usize = groups.iter().map(Vec::len).sum();
    if n_rows < 2 {
        return Err(Error::InvalidArgument("at least 2 rows are needed".into()));
    }
    if kind.positive_support() && groups.iter().flatten().any(|r| r.0 <= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "{kind} costs must be strictly positive; filter zero costs first"
        )));
    }
    let model = CostModel::new(kind, opts.literal_lognormal);
    let literal = model == CostModel::LognormalLiteral;

    let costs: Vec<f64> = groups.iter().flatten().map(|r| r.0).collect();
    let qalys: Vec<f64> = groups.iter().flatten().map(|r| r.1).collect();
    let pick_scale = |v: &[f64]| {
        let (m, var) = mean_var(v);
        if var > 0.0 {
            var.sqrt()
        } else if m != 0.0 {
            m.abs()
        } else {
            1.0
        }
    };
    let scales = Scales {
        cost: pick_scale(&costs),
        qaly: pick_scale(&qalys),
    };
    let std_groups: Vec<Vec<(f64, f64)>> = groups
        .iter()
        .map(|g| g.iter().map(|(c, q)| (c / scales.cost, q / scales.qaly)).collect())
        .collect();
    let stats: Vec<ClusterStats> = std_groups.iter().map(|g| ClusterStats::from_rows(g)).collect();
    let rule = gauss_hermite(opts.quadrature_order)?;
    let lik = ArmLikelihood::new(stats, model, rule, opts.integration);

    let first = match &opts.start {
        Some(p) => to_standardised(p, &scales, literal),
        None => moment_start(&std_groups, model),
    };
    let second = perturbed_start(&first);

    let mut lower = vec![f64::NEG_INFINITY; N_PARAMS];
    let mut upper = vec![f64::INFINITY; N_PARAMS];
    for i in [idx::LOG_SIGMA_Q, idx::LOG_DISP, idx::LOG_SIGMA_U, idx::LOG_SIGMA_W] {
        lower[i] = LOG_VAR_BOUNDS.0;
        upper[i] = LOG_VAR_BOUNDS.1;
    }
    lower[idx::ATANH_RHO] = -ATANH_RHO_BOUND;
    upper[idx::ATANH_RHO] = ATANH_RHO_BOUND;
    let grad_tol = match opts.integration {
        Integration::Adaptive => opts.grad_tol.max(ADAPTIVE_GRAD_TOL),
        _ => opts.grad_tol,
    };
    let nopts = NewtonOptions {
        grad_tol,
        rel_tol: opts.rel_tol,
        max_iter: opts.max_iter,
        hessian_step: opts.hessian_step,
        lower: Some(lower),
        upper: Some(upper),
        ..Default::default()
    };

    let runs: Vec<NewtonResult> = [first, second]
        .iter()
        .map(|s| maximize(&lik, s, &nopts))
        .collect();
    let n = n_rows as f64;
    let offset = n * scales.cost.ln() + n * scales.qaly.ln();
    let start_logliks = [0, 1].map(|i| runs[i].value.is_finite().then_some(runs[i].value - offset));
    let best = runs
        .iter()
        .filter(|r| r.value.is_finite())
        .max_by(|a, b| a.value.total_cmp(&b.value));
    let best = match best {
        Some(b) if runs.iter().any(|r| r.converged) => b.clone(),
        _ => {
            let b = runs
                .iter()
                .max_by(|a, b| a.value.total_cmp(&b.value))
                .expect("two runs");
            return Err(Error::Convergence {
                best_loglik: b.value,
                max_gradient: b.max_gradient,
                iterations: b.iterations,
            });
        }
    };

    let theta = best.x.clone();
    let cov_theta = inverse_information(&lik, &theta, opts.hessian_step)?;

    // delta method for (mean cost, mean QALY) on the standardised scale
    let (mc, gmc) = std_mean_cost(&theta, literal);
    let a = theta[idx::ALPHA];
    let mq = theta[idx::GAMMA] + a * mc;
    let mut gmq = [0.0; N_PARAMS];
    for i in 0..N_PARAMS {
        gmq[i] = a * gmc[i];
    }
    gmq[idx::GAMMA] += 1.0;
    gmq[idx::ALPHA] += mc;
    let quad = |x: &[f64; N_PARAMS], y: &[f64; N_PARAMS]| {
        let mut s = 0.0;
        for i in 0..N_PARAMS {
            for j in 0..N_PARAMS {
                s += x[i] * cov_theta[(i, j)] * y[j];
            }
        }
        s
    };
    let (vcc, vcq, vqq) = (quad(&gmc, &gmc), quad(&gmc, &gmq), quad(&gmq, &gmq));
    let (sc, sq) = (scales.cost, scales.qaly);
    let cov_means = [[vcc * sc * sc, vcq * sc * sq], [vcq * sc * sq, vqq * sq * sq]];

    let params = from_standardised(&theta, kind, &scales, literal);
    let loglik = best.value - offset;
    let correlation_cq = if literal {
        literal_lognormal_correlation(&params)
    } else {
        params.implied_correlation()
    };

    Ok(ArmFit {
        params,
        mean_cost: mc * sc,
        mean_qaly: mq * sq,
        cov_means,
        loglik,
        converged: best.converged,
        correlation_cq,
        iterations: best.iterations,
        start_logliks,
    })
}

/// Inverse observed information on the unconstrained scale. Variance
/// components on the zero boundary (and the correlation, when either
/// variance is on the boundary or `|ρ|` is at one) are held fixed: their
/// rows and columns are zero.
fn inverse_information(lik: &ArmLikelihood, theta: &[f64], step: f64) -> Result<DMatrix<f64>> {
    let mut fixed = [false; N_PARAMS];
    for i in [idx::LOG_SIGMA_U, idx::LOG_SIGMA_W] {
        fixed[i] = theta[i] < BOUNDARY_LOG_VAR;
    }
    fixed[idx::ATANH_RHO] =
        fixed[idx::LOG_SIGMA_U] || fixed[idx::LOG_SIGMA_W] || theta[idx::ATANH_RHO].abs() > ATANH_RHO_BOUNDARY;
    let free: Vec<usize> = (0..N_PARAMS).filter(|&i| !fixed[i]).collect();

    let h = fd_hessian(lik, theta, step);
    let m = free.len();
    let info = DMatrix::from_fn(m, m, |a, b| -h[(free[a], free[b])]);
    if info.iter().any(|v| !v.is_finite()) {
        return Err(Error::SingularInformation);
    }
    let chol = info.cholesky().ok_or(Error::SingularInformation)?;
    let inv = chol.inverse();
    let mut out = DMatrix::zeros(N_PARAMS, N_PARAMS);
    for (a, &i) in free.iter().enumerate() {
        for (b, &j) in free.iter().enumerate() {
            out[(i, j)] = inv[(a, b)];
        }
    }
    Ok(out)
}

/// Implied cost–QALY correlation when the Lognormal location is on the
/// log scale (`β₁ + u` is the log-cost location).
fn literal_lognormal_correlation(p: &ArmParams) -> f64 {
    let su2 = p.cluster_cov.sigma_u_sq;
    let s2 = p.cost_dist.dispersion.ln_1p();
    let total = su2 + s2;
    let ec = (p.beta1 + 0.5 * total).exp();
    let vc = ec * ec * total.exp_m1();
    let cuw = p.cluster_cov.covariance();
    // Cov(C, w) = E[C] Cov(u, w) for jointly Normal log-scale effects
    let cw = ec * cuw;
    let cov = p.alpha * vc + cw;
    let vq = p.alpha * p.alpha * vc + p.cluster_cov.sigma_w_sq + 2.0 * p.alpha * cw + p.sigma_q_sq;
    cov / (vc * vq).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Arm, CovariateSchema, Participant};
    use crate::glmm::{ClusterEffectCov, CostDistribution};

    fn dataset(groups: &[Vec<(f64, f64)>]) -> TrialDataset {
        let mut rows = Vec::new();
        for (i, g) in groups.iter().enumerate() {
            for &(c, q) in g {
                rows.push(Participant {
                    cluster_id: format!("k{i}"),
                    arm: Arm::Control,
                    cost: Some(c),
                    qaly: Some(q),
                    covariates: vec![],
                });
            }
        }
        TrialDataset::from_participants(rows, CovariateSchema::default()).unwrap()
    }

    #[test]
    fn one_cluster_is_an_error() {
        let d = dataset(&[vec![(1.0, 0.1), (2.0, 0.2), (3.0, 0.3)]]);
        let err = fit_arm(&d, CostKind::Gamma, &FitOptions::default()).unwrap_err();
        assert!(matches!(err, Error::InvalidArgument(_)));
    }

    #[test]
    fn incomplete_rows_are_rejected() {
        let mut d = dataset(&[vec![(1.0, 0.1), (2.0, 0.2)], vec![(3.0, 0.3), (4.0, 0.1)]]);
        let mut rows = d.participants().to_vec();
        rows[1].qaly = None;
        d = d.with_participants(rows).unwrap();
        assert!(fit_arm(&d, CostKind::Normal, &FitOptions::default()).is_err());
    }

    #[test]
    fn anova_recovers_balanced_components() {
        // groups with means ±1 and within deviations ±1
        let groups = vec![vec![0.0, 2.0], vec![-2.0, 0.0], vec![0.0, 2.0], vec![-2.0, 0.0]];
        let (b, w) = anova(&groups);
        // MSW = 2, MSB = 2*4/3, n0 = 2 → between = (8/3 - 2)/2 = 1/3
        assert!((w - 2.0).abs() < 1e-12);
        assert!((b - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn standardisation_round_trip() {
        let sc = Scales { cost: 120.0, qaly: 0.01 };
        for kind in CostKind::ALL {
            let p = ArmParams {
                beta1: 270.0,
                gamma1: 0.02,
                alpha: 1e-5,
                sigma_q_sq: 1e-4,
                cost_dist: CostDistribution { kind, dispersion: 4.0 },
                cluster_cov: ClusterEffectCov {
                    sigma_u_sq: 3900.0,
                    sigma_w_sq: 4e-6,
                    rho: 0.2,
                },
            };
            let back = from_standardised(&to_standardised(&p, &sc, false), kind, &sc, false);
            assert!((back.beta1 - p.beta1).abs() < 1e-9);
            assert!((back.alpha / p.alpha - 1.0).abs() < 1e-12);
            assert!((back.cluster_cov.sigma_u_sq / p.cluster_cov.sigma_u_sq - 1.0).abs() < 1e-12);
            assert!((back.cost_dist.dispersion / p.cost_dist.dispersion - 1.0).abs() < 1e-12);
        }
    }
}

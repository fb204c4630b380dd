//! Logistic regression of a missingness indicator, with an optional
//! Normal random intercept per cluster integrated out by Gauss-Hermite.

use nalgebra::{DMatrix, DVector};

use super::Coefficient;
use crate::error::{Error, Result};
use crate::optim::{fd_hessian, maximize, NewtonOptions, Objective};
use crate::quadrature::QuadratureRule;

const LOG_SD_BOUNDS: (f64, f64) = (-12.0, 3.0);
const LOG_SD_BOUNDARY: f64 = -8.0;

/// Standardised design with the transform back to the original scale.
pub(crate) struct Standardised {
    pub x: DMatrix<f64>,
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
}

/// Centre and scale every column but the first (the intercept).
pub(crate) fn standardise(x: &DMatrix<f64>, names: &[String]) -> Result<Standardised> {
    let (n, p) = x.shape();
    let mut mean = vec![0.0; p];
    let mut sd = vec![1.0; p];
    for j in 1..p {
        let m = x.column(j).sum() / n as f64;
        let v = x.column(j).iter().map(|a| (a - m).powi(2)).sum::<f64>() / (n as f64 - 1.0).max(1.0);
        if v <= 0.0 {
            return Err(Error::Collinear {
                columns: vec![names[0].clone(), names[j].clone()],
            });
        }
        mean[j] = m;
        sd[j] = v.sqrt();
    }
    let xs = DMatrix::from_fn(n, p, |i, j| if j == 0 { 1.0 } else { (x[(i, j)] - mean[j]) / sd[j] });
    Ok(Standardised { x: xs, mean, sd })
}

impl Standardised {
    /// Map coefficients and their covariance to the original covariate
    /// scale.
    pub fn unstandardise(&self, beta: &[f64], cov: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
        let p = beta.len();
        let mut t = DMatrix::zeros(p, p);
        t[(0, 0)] = 1.0;
        for j in 1..p {
            t[(j, j)] = 1.0 / self.sd[j];
            t[(0, j)] = -self.mean[j] / self.sd[j];
        }
        let b = &t * DVector::from_column_slice(beta);
        (b.iter().copied().collect(), &t * cov * t.transpose())
    }
}

fn log1pexp(x: f64) -> f64 {
    if x > 35.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub(crate) struct LogisticFit {
    pub beta: Vec<f64>,
    pub cov: DMatrix<f64>,
    pub loglik: f64,
}

/// A single covariate that perfectly separates the outcome classes, if any.
fn separating_column(x: &DMatrix<f64>, y: &[bool], names: &[String]) -> Option<String> {
    for j in 1..x.ncols() {
        let (mut lo1, mut hi1, mut lo0, mut hi0) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
        for (i, &yi) in y.iter().enumerate() {
            let v = x[(i, j)];
            if yi {
                lo1 = lo1.min(v);
                hi1 = hi1.max(v);
            } else {
                lo0 = lo0.min(v);
                hi0 = hi0.max(v);
            }
        }
        if hi0 <= lo1 || hi1 <= lo0 {
            return Some(names[j].clone());
        }
    }
    None
}

/// Maximum-likelihood logistic regression by Newton-Raphson (IRLS) on a
/// standardised design.
pub(crate) fn logistic(x: &DMatrix<f64>, y: &[bool], names: &[String]) -> Result<LogisticFit> {
    if let Some(c) = separating_column(x, y, names) {
        return Err(Error::Separation { covariate: c });
    }
    let (n, p) = x.shape();
    let mut beta = DVector::zeros(p);
    let loglik = |b: &DVector<f64>| -> f64 {
        let eta = x * b;
        (0..n)
            .map(|i| if y[i] { -log1pexp(-eta[i]) } else { -log1pexp(eta[i]) })
            .sum()
    };
    let mut ll = loglik(&beta);
    let mut converged = false;
    for _ in 0..100 {
        let eta = x * &beta;
        let mut g = DVector::zeros(p);
        let mut info = DMatrix::zeros(p, p);
        for i in 0..n {
            let pi = sigmoid(eta[i]);
            let r = f64::from(u8::from(y[i])) - pi;
            let row = x.row(i).transpose();
            g += &row * r;
            info += &row * row.transpose() * (pi * (1.0 - pi));
        }
        let step = info
            .clone()
            .cholesky()
            .map(|c| c.solve(&g))
            .ok_or(Error::SingularInformation)?;
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..30 {
            let cand = &beta + &step * t;
            let lc = loglik(&cand);
            if lc >= ll {
                beta = cand;
                let change = (lc - ll).abs();
                ll = lc;
                accepted = true;
                if change < 1e-12 * (1.0 + ll.abs()) && g.amax() < 1e-8 * n as f64 {
                    converged = true;
                }
                break;
            }
            t *= 0.5;
        }
        if !accepted || converged {
            converged = converged || g.amax() < 1e-6;
            break;
        }
    }
    if beta.amax() > 25.0 || !converged {
        let j = (1..p).max_by(|&a, &b| beta[a].abs().total_cmp(&beta[b].abs()));
        return Err(Error::Separation {
            covariate: j.map(|j| names[j].clone()).unwrap_or_else(|| names[0].clone()),
        });
    }
    let eta = x * &beta;
    let mut info = DMatrix::zeros(p, p);
    for i in 0..n {
        let pi = sigmoid(eta[i]);
        let row = x.row(i).transpose();
        info += &row * row.transpose() * (pi * (1.0 - pi));
    }
    let cov = info.try_inverse().ok_or(Error::SingularInformation)?;
    Ok(LogisticFit {
        beta: beta.iter().copied().collect(),
        cov,
        loglik: ll,
    })
}

/// Marginal likelihood of the random-intercept logistic model.
struct RandomIntercept<'a> {
    x: &'a DMatrix<f64>,
    y: &'a [bool],
    clusters: &'a [Vec<usize>],
    z: Vec<f64>,
    lw: Vec<f64>,
}

impl RandomIntercept<'_> {
    fn eval(&self, theta: &[f64], want_grad: bool) -> (f64, Vec<f64>) {
        let p = self.x.ncols();
        let sd = theta[p].exp();
        let eta: Vec<f64> = (0..self.x.nrows())
            .map(|i| (0..p).map(|j| self.x[(i, j)] * theta[j]).sum())
            .collect();
        let mut total = 0.0;
        let mut grad = vec![0.0; p + 1];
        let m = self.z.len();
        let mut terms = vec![0.0; m];
        let mut scores = vec![vec![0.0; p + 1]; m];
        for rows in self.clusters {
            for k in 0..m {
                let b = sd * self.z[k];
                let mut l = self.lw[k];
                if want_grad {
                    scores[k].iter_mut().for_each(|v| *v = 0.0);
                }
                for &i in rows {
                    let e = eta[i] + b;
                    l += if self.y[i] { -log1pexp(-e) } else { -log1pexp(e) };
                    if want_grad {
                        let r = f64::from(u8::from(self.y[i])) - sigmoid(e);
                        for j in 0..p {
                            scores[k][j] += r * self.x[(i, j)];
                        }
                        scores[k][p] += r * b;
                    }
                }
                terms[k] = l;
            }
            let mx = terms.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let w: Vec<f64> = terms.iter().map(|t| (t - mx).exp()).collect();
            let s: f64 = w.iter().sum();
            total += mx + s.ln();
            if want_grad {
                for k in 0..m {
                    for j in 0..=p {
                        grad[j] += w[k] / s * scores[k][j];
                    }
                }
            }
        }
        (total, grad)
    }
}

impl Objective for RandomIntercept<'_> {
    fn dim(&self) -> usize {
        self.x.ncols() + 1
    }

    fn value(&self, x: &[f64]) -> f64 {
        self.eval(x, false).0
    }

    fn value_and_gradient(&self, x: &[f64]) -> (f64, Vec<f64>) {
        self.eval(x, true)
    }
}

pub(crate) struct RandomInterceptFit {
    pub beta: Vec<f64>,
    pub cov: DMatrix<f64>,
    pub cluster_sd: f64,
    pub loglik: f64,
    pub converged: bool,
}

pub(crate) fn random_intercept_logistic(
    x: &DMatrix<f64>,
    y: &[bool],
    clusters: &[Vec<usize>],
    names: &[String],
    rule: &QuadratureRule,
) -> Result<RandomInterceptFit> {
    let start = logistic(x, y, names)?;
    let p = x.ncols();
    let obj = RandomIntercept {
        x,
        y,
        clusters,
        z: rule.nodes().iter().map(|v| std::f64::consts::SQRT_2 * v).collect(),
        lw: rule
            .weights()
            .iter()
            .map(|w| (w / std::f64::consts::PI.sqrt()).ln())
            .collect(),
    };
    let mut lower = vec![f64::NEG_INFINITY; p + 1];
    let mut upper = vec![f64::INFINITY; p + 1];
    lower[p] = LOG_SD_BOUNDS.0;
    upper[p] = LOG_SD_BOUNDS.1;
    let opts = NewtonOptions {
        lower: Some(lower),
        upper: Some(upper),
        ..Default::default()
    };
    let mut best = None;
    for log_sd in [-1.0, 0.0] {
        let mut x0 = start.beta.clone();
        x0.push(log_sd);
        let r = maximize(&obj, &x0, &opts);
        if best.as_ref().is_none_or(|b: &crate::optim::NewtonResult| r.value > b.value) {
            best = Some(r);
        }
    }
    let best = best.expect("two starts");
    let at_boundary = best.x[p] < LOG_SD_BOUNDARY;
    let free = if at_boundary { p } else { p + 1 };
    let h = fd_hessian(&obj, &best.x, 1e-4);
    let info = DMatrix::from_fn(free, free, |i, j| -h[(i, j)]);
    let inv = info
        .cholesky()
        .ok_or(Error::SingularInformation)?
        .inverse();
    let cov = DMatrix::from_fn(p, p, |i, j| inv[(i, j)]);
    Ok(RandomInterceptFit {
        beta: best.x[..p].to_vec(),
        cov,
        cluster_sd: if at_boundary { 0.0 } else { best.x[p].exp() },
        loglik: best.value,
        converged: best.converged,
    })
}

pub(crate) fn wald(names: &[String], beta: &[f64], cov: &DMatrix<f64>) -> Vec<Coefficient> {
    names
        .iter()
        .enumerate()
        .map(|(j, name)| Coefficient::new(name, beta[j], cov[(j, j)].max(0.0).sqrt()))
        .collect()
}

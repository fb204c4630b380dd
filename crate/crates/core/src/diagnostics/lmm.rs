//! Linear model with a cluster random intercept, fitted by profile maximum
//! likelihood over the variance ratio.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

pub(crate) struct LmmFit {
    pub beta: Vec<f64>,
    pub cov: DMatrix<f64>,
    pub sigma_b_sq: f64,
    pub sigma_e_sq: f64,
}

struct Profile {
    beta: DVector<f64>,
    xtvx: DMatrix<f64>,
    sigma_e_sq: f64,
    loglik: f64,
}

/// GLS at variance ratio `tau = σ_b² / σ_e²`, with `σ_e²` profiled out.
fn profile(x: &DMatrix<f64>, y: &[f64], clusters: &[Vec<usize>], tau: f64) -> Option<Profile> {
    let p = x.ncols();
    let n = y.len() as f64;
    let mut xtvx = DMatrix::zeros(p, p);
    let mut xtvy = DVector::zeros(p);
    let mut logdet = 0.0;
    for rows in clusters {
        let nc = rows.len() as f64;
        let shrink = tau / (1.0 + nc * tau);
        let mut sx = DVector::zeros(p);
        let mut sy = 0.0;
        for &i in rows {
            let xi = x.row(i).transpose();
            xtvx += &xi * xi.transpose();
            xtvy += &xi * y[i];
            sx += &xi;
            sy += y[i];
        }
        xtvx -= &sx * sx.transpose() * shrink;
        xtvy -= &sx * (sy * shrink);
        logdet += (nc * tau).ln_1p();
    }
    let beta = xtvx.clone().cholesky()?.solve(&xtvy);
    let mut rss = 0.0;
    for rows in clusters {
        let nc = rows.len() as f64;
        let shrink = tau / (1.0 + nc * tau);
        let mut sr = 0.0;
        for &i in rows {
            let r = y[i] - (x.row(i) * &beta)[0];
            rss += r * r;
            sr += r;
        }
        rss -= shrink * sr * sr;
    }
    let sigma_e_sq = rss / n;
    if !(sigma_e_sq > 0.0) {
        return None;
    }
    let loglik = -0.5 * n * ((2.0 * std::f64::consts::PI * sigma_e_sq).ln() + 1.0) - 0.5 * logdet;
    Some(Profile {
        beta,
        xtvx,
        sigma_e_sq,
        loglik,
    })
}

pub(crate) fn random_intercept_lmm(x: &DMatrix<f64>, y: &[f64], clusters: &[Vec<usize>]) -> Result<LmmFit> {
    let f = |lt: f64| profile(x, y, clusters, lt.exp()).map_or(f64::NEG_INFINITY, |p| p.loglik);
    // coarse grid then golden-section refinement on log τ
    let grid: Vec<f64> = (0..=60).map(|i| -20.0 + 0.5 * i as f64).collect();
    let vals: Vec<f64> = grid.iter().map(|&g| f(g)).collect();
    let k = (0..grid.len())
        .max_by(|&a, &b| vals[a].total_cmp(&vals[b]))
        .expect("non-empty grid");
    let (mut a, mut b) = (grid[k.saturating_sub(1)], grid[(k + 1).min(grid.len() - 1)]);
    let phi = 0.5 * (5f64.sqrt() - 1.0);
    let mut c = b - phi * (b - a);
    let mut d = a + phi * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    while b - a > 1e-10 {
        if fc > fd {
            b = d;
            d = c;
            fd = fc;
            c = b - phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + phi * (b - a);
            fd = f(d);
        }
    }
    let lt = 0.5 * (a + b);
    let tau = if k == 0 { 0.0 } else { lt.exp() };
    let prof = profile(x, y, clusters, tau).ok_or(Error::SingularInformation)?;
    let cov = prof
        .xtvx
        .clone()
        .try_inverse()
        .ok_or(Error::SingularInformation)?
        * prof.sigma_e_sq;
    Ok(LmmFit {
        beta: prof.beta.iter().copied().collect(),
        cov,
        sigma_b_sq: tau * prof.sigma_e_sq,
        sigma_e_sq: prof.sigma_e_sq,
    })
}

use nalgebra::{DMatrix, Matrix2, Vector2};
use rand_distr::{Distribution, StandardNormal};

use super::design::{build_design, check_full_rank, Design, INTERCEPT};
use super::spec::ImputationSpec;
use super::wishart::inverse_wishart;
use crate::data::{Arm, Participant, TrialDataset};
use crate::error::{Error, Result};
use crate::rng::{rng_from, Rng};

/// Inverse-Wishart prior degrees of freedom (dimension + 1) and identity
/// scale, applied on the standardised response scale.
const PRIOR_DF: f64 = 3.0;

/// One retained state of the sampler, on the original response scale
/// (log cost, QALY).
#[derive(Debug, Clone, PartialEq)]
pub struct ImputerState {
    pub iteration: usize,
    /// Predictors × responses; rows follow the design columns.
    pub fixed_coefficients: DMatrix<f64>,
    pub level1_cov: Matrix2<f64>,
    pub level2_cov: Option<Matrix2<f64>>,
    pub cluster_effects: Vec<[f64; 2]>,
}

/// The `K` completed datasets of one imputation run.
#[derive(Debug, Clone, PartialEq)]
pub struct CompletedSet {
    pub datasets: Vec<TrialDataset>,
    pub spec: ImputationSpec,
    pub draw_indices: Vec<usize>,
}

struct Scaling {
    y_mean: [f64; 2],
    y_sd: [f64; 2],
    x_mean: Vec<f64>,
    x_sd: Vec<f64>,
}

fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 {
        v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (m, var.sqrt())
}

fn single_arm(d: &TrialDataset) -> Result<Arm> {
    match d.arms_present().as_slice() {
        [arm] => Ok(*arm),
        [] => Err(Error::InvalidArgument("dataset has no participants".into())),
        _ => Err(Error::InvalidArgument(
            "imputation runs on one arm at a time; split the dataset first".into(),
        )),
    }
}

struct Chain {
    design: Design,
    scaling: Scaling,
    /// Standardised predictors.
    x: DMatrix<f64>,
    /// Lower Cholesky factor of `XᵀX`.
    xtx_l: DMatrix<f64>,
    multilevel: bool,
    y: Vec<[f64; 2]>,
    b: DMatrix<f64>,
    sigma1: Matrix2<f64>,
    sigma2: Matrix2<f64>,
    u: Vec<[f64; 2]>,
    cluster_sizes: Vec<usize>,
}

impl Chain {
    fn new(d: &TrialDataset, spec: &ImputationSpec, arm: Arm) -> Result<Self> {
        let design = build_design(d, spec.auxiliaries_for(arm), spec.cluster_size_for(arm))?;
        let n = design.n_rows();
        let p = design.n_predictors();
        if spec.multilevel && design.n_clusters() < 2 {
            return Err(Error::InvalidArgument(format!(
                "multilevel imputation needs at least 2 clusters, {arm} arm has {}",
                design.n_clusters()
            )));
        }
        if n <= p {
            return Err(Error::InvalidArgument(format!(
                "{arm} arm has {n} rows for {p} predictors"
            )));
        }

        let mut y_mean = [0.0; 2];
        let mut y_sd = [1.0; 2];
        for r in 0..2 {
            let obs: Vec<f64> = design.y.iter().filter_map(|row| row[r]).collect();
            if obs.is_empty() {
                let what = if r == 0 { "cost" } else { "QALY" };
                return Err(Error::InvalidArgument(format!("no observed {what} in the {arm} arm")));
            }
            let (m, s) = mean_sd(&obs);
            y_mean[r] = m;
            if s > 0.0 {
                y_sd[r] = s;
            }
        }

        let mut x_mean = vec![0.0; p];
        let mut x_sd = vec![1.0; p];
        for j in 1..p {
            let col: Vec<f64> = design.x.column(j).iter().copied().collect();
            let (m, s) = mean_sd(&col);
            if s == 0.0 {
                return Err(Error::Collinear {
                    columns: vec![INTERCEPT.to_string(), design.columns[j].clone()],
                });
            }
            x_mean[j] = m;
            x_sd[j] = s;
        }
        let x = DMatrix::from_fn(n, p, |i, j| (design.x[(i, j)] - x_mean[j]) / x_sd[j]);
        check_full_rank(&x, &design.columns)?;
        let xtx = x.transpose() * &x;
        let xtx_l = xtx
            .cholesky()
            .ok_or_else(|| Error::Collinear {
                columns: design.columns.clone(),
            })?
            .l();

        // missing cells start at the observed mean (0 after standardising)
        let y = design
            .y
            .iter()
            .map(|row| {
                let mut out = [0.0; 2];
                for r in 0..2 {
                    if let Some(v) = row[r] {
                        out[r] = (v - y_mean[r]) / y_sd[r];
                    }
                }
                out
            })
            .collect();
        let mut cluster_sizes = vec![0; design.n_clusters()];
        for &c in &design.cluster {
            cluster_sizes[c] += 1;
        }
        Ok(Self {
            scaling: Scaling {
                y_mean,
                y_sd,
                x_mean,
                x_sd,
            },
            xtx_l,
            multilevel: spec.multilevel,
            y,
            b: DMatrix::zeros(p, 2),
            sigma1: Matrix2::identity(),
            sigma2: Matrix2::identity() * 0.1,
            u: vec![[0.0; 2]; design.n_clusters()],
            cluster_sizes,
            x,
            design,
        })
    }

    fn fitted(&self, i: usize) -> [f64; 2] {
        let mut m = [0.0; 2];
        for (j, xv) in self.x.row(i).iter().enumerate() {
            m[0] += xv * self.b[(j, 0)];
            m[1] += xv * self.b[(j, 1)];
        }
        m
    }

    fn step(&mut self, rng: &mut Rng, iteration: usize) -> Result<()> {
        let n = self.design.n_rows();
        let not_pd = |context: &str| Error::NotPositiveDefinite {
            context: context.to_string(),
            iteration: Some(iteration),
        };

        // (a) missing responses given everything else
        let s1 = self.sigma1;
        let l1 = s1.cholesky().ok_or_else(|| not_pd("level-1 covariance"))?.l();
        for i in 0..n {
            let obs = self.design.y[i];
            if obs[0].is_some() && obs[1].is_some() {
                continue;
            }
            let f = self.fitted(i);
            let u = self.u[self.design.cluster[i]];
            let mu = [f[0] + u[0], f[1] + u[1]];
            match (obs[0].is_some(), obs[1].is_some()) {
                (false, false) => {
                    let z1: f64 = StandardNormal.sample(rng);
                    let z2: f64 = StandardNormal.sample(rng);
                    self.y[i][0] = mu[0] + l1[(0, 0)] * z1;
                    self.y[i][1] = mu[1] + l1[(1, 0)] * z1 + l1[(1, 1)] * z2;
                }
                (o0, _) => {
                    let (m, o) = if o0 { (1, 0) } else { (0, 1) };
                    let mean = mu[m] + s1[(m, o)] / s1[(o, o)] * (self.y[i][o] - mu[o]);
                    let var = s1[(m, m)] - s1[(m, o)].powi(2) / s1[(o, o)];
                    let z: f64 = StandardNormal.sample(rng);
                    self.y[i][m] = mean + var.max(0.0).sqrt() * z;
                }
            }
        }

        // (b) cluster effects
        let s1_inv = s1.try_inverse().ok_or_else(|| not_pd("level-1 covariance"))?;
        if self.multilevel {
            let s2_inv = self
                .sigma2
                .try_inverse()
                .ok_or_else(|| not_pd("level-2 covariance"))?;
            let mut sums = vec![Vector2::zeros(); self.u.len()];
            for i in 0..n {
                let f = self.fitted(i);
                let c = self.design.cluster[i];
                sums[c] += Vector2::new(self.y[i][0] - f[0], self.y[i][1] - f[1]);
            }
            for (c, r) in sums.iter().enumerate() {
                let prec = s2_inv + s1_inv * self.cluster_sizes[c] as f64;
                let cov = prec.try_inverse().ok_or_else(|| not_pd("cluster-effect posterior"))?;
                let mean = cov * (s1_inv * r);
                let l = cov.cholesky().ok_or_else(|| not_pd("cluster-effect posterior"))?.l();
                let z = Vector2::new(StandardNormal.sample(rng), StandardNormal.sample(rng));
                let draw = mean + l * z;
                self.u[c] = [draw[0], draw[1]];
            }
        }

        // (c) fixed coefficients, flat prior
        let p = self.x.ncols();
        let mut r = DMatrix::zeros(n, 2);
        for i in 0..n {
            let u = self.u[self.design.cluster[i]];
            r[(i, 0)] = self.y[i][0] - u[0];
            r[(i, 1)] = self.y[i][1] - u[1];
        }
        let xtr = self.x.transpose() * r;
        let tmp = self
            .xtx_l
            .solve_lower_triangular(&xtr)
            .ok_or_else(|| not_pd("predictor cross-product"))?;
        let b_hat = self
            .xtx_l
            .transpose()
            .solve_upper_triangular(&tmp)
            .ok_or_else(|| not_pd("predictor cross-product"))?;
        let z = DMatrix::from_fn(p, 2, |_, _| StandardNormal.sample(rng));
        let v = self
            .xtx_l
            .transpose()
            .solve_upper_triangular(&z)
            .ok_or_else(|| not_pd("predictor cross-product"))?;
        let l1m = DMatrix::from_row_slice(2, 2, &[l1[(0, 0)], 0.0, l1[(1, 0)], l1[(1, 1)]]);
        self.b = b_hat + v * l1m.transpose();

        // (d) level-1 covariance
        let mut scatter = Matrix2::identity();
        for i in 0..n {
            let f = self.fitted(i);
            let u = self.u[self.design.cluster[i]];
            let e = Vector2::new(self.y[i][0] - f[0] - u[0], self.y[i][1] - f[1] - u[1]);
            scatter += e * e.transpose();
        }
        self.sigma1 = inverse_wishart(PRIOR_DF + n as f64, &scatter, rng, iteration)?;

        // (e) level-2 covariance
        if self.multilevel {
            let mut s = Matrix2::identity();
            for u in &self.u {
                let v = Vector2::new(u[0], u[1]);
                s += v * v.transpose();
            }
            self.sigma2 = inverse_wishart(PRIOR_DF + self.u.len() as f64, &s, rng, iteration)?;
        }
        Ok(())
    }

    fn state(&self, iteration: usize) -> ImputerState {
        let sc = &self.scaling;
        let p = self.b.nrows();
        let mut b = DMatrix::zeros(p, 2);
        for r in 0..2 {
            let mut shift = 0.0;
            for j in 1..p {
                b[(j, r)] = sc.y_sd[r] * self.b[(j, r)] / sc.x_sd[j];
                shift += self.b[(j, r)] * sc.x_mean[j] / sc.x_sd[j];
            }
            b[(0, r)] = sc.y_mean[r] + sc.y_sd[r] * (self.b[(0, r)] - shift);
        }
        let d = Matrix2::new(sc.y_sd[0], 0.0, 0.0, sc.y_sd[1]);
        ImputerState {
            iteration,
            fixed_coefficients: b,
            level1_cov: d * self.sigma1 * d,
            level2_cov: self.multilevel.then(|| d * self.sigma2 * d),
            cluster_effects: self
                .u
                .iter()
                .map(|u| [u[0] * sc.y_sd[0], u[1] * sc.y_sd[1]])
                .collect(),
        }
    }

    fn completed(&self, d: &TrialDataset) -> Result<TrialDataset> {
        let sc = &self.scaling;
        let rows: Vec<Participant> = d
            .participants()
            .iter()
            .zip(&self.y)
            .map(|(p, y)| {
                let mut p = p.clone();
                if p.cost.is_none() {
                    p.cost = Some((sc.y_mean[0] + sc.y_sd[0] * y[0]).exp());
                }
                if p.qaly.is_none() {
                    p.qaly = Some(sc.y_mean[1] + sc.y_sd[1] * y[1]);
                }
                p
            })
            .collect();
        d.with_participants(rows)
    }
}

fn run(d: &TrialDataset, spec: &ImputationSpec, keep_states: bool) -> Result<(CompletedSet, Vec<ImputerState>)> {
    spec.validate()?;
    let arm = single_arm(d)?;
    let mut chain = Chain::new(d, spec, arm)?;
    let indices = spec.draw_indices();
    if chain.design.n_missing() == 0 && !keep_states {
        return Ok((
            CompletedSet {
                datasets: vec![d.clone(); spec.k],
                spec: spec.clone(),
                draw_indices: indices,
            },
            Vec::new(),
        ));
    }
    let mut rng = rng_from(spec.seed, u64::from(arm.code()));
    let last = *indices.last().expect("k >= 2");
    let mut datasets = Vec::with_capacity(spec.k);
    let mut states = Vec::new();
    let mut next = 0;
    for it in 1..=last {
        chain.step(&mut rng, it)?;
        if it == indices[next] {
            datasets.push(chain.completed(d)?);
            if keep_states {
                states.push(chain.state(it));
            }
            next += 1;
        }
    }
    Ok((
        CompletedSet {
            datasets,
            spec: spec.clone(),
            draw_indices: indices,
        },
        states,
    ))
}

/// Impute one arm. The random stream is derived from `spec.seed` and the
/// arm, so the two arms of a trial draw independent streams.
pub fn gibbs_run(d: &TrialDataset, spec: &ImputationSpec) -> Result<CompletedSet> {
    run(d, spec, false).map(|(c, _)| c)
}

/// As [`gibbs_run`], also returning the retained sampler states.
pub fn gibbs_run_with_states(d: &TrialDataset, spec: &ImputationSpec) -> Result<(CompletedSet, Vec<ImputerState>)> {
    run(d, spec, true)
}

/// Single-level imputation: cluster effects fixed at zero.
pub fn impute_single_level(d: &TrialDataset, spec: &ImputationSpec) -> Result<CompletedSet> {
    let spec = ImputationSpec {
        multilevel: false,
        ..spec.clone()
    };
    gibbs_run(d, &spec)
}

/// Impute both arms separately and reassemble each completed dataset in the
/// original row order.
pub fn impute_trial(d: &TrialDataset, spec: &ImputationSpec) -> Result<CompletedSet> {
    spec.validate()?;
    let (control, treated) = d.split_by_arm()?;
    let (a, b) = rayon::join(|| gibbs_run(&control, spec), || gibbs_run(&treated, spec));
    let (a, b) = (a?, b?);
    let mut datasets = Vec::with_capacity(spec.k);
    for (ca, cb) in a.datasets.iter().zip(&b.datasets) {
        let mut it_a = ca.participants().iter();
        let mut it_b = cb.participants().iter();
        let rows: Vec<Participant> = d
            .participants()
            .iter()
            .map(|p| {
                let src = match p.arm {
                    Arm::Control => it_a.next(),
                    Arm::Intervention => it_b.next(),
                };
                src.expect("arm subsets partition the rows").clone()
            })
            .collect();
        datasets.push(d.with_participants(rows)?);
    }
    Ok(CompletedSet {
        datasets,
        spec: spec.clone(),
        draw_indices: a.draw_indices,
    })
}

//! Screening of candidate auxiliary variables and complete-case analysis.
//!
//! Missingness of each outcome is regressed on covariates (optionally with
//! cluster size) by logistic regression, with and without a Normal cluster
//! random intercept. The observed outcome itself (log cost or QALY) is
//! screened by a linear model with a cluster random intercept. Covariates
//! with small p-values are listed as candidates; nothing is selected
//! automatically.

mod lmm;
mod logistic;

use std::fmt::Write as _;
use std::io::Write;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cea::{summarize, ArmSummary, CeaSummary, LambdaGrid};
use crate::data::{Arm, TrialDataset};
use crate::error::{Error, Result};
use crate::glmm::{fit_arm, ArmFit, CostKind, FitOptions};
use crate::impute::{CLUSTER_SIZE_COLUMN, INTERCEPT};
use crate::quadrature::gauss_hermite;

/// Gauss-Hermite order for the random-intercept logistic model.
pub const RANDOM_INTERCEPT_ORDER: usize = 30;
/// Default p-value threshold for listing a candidate auxiliary.
pub const DEFAULT_THRESHOLD: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Outcome {
    Cost,
    Qaly,
}

impl Outcome {
    pub const BOTH: [Outcome; 2] = [Outcome::Cost, Outcome::Qaly];

    pub fn name(self) -> &'static str {
        match self {
            Outcome::Cost => "cost",
            Outcome::Qaly => "qaly",
        }
    }

    fn value(self, p: &crate::data::Participant) -> Option<f64> {
        match self {
            Outcome::Cost => p.cost,
            Outcome::Qaly => p.qaly,
        }
    }
}

/// Estimate with its standard error and two-sided Wald p-value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Coefficient {
    pub name: String,
    pub estimate: f64,
    pub se: f64,
    pub z: f64,
    pub p: f64,
}

impl Coefficient {
    pub fn new(name: &str, estimate: f64, se: f64) -> Self {
        let z = estimate / se;
        let p = statrs::function::erf::erfc(z.abs() / std::f64::consts::SQRT_2).clamp(0.0, 1.0);
        Self {
            name: name.to_string(),
            estimate,
            se,
            z,
            p,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MissingnessModelResult {
    pub outcome: Outcome,
    pub arm: Arm,
    pub random_intercept: bool,
    /// Coefficients for the log-odds of the outcome being missing.
    pub coefficients: Vec<Coefficient>,
    pub cluster_sd: Option<f64>,
    pub loglik: f64,
    pub converged: bool,
    pub n: usize,
    pub n_missing: usize,
}

/// Linear random-intercept model for the observed outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeModelResult {
    pub outcome: Outcome,
    pub arm: Arm,
    pub coefficients: Vec<Coefficient>,
    pub sigma_b_sq: f64,
    pub sigma_e_sq: f64,
    pub n: usize,
}

fn single_arm(d: &TrialDataset) -> Result<Arm> {
    match d.arms_present().as_slice() {
        [a] => Ok(*a),
        [] => Err(Error::InvalidArgument("dataset has no rows".into())),
        _ => Err(Error::InvalidArgument("expected a single-arm dataset".into())),
    }
}

/// Intercept, the named covariates and optionally cluster size, for rows
/// selected by `keep`.
fn covariate_matrix(d: &TrialDataset, rows: &[usize], covariates: &[String], cluster_size: bool) -> Result<(DMatrix<f64>, Vec<String>)> {
    let mut names = vec![INTERCEPT.to_string()];
    let mut cols: Vec<Vec<f64>> = Vec::new();
    for c in covariates {
        let v = d
            .covariate(c)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown covariate `{c}`")))?;
        if let Some(i) = rows.iter().find(|&&i| !v[i].is_finite()) {
            return Err(Error::InvalidArgument(format!("covariate `{c}` is missing at row {}", i + 1)));
        }
        names.push(c.clone());
        cols.push(rows.iter().map(|&i| v[i]).collect());
    }
    if cluster_size {
        let sizes = d.participant_cluster_sizes();
        names.push(CLUSTER_SIZE_COLUMN.to_string());
        cols.push(rows.iter().map(|&i| sizes[i] as f64).collect());
    }
    let x = DMatrix::from_fn(rows.len(), names.len(), |i, j| if j == 0 { 1.0 } else { cols[j - 1][i] });
    Ok((x, names))
}

/// Cluster membership as lists of positions into `rows`.
fn cluster_groups(d: &TrialDataset, rows: &[usize]) -> Vec<Vec<usize>> {
    let mut pos = vec![usize::MAX; d.len()];
    for (k, &i) in rows.iter().enumerate() {
        pos[i] = k;
    }
    d.rows_by_cluster()
        .into_iter()
        .map(|(_, r)| r.into_iter().filter(|&i| pos[i] != usize::MAX).map(|i| pos[i]).collect::<Vec<_>>())
        .filter(|g: &Vec<usize>| !g.is_empty())
        .collect()
}

/// Logistic regression of the missingness indicator of `outcome` on the
/// covariates of a one-arm dataset.
pub fn fit_missingness_logistic(
    d: &TrialDataset,
    outcome: Outcome,
    covariates: &[String],
    cluster_size: bool,
    random_intercept: bool,
) -> Result<MissingnessModelResult> {
    let arm = single_arm(d)?;
    let rows: Vec<usize> = (0..d.len()).collect();
    let y: Vec<bool> = d.participants().iter().map(|p| outcome.value(p).is_none()).collect();
    let n_missing = y.iter().filter(|&&m| m).count();
    if n_missing == 0 || n_missing == y.len() {
        return Err(Error::InvalidArgument(format!(
            "{} is {} in the {} arm; missingness cannot be modelled",
            outcome.name(),
            if n_missing == 0 { "fully observed" } else { "entirely missing" },
            arm.name()
        )));
    }
    let (x, names) = covariate_matrix(d, &rows, covariates, cluster_size)?;
    let s = logistic::standardise(&x, &names)?;
    let (beta, cov, cluster_sd, loglik, converged) = if random_intercept {
        let rule = gauss_hermite(RANDOM_INTERCEPT_ORDER)?;
        let groups = cluster_groups(d, &rows);
        let f = logistic::random_intercept_logistic(&s.x, &y, &groups, &names, &rule)?;
        (f.beta, f.cov, Some(f.cluster_sd), f.loglik, f.converged)
    } else {
        let f = logistic::logistic(&s.x, &y, &names)?;
        (f.beta, f.cov, None, f.loglik, true)
    };
    let (beta, cov) = s.unstandardise(&beta, &cov);
    Ok(MissingnessModelResult {
        outcome,
        arm,
        random_intercept,
        coefficients: logistic::wald(&names, &beta, &cov),
        cluster_sd,
        loglik,
        converged,
        n: y.len(),
        n_missing,
    })
}

/// Linear random-intercept regression of the observed outcome (log cost
/// or QALY) on the covariates of a one-arm dataset.
pub fn screen_outcome(d: &TrialDataset, outcome: Outcome, covariates: &[String], cluster_size: bool) -> Result<OutcomeModelResult> {
    let arm = single_arm(d)?;
    let mut rows = Vec::new();
    let mut y = Vec::new();
    for (i, p) in d.participants().iter().enumerate() {
        if let Some(v) = outcome.value(p) {
            let v = match outcome {
                Outcome::Cost if v > 0.0 => v.ln(),
                Outcome::Cost => continue,
                Outcome::Qaly => v,
            };
            rows.push(i);
            y.push(v);
        }
    }
    let (x, names) = covariate_matrix(d, &rows, covariates, cluster_size)?;
    if rows.len() <= names.len() {
        return Err(Error::InvalidArgument(format!(
            "too few observed {} values in the {} arm",
            outcome.name(),
            arm.name()
        )));
    }
    let s = logistic::standardise(&x, &names)?;
    let groups = cluster_groups(d, &rows);
    let f = lmm::random_intercept_lmm(&s.x, &y, &groups)?;
    let (beta, cov) = s.unstandardise(&f.beta, &f.cov);
    Ok(OutcomeModelResult {
        outcome,
        arm,
        coefficients: logistic::wald(&names, &beta, &cov),
        sigma_b_sq: f.sigma_b_sq,
        sigma_e_sq: f.sigma_e_sq,
        n: rows.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub arm: Arm,
    pub outcome: Outcome,
    pub variable: String,
    /// `missingness`, `missingness+ri` or `outcome`.
    pub model: String,
    pub p: f64,
}

/// All screening models for both arms and outcomes. Models that could not
/// be fitted are listed with the reason.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScreeningReport {
    pub threshold: f64,
    pub missingness: Vec<MissingnessModelResult>,
    pub outcome_models: Vec<OutcomeModelResult>,
    pub skipped: Vec<String>,
}

enum Job {
    Missing(Arm, Outcome, bool),
    Observed(Arm, Outcome),
}

enum JobResult {
    Missing(MissingnessModelResult),
    Observed(OutcomeModelResult),
}

pub fn screen(d: &TrialDataset, covariates: &[String], cluster_size: bool, threshold: f64) -> Result<ScreeningReport> {
    if let Some(c) = covariates.iter().find(|c| d.schema().index_of(c).is_none()) {
        return Err(Error::InvalidArgument(format!("unknown covariate `{c}`")));
    }
    let (control, intervention) = d.split_by_arm()?;
    let mut jobs = Vec::new();
    for arm in Arm::BOTH {
        for outcome in Outcome::BOTH {
            jobs.push(Job::Missing(arm, outcome, false));
            jobs.push(Job::Missing(arm, outcome, true));
            jobs.push(Job::Observed(arm, outcome));
        }
    }
    let results: Vec<(String, Result<JobResult>)> = jobs
        .par_iter()
        .map(|job| {
            let data = |arm: Arm| if arm == Arm::Control { &control } else { &intervention };
            match *job {
                Job::Missing(arm, outcome, ri) => (
                    format!("{} {} missingness{}", arm.name(), outcome.name(), if ri { " (random intercept)" } else { "" }),
                    fit_missingness_logistic(data(arm), outcome, covariates, cluster_size, ri).map(JobResult::Missing),
                ),
                Job::Observed(arm, outcome) => (
                    format!("{} {} outcome model", arm.name(), outcome.name()),
                    screen_outcome(data(arm), outcome, covariates, cluster_size).map(JobResult::Observed),
                ),
            }
        })
        .collect();
    let mut report = ScreeningReport {
        threshold,
        missingness: Vec::new(),
        outcome_models: Vec::new(),
        skipped: Vec::new(),
    };
    for (label, r) in results {
        match r {
            Ok(JobResult::Missing(m)) => report.missingness.push(m),
            Ok(JobResult::Observed(o)) => report.outcome_models.push(o),
            Err(e) => report.skipped.push(format!("{label}: {e}")),
        }
    }
    Ok(report)
}

impl ScreeningReport {
    /// Covariates with p below the threshold in any model, in report order.
    pub fn candidates(&self) -> Vec<Candidate> {
        let mut out = Vec::new();
        let mut push = |arm, outcome, model: &str, coefs: &[Coefficient]| {
            for c in coefs.iter().filter(|c| c.name != INTERCEPT && c.p < self.threshold) {
                out.push(Candidate {
                    arm,
                    outcome,
                    variable: c.name.clone(),
                    model: model.to_string(),
                    p: c.p,
                });
            }
        };
        for m in &self.missingness {
            let model = if m.random_intercept { "missingness+ri" } else { "missingness" };
            push(m.arm, m.outcome, model, &m.coefficients);
        }
        for o in &self.outcome_models {
            push(o.arm, o.outcome, "outcome", &o.coefficients);
        }
        out
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let table = |s: &mut String, coefs: &[Coefficient]| {
            let _ = writeln!(s, "  {:<16} {:>12} {:>12} {:>8} {:>8}", "variable", "estimate", "se", "z", "p");
            for c in coefs {
                let _ = writeln!(
                    s,
                    "  {:<16} {:>12.5} {:>12.5} {:>8.3} {:>8.4}",
                    c.name, c.estimate, c.se, c.z, c.p
                );
            }
        };
        for m in &self.missingness {
            let _ = write!(
                s,
                "Missingness of {} ({} arm, {} of {} missing), logistic",
                m.outcome.name(),
                m.arm.name(),
                m.n_missing,
                m.n
            );
            match m.cluster_sd {
                Some(sd) => {
                    let _ = writeln!(s, " with cluster random intercept (sd {sd:.4})");
                }
                None => {
                    let _ = writeln!(s);
                }
            }
            table(&mut s, &m.coefficients);
            s.push('\n');
        }
        for o in &self.outcome_models {
            let label = if o.outcome == Outcome::Cost { "log cost" } else { "qaly" };
            let _ = writeln!(
                s,
                "Observed {label} ({} arm, n = {}), linear with cluster random intercept (var {:.5}, residual var {:.5})",
                o.arm.name(),
                o.n,
                o.sigma_b_sq,
                o.sigma_e_sq
            );
            table(&mut s, &o.coefficients);
            s.push('\n');
        }
        for k in &self.skipped {
            let _ = writeln!(s, "Skipped: {k}");
        }
        let cands = self.candidates();
        let _ = writeln!(s, "Candidate auxiliaries (p < {}):", self.threshold);
        if cands.is_empty() {
            let _ = writeln!(s, "  none");
        }
        for c in &cands {
            let _ = writeln!(
                s,
                "  {:<16} {} arm, {} {}, p = {:.4}",
                c.variable,
                c.arm.name(),
                c.outcome.name(),
                c.model,
                c.p
            );
        }
        s
    }

    /// One row per coefficient: `model, arm, outcome, random_intercept,
    /// variable, estimate, se, z, p`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["model", "arm", "outcome", "random_intercept", "variable", "estimate", "se", "z", "p"])?;
        let mut rows = |model: &str, arm: Arm, outcome: Outcome, ri: bool, coefs: &[Coefficient]| -> Result<()> {
            for c in coefs {
                w.write_record([
                    model,
                    arm.name(),
                    outcome.name(),
                    if ri { "1" } else { "0" },
                    &c.name,
                    &c.estimate.to_string(),
                    &c.se.to_string(),
                    &c.z.to_string(),
                    &c.p.to_string(),
                ])?;
            }
            Ok(())
        };
        for m in &self.missingness {
            rows("missingness", m.arm, m.outcome, m.random_intercept, &m.coefficients)?;
        }
        for o in &self.outcome_models {
            rows("outcome", o.arm, o.outcome, true, &o.coefficients)?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompleteCaseResult {
    pub control: ArmFit,
    pub intervention: ArmFit,
    pub summary: CeaSummary,
    pub dropped: usize,
}

/// Drop every row with a missing outcome, fit each arm and compute
/// increments and INB.
pub fn complete_case_analysis(
    d: &TrialDataset,
    kind: CostKind,
    opts: &FitOptions,
    grid: &LambdaGrid,
    level: f64,
) -> Result<CompleteCaseResult> {
    let cc = d.complete_cases();
    let (control, intervention) = cc.split_by_arm()?;
    for arm in [&control, &intervention] {
        let clusters = arm.rows_by_cluster().len();
        if clusters < 2 {
            return Err(Error::InvalidArgument(format!(
                "{} arm has {clusters} cluster(s) with complete cases; at least 2 are needed",
                single_arm(arm).map_or("an", |a| a.name())
            )));
        }
    }
    let (c, i) = rayon::join(|| fit_arm(&control, kind, opts), || fit_arm(&intervention, kind, opts));
    let (c, i) = (c?, i?);
    let summary = summarize(&ArmSummary::from(&c), &ArmSummary::from(&i), grid, level)?;
    Ok(CompleteCaseResult {
        control: c,
        intervention: i,
        summary,
        dropped: d.len() - cc.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn p_values_match_normal_tail() {
        let c = Coefficient::new("x", 1.959963984540054, 1.0);
        assert!((c.p - 0.05).abs() < 1e-10, "{}", c.p);
        let c = Coefficient::new("x", 0.0, 1.0);
        assert_eq!(c.p, 1.0);
        assert!(Coefficient::new("x", -40.0, 1.0).p >= 0.0);
    }
}

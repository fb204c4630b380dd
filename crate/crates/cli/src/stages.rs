//! Pipeline stages. Each stage reads its inputs from files and writes its
//! outputs under the output directory, so `run` and a chain of single
//! subcommands produce the same files.
//!
//! Layout under `--out`:
//!
//! ```text
//! data.csv, truth.csv                 simulate
//! diagnostics.csv, diagnostics.txt    diagnose
//! imputed/<strategy>/completed_<k>.csv
//! fits/<cell>.csv                     one row per imputation and arm
//! pooled/<cell>.csv                   per-arm means, SEs and correlation
//! cea/<cell>_increments.csv           increments and INB at the report λ
//! cea/<cell>_inb.csv                  INB curve
//! table_arms.csv, table_increments.csv, manifest.csv   run
//! ```
//!
//! `<cell>` is `<strategy>_<distribution>`, e.g. `ml_c_gamma`.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clustered_cea::analysis::fit_completed;
use clustered_cea::cea::{inb, summarize, write_curve_csv, ArmSummary, MiComponents};
use clustered_cea::data::{Arm, TrialDataset};
use clustered_cea::diagnostics::{complete_case_analysis, screen};
use clustered_cea::glmm::{ArmFit, CostKind};
use clustered_cea::impute::{impute_trial, Strategy};
use clustered_cea::pool::{pool, DfMethod, EstimateDraw};
use clustered_cea::sim::generate;
use clustered_cea::{Error, Result};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::config::Manifest;

/// An error tagged with the stage (and cell) it came from.
#[derive(Debug)]
pub struct StageError {
    pub stage: String,
    pub error: Error,
}

impl std::fmt::Display for StageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} failed: {}", self.stage, self.error)
    }
}

pub trait InStage<T> {
    fn stage(self, name: impl Into<String>) -> std::result::Result<T, StageError>;
}

impl<T> InStage<T> for Result<T> {
    fn stage(self, name: impl Into<String>) -> std::result::Result<T, StageError> {
        self.map_err(|error| StageError {
            stage: name.into(),
            error,
        })
    }
}

pub fn cell_name(strategy: Strategy, kind: CostKind) -> String {
    format!("{}_{}", strategy.name(), kind.name())
}

/// Create `path` (and its parents) and write the provenance header.
fn create(path: &Path, m: &Manifest) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut w = BufWriter::new(File::create(path)?);
    write!(
        w,
        "# crt-cea {} (clustered-cea {})\n# seed: {}\n# spec-sha256: {}\n",
        env!("CARGO_PKG_VERSION"),
        clustered_cea::VERSION,
        m.seed,
        m.spec_hash
    )?;
    Ok(w)
}

fn write_rows<T: Serialize>(path: &Path, m: &Manifest, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path, m)?);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn read_rows<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path)
        .map_err(|e| Error::InvalidArgument(format!("cannot open `{}`: {e}", path.display())))?;
    csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_reader(file)
        .deserialize()
        .map(|r| r.map_err(Error::from))
        .collect()
}

fn load_dataset(path: &Path) -> Result<TrialDataset> {
    TrialDataset::load_csv(path, None).map_err(|e| match e {
        Error::Io(io) => Error::InvalidArgument(format!("cannot read `{}`: {io}", path.display())),
        other => other,
    })
}

fn save_dataset(path: &Path, d: &TrialDataset, m: &Manifest) -> Result<()> {
    let mut w = create(path, m)?;
    d.write_csv(&mut w)?;
    w.flush()?;
    Ok(())
}

pub fn simulate(m: &Manifest, out: &Path) -> Result<PathBuf> {
    let (d, truth) = generate(&m.sim_config()?)?;
    let data = out.join("data.csv");
    save_dataset(&data, &d, m)?;
    let mut w = create(&out.join("truth.csv"), m)?;
    truth.write_csv(&mut w)?;
    w.flush()?;
    Ok(data)
}

pub fn diagnose(m: &Manifest, input: &Path, out: &Path) -> Result<()> {
    let d = load_dataset(input)?;
    let covariates = match &m.diagnostics.covariates {
        Some(c) => c.clone(),
        None => d.schema().names().map(str::to_string).collect(),
    };
    let report = screen(&d, &covariates, m.diagnostics.cluster_size, m.diagnostics.threshold)?;
    let mut w = create(&out.join("diagnostics.csv"), m)?;
    report.write_csv(&mut w)?;
    w.flush()?;
    let mut w = create(&out.join("diagnostics.txt"), m)?;
    w.write_all(report.to_text().as_bytes())?;
    w.flush()?;
    Ok(())
}

pub fn imputed_dir(out: &Path, strategy: Strategy) -> PathBuf {
    out.join("imputed").join(strategy.name())
}

pub fn impute(m: &Manifest, input: &Path, strategy: Strategy, out: &Path) -> Result<PathBuf> {
    if !strategy.imputes() {
        return Err(Error::InvalidArgument(format!("strategy `{strategy}` does not impute")));
    }
    let d = load_dataset(input)?;
    let set = impute_trial(&d, &strategy.apply(&m.imputation))?;
    let dir = imputed_dir(out, strategy);
    for (k, c) in set.datasets.iter().enumerate() {
        save_dataset(&dir.join(format!("completed_{}.csv", k + 1)), c, m)?;
    }
    Ok(dir)
}

/// `completed_<k>.csv` files of `dir` in order of `k`.
fn completed_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries =
        fs::read_dir(dir).map_err(|e| Error::InvalidArgument(format!("cannot list `{}`: {e}", dir.display())))?;
    let mut numbered = Vec::new();
    for e in entries {
        let path = e?.path();
        let k = path
            .file_name()
            .and_then(|n| n.to_str())
            .and_then(|n| n.strip_prefix("completed_")?.strip_suffix(".csv")?.parse::<usize>().ok());
        if let Some(k) = k {
            numbered.push((k, path));
        }
    }
    numbered.sort();
    if numbered.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "`{}` holds {} completed dataset(s); at least 2 are needed",
            dir.display(),
            numbered.len()
        )));
    }
    Ok(numbered.into_iter().map(|(_, p)| p).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitRow {
    pub strategy: Strategy,
    pub dist: CostKind,
    /// 1-based imputation number; 0 for a complete-case fit.
    pub imputation: usize,
    pub arm: Arm,
    pub mean_cost: f64,
    pub mean_qaly: f64,
    pub var_cost: f64,
    pub cov_cq: f64,
    pub var_qaly: f64,
    pub correlation_cq: f64,
    pub loglik: f64,
    pub converged: bool,
    pub iterations: usize,
    pub beta1: f64,
    pub gamma1: f64,
    pub alpha: f64,
    pub sigma_q_sq: f64,
    pub dispersion: f64,
    pub sigma_u_sq: f64,
    pub sigma_w_sq: f64,
    pub rho: f64,
}

impl FitRow {
    fn new(strategy: Strategy, imputation: usize, arm: Arm, f: &ArmFit) -> Self {
        let p = &f.params;
        FitRow {
            strategy,
            dist: p.cost_dist.kind,
            imputation,
            arm,
            mean_cost: f.mean_cost,
            mean_qaly: f.mean_qaly,
            var_cost: f.cov_means[0][0],
            cov_cq: f.cov_means[0][1],
            var_qaly: f.cov_means[1][1],
            correlation_cq: f.correlation_cq,
            loglik: f.loglik,
            converged: f.converged,
            iterations: f.iterations,
            beta1: p.beta1,
            gamma1: p.gamma1,
            alpha: p.alpha,
            sigma_q_sq: p.sigma_q_sq,
            dispersion: p.cost_dist.dispersion,
            sigma_u_sq: p.cluster_cov.sigma_u_sq,
            sigma_w_sq: p.cluster_cov.sigma_w_sq,
            rho: p.cluster_cov.rho,
        }
    }

    fn cov(&self) -> [[f64; 2]; 2] {
        [[self.var_cost, self.cov_cq], [self.cov_cq, self.var_qaly]]
    }
}

pub fn fits_path(out: &Path, strategy: Strategy, kind: CostKind) -> PathBuf {
    out.join("fits").join(format!("{}.csv", cell_name(strategy, kind)))
}

/// Fit one cost model. For `cc`, `input` is the trial CSV; otherwise it is
/// a directory of completed datasets.
pub fn fit(m: &Manifest, input: &Path, strategy: Strategy, kind: CostKind, out: &Path) -> Result<PathBuf> {
    let mut rows = Vec::new();
    if strategy.imputes() {
        let datasets = completed_files(input)?
            .iter()
            .map(|p| load_dataset(p))
            .collect::<Result<Vec<_>>>()?;
        for arm in Arm::BOTH {
            let fits = fit_completed(&datasets, arm, kind, &m.fit)?;
            rows.extend(fits.iter().enumerate().map(|(k, f)| FitRow::new(strategy, k + 1, arm, f)));
        }
    } else {
        let d = load_dataset(input)?;
        let a = m.analysis_options();
        let cc = complete_case_analysis(&d, kind, &a.fit, &a.lambda_grid, a.level)?;
        rows.push(FitRow::new(strategy, 0, Arm::Control, &cc.control));
        rows.push(FitRow::new(strategy, 0, Arm::Intervention, &cc.intervention));
    }
    let path = fits_path(out, strategy, kind);
    write_rows(&path, m, &rows)?;
    Ok(path)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PooledRow {
    pub strategy: Strategy,
    pub dist: CostKind,
    pub arm: Arm,
    pub mean_cost: f64,
    pub se_cost: f64,
    pub mean_qaly: f64,
    pub se_qaly: f64,
    pub correlation_cq: f64,
    pub var_cost: f64,
    pub cov_cq: f64,
    pub var_qaly: f64,
    /// Number of imputations; 0 for a complete-case fit.
    pub k: usize,
    pub within_cost: f64,
    pub within_cq: f64,
    pub within_qaly: f64,
    pub between_cost: f64,
    pub between_cq: f64,
    pub between_qaly: f64,
    pub df_cost: f64,
    pub df_qaly: f64,
    /// Complete-data degrees of freedom of the Barnard-Rubin adjustment.
    pub complete_df: Option<f64>,
}

impl PooledRow {
    fn new(strategy: Strategy, dist: CostKind, arm: Arm, s: &ArmSummary, df: [f64; 2]) -> Self {
        let zero = [[0.0; 2]; 2];
        let (k, within, between, complete_df) = match &s.mi {
            Some(mi) => (
                mi.k,
                mi.within,
                mi.between,
                match mi.df_method {
                    DfMethod::Rubin => None,
                    DfMethod::BarnardRubin { complete_df } => Some(complete_df),
                },
            ),
            None => (0, s.cov, zero, None),
        };
        PooledRow {
            strategy,
            dist,
            arm,
            mean_cost: s.mean_cost,
            se_cost: s.se_cost(),
            mean_qaly: s.mean_qaly,
            se_qaly: s.se_qaly(),
            correlation_cq: s.correlation_cq,
            var_cost: s.cov[0][0],
            cov_cq: s.cov[0][1],
            var_qaly: s.cov[1][1],
            k,
            within_cost: within[0][0],
            within_cq: within[0][1],
            within_qaly: within[1][1],
            between_cost: between[0][0],
            between_cq: between[0][1],
            between_qaly: between[1][1],
            df_cost: df[0],
            df_qaly: df[1],
            complete_df,
        }
    }

    fn summary(&self) -> ArmSummary {
        let sym = |a, b, c| [[a, b], [b, c]];
        ArmSummary {
            mean_cost: self.mean_cost,
            mean_qaly: self.mean_qaly,
            cov: sym(self.var_cost, self.cov_cq, self.var_qaly),
            correlation_cq: self.correlation_cq,
            mi: (self.k > 0).then(|| MiComponents {
                within: sym(self.within_cost, self.within_cq, self.within_qaly),
                between: sym(self.between_cost, self.between_cq, self.between_qaly),
                k: self.k,
                df_method: match self.complete_df {
                    None => DfMethod::Rubin,
                    Some(complete_df) => DfMethod::BarnardRubin { complete_df },
                },
            }),
        }
    }
}

/// The strategy and distribution shared by every row.
fn single_cell<T>(rows: &[T], key: impl Fn(&T) -> (Strategy, CostKind), path: &Path) -> Result<(Strategy, CostKind)> {
    let first = rows
        .first()
        .map(&key)
        .ok_or_else(|| Error::InvalidArgument(format!("`{}` has no rows", path.display())))?;
    if rows.iter().any(|r| key(r) != first) {
        return Err(Error::Consistency(format!(
            "`{}` mixes strategies or distributions",
            path.display()
        )));
    }
    Ok(first)
}

pub fn pooled_path(out: &Path, strategy: Strategy, kind: CostKind) -> PathBuf {
    out.join("pooled").join(format!("{}.csv", cell_name(strategy, kind)))
}

/// Rubin-pool a fits file. Complete-case fits pass through unchanged.
pub fn pool_fits_file(m: &Manifest, input: &Path, out: &Path) -> Result<PathBuf> {
    let rows: Vec<FitRow> = read_rows(input)?;
    let (strategy, kind) = single_cell(&rows, |r| (r.strategy, r.dist), input)?;
    let mut pooled = Vec::new();
    for arm in Arm::BOTH {
        let fits: Vec<&FitRow> = rows.iter().filter(|r| r.arm == arm).collect();
        match fits.as_slice() {
            [] => return Err(Error::Consistency(format!("`{}` has no {arm} rows", input.display()))),
            [f] if f.imputation == 0 => {
                let s = ArmSummary {
                    mean_cost: f.mean_cost,
                    mean_qaly: f.mean_qaly,
                    cov: f.cov(),
                    correlation_cq: f.correlation_cq,
                    mi: None,
                };
                pooled.push(PooledRow::new(strategy, kind, arm, &s, [f64::INFINITY; 2]));
            }
            _ => {
                let draws: Vec<EstimateDraw> = fits
                    .iter()
                    .map(|f| EstimateDraw {
                        estimate: vec![f.mean_cost, f.mean_qaly],
                        covariance: DMatrix::from_fn(2, 2, |i, j| f.cov()[i][j]),
                    })
                    .collect();
                let p = pool(&draws, m.analysis.df_method)?;
                let corr = fits.iter().map(|f| f.correlation_cq).sum::<f64>() / fits.len() as f64;
                let s = ArmSummary::from_pooled(&p, corr)?;
                pooled.push(PooledRow::new(strategy, kind, arm, &s, [p.df[0], p.df[1]]));
            }
        }
    }
    let path = pooled_path(out, strategy, kind);
    write_rows(&path, m, &pooled)?;
    Ok(path)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IncrementRow {
    pub strategy: Strategy,
    pub dist: CostKind,
    pub delta_c: f64,
    pub se_delta_c: f64,
    pub delta_q: f64,
    pub se_delta_q: f64,
    pub lambda: f64,
    pub inb: f64,
    pub se_inb: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub level: f64,
}

pub fn increments_path(out: &Path, strategy: Strategy, kind: CostKind) -> PathBuf {
    out.join("cea").join(format!("{}_increments.csv", cell_name(strategy, kind)))
}

pub fn curve_path(out: &Path, strategy: Strategy, kind: CostKind) -> PathBuf {
    out.join("cea").join(format!("{}_inb.csv", cell_name(strategy, kind)))
}

/// Increments, INB at the report λ and the INB curve from a pooled file.
pub fn cea(m: &Manifest, input: &Path, out: &Path) -> Result<(PathBuf, PathBuf)> {
    let rows: Vec<PooledRow> = read_rows(input)?;
    let (strategy, kind) = single_cell(&rows, |r| (r.strategy, r.dist), input)?;
    let arm = |a: Arm| {
        rows.iter()
            .find(|r| r.arm == a)
            .map(PooledRow::summary)
            .ok_or_else(|| Error::Consistency(format!("`{}` has no {a} row", input.display())))
    };
    let (control, intervention) = (arm(Arm::Control)?, arm(Arm::Intervention)?);
    let a = &m.analysis;
    let summary = summarize(&control, &intervention, &a.lambda_grid, a.level)?;
    let inc = &summary.increments;
    let at = inb(inc, a.report_lambda, a.level)?;
    let row = IncrementRow {
        strategy,
        dist: kind,
        delta_c: inc.delta_c,
        se_delta_c: inc.se_cost(),
        delta_q: inc.delta_q,
        se_delta_q: inc.se_qaly(),
        lambda: at.lambda,
        inb: at.inb,
        se_inb: at.se,
        ci_low: at.ci_low,
        ci_high: at.ci_high,
        level: a.level,
    };
    let inc_path = increments_path(out, strategy, kind);
    write_rows(&inc_path, m, &[row])?;
    let curve = curve_path(out, strategy, kind);
    let mut w = create(&curve, m)?;
    write_curve_csv(&summary.curve, &mut w)?;
    w.flush()?;
    Ok((inc_path, curve))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArmTableRow {
    pub strategy: String,
    pub dist: String,
    pub arm: Arm,
    pub mean_cost: f64,
    pub se_cost: f64,
    pub mean_qaly: f64,
    pub se_qaly: f64,
    pub correlation_cq: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IncrementTableRow {
    pub strategy: String,
    pub dist: String,
    pub delta_c: f64,
    pub se_delta_c: f64,
    pub delta_q: f64,
    pub se_delta_q: f64,
    pub lambda: f64,
    pub inb: f64,
    pub se_inb: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestRow {
    pub strategy: Strategy,
    pub dist: CostKind,
    pub status: String,
    pub completed: String,
    pub fits: String,
    pub pooled: String,
    pub increments: String,
    pub inb_curve: String,
}

fn rel(out: &Path, p: &Path) -> String {
    p.strip_prefix(out).unwrap_or(p).to_string_lossy().into_owned()
}

/// Outcome of `run`: the first error of each failed cell, in cell order.
pub struct RunReport {
    pub failures: Vec<StageError>,
}

/// Every stage for every selected strategy and distribution. A failing cell
/// is recorded in the manifest and the remaining cells still run.
pub fn run(m: &Manifest, input: Option<&Path>, out: &Path) -> std::result::Result<RunReport, StageError> {
    let data = match input {
        Some(p) => p.to_path_buf(),
        None => simulate(m, out).stage("simulate")?,
    };
    diagnose(m, &data, out).stage("diagnose")?;

    let mut failures = Vec::new();
    let mut manifest = Vec::new();
    let mut arms = Vec::new();
    let mut increments = Vec::new();
    for &strategy in &m.strategies {
        let completed = if strategy.imputes() {
            impute(m, &data, strategy, out).stage(format!("impute ({strategy})"))
        } else {
            Ok(data.clone())
        };
        for &kind in &m.distributions {
            let cell = cell_name(strategy, kind);
            let result = completed.as_ref().map_err(|e| StageError {
                stage: e.stage.clone(),
                error: if e.error.is_input_error() {
                    Error::InvalidArgument(e.error.to_string())
                } else {
                    Error::Evaluation(e.error.to_string())
                },
            });
            let result = result.and_then(|src| {
                let fits = fit(m, src, strategy, kind, out).stage(format!("fit ({cell})"))?;
                let pooled = pool_fits_file(m, &fits, out).stage(format!("pool ({cell})"))?;
                let (inc, curve) = cea(m, &pooled, out).stage(format!("cea ({cell})"))?;
                Ok((src.clone(), fits, pooled, inc, curve))
            });
            let row = match result {
                Ok((src, fits, pooled, inc, curve)) => {
                    for r in read_rows::<PooledRow>(&pooled).stage(format!("report ({cell})"))? {
                        arms.push(ArmTableRow {
                            strategy: r.strategy.label().into(),
                            dist: r.dist.label().into(),
                            arm: r.arm,
                            mean_cost: r.mean_cost,
                            se_cost: r.se_cost,
                            mean_qaly: r.mean_qaly,
                            se_qaly: r.se_qaly,
                            correlation_cq: r.correlation_cq,
                        });
                    }
                    for r in read_rows::<IncrementRow>(&inc).stage(format!("report ({cell})"))? {
                        increments.push(IncrementTableRow {
                            strategy: r.strategy.label().into(),
                            dist: r.dist.label().into(),
                            delta_c: r.delta_c,
                            se_delta_c: r.se_delta_c,
                            delta_q: r.delta_q,
                            se_delta_q: r.se_delta_q,
                            lambda: r.lambda,
                            inb: r.inb,
                            se_inb: r.se_inb,
                            ci_low: r.ci_low,
                            ci_high: r.ci_high,
                        });
                    }
                    ManifestRow {
                        strategy,
                        dist: kind,
                        status: "ok".into(),
                        completed: if strategy.imputes() { rel(out, &src) } else { String::new() },
                        fits: rel(out, &fits),
                        pooled: rel(out, &pooled),
                        increments: rel(out, &inc),
                        inb_curve: rel(out, &curve),
                    }
                }
                Err(e) => {
                    let row = ManifestRow {
                        strategy,
                        dist: kind,
                        status: format!("failed: {e}"),
                        completed: String::new(),
                        fits: String::new(),
                        pooled: String::new(),
                        increments: String::new(),
                        inb_curve: String::new(),
                    };
                    failures.push(e);
                    row
                }
            };
            manifest.push(row);
        }
    }
    write_rows(&out.join("table_arms.csv"), m, &arms).stage("report")?;
    write_rows(&out.join("table_increments.csv"), m, &increments).stage("report")?;
    write_rows(&out.join("manifest.csv"), m, &manifest).stage("report")?;
    Ok(RunReport { failures })
}

//! End-to-end analysis of one strategy × cost model cell: impute, fit each
//! completed dataset per arm, pool, and compute increments and INB.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cea::{summarize, ArmSummary, CeaSummary, LambdaGrid, DEFAULT_LEVEL};
use crate::data::{Arm, TrialDataset};
use crate::diagnostics::complete_case_analysis;
use crate::error::Result;
use crate::glmm::{fit_arm, ArmFit, CostKind, FitOptions};
use crate::impute::{impute_trial, ImputationSpec, Strategy};
use crate::pool::{pool, DfMethod, EstimateDraw, PooledEstimate};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnalysisOptions {
    pub fit: FitOptions,
    pub df_method: DfMethod,
    pub level: f64,
    pub lambda_grid: LambdaGrid,
}

impl Default for AnalysisOptions {
    fn default() -> Self {
        Self {
            fit: FitOptions::default(),
            df_method: DfMethod::default(),
            level: DEFAULT_LEVEL,
            lambda_grid: LambdaGrid::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub strategy: Strategy,
    pub kind: CostKind,
    pub control: ArmSummary,
    pub intervention: ArmSummary,
    pub cea: CeaSummary,
}

/// Fit `arm` of every completed dataset.
pub fn fit_completed(datasets: &[TrialDataset], arm: Arm, kind: CostKind, opts: &FitOptions) -> Result<Vec<ArmFit>> {
    datasets
        .par_iter()
        .map(|d| fit_arm(&d.arm_subset(arm), kind, opts))
        .collect()
}

/// Rubin-pooled `(mean cost, mean QALY)` of per-imputation fits.
pub fn pool_fits(fits: &[ArmFit], df_method: DfMethod) -> Result<PooledEstimate> {
    let draws: Vec<EstimateDraw> = fits
        .iter()
        .map(|f| EstimateDraw {
            estimate: vec![f.mean_cost, f.mean_qaly],
            covariance: DMatrix::from_fn(2, 2, |i, j| f.cov_means[i][j]),
        })
        .collect();
    pool(&draws, df_method)
}

/// Pooled arm summary; the cost-QALY correlation is averaged over fits.
pub fn pooled_summary(fits: &[ArmFit], df_method: DfMethod) -> Result<ArmSummary> {
    let p = pool_fits(fits, df_method)?;
    let corr = fits.iter().map(|f| f.correlation_cq).sum::<f64>() / fits.len() as f64;
    ArmSummary::from_pooled(&p, corr)
}

/// Per-arm summaries from completed datasets.
pub fn analyse_completed(
    datasets: &[TrialDataset],
    kind: CostKind,
    opts: &AnalysisOptions,
) -> Result<(ArmSummary, ArmSummary)> {
    let c = fit_completed(datasets, Arm::Control, kind, &opts.fit)?;
    let i = fit_completed(datasets, Arm::Intervention, kind, &opts.fit)?;
    Ok((pooled_summary(&c, opts.df_method)?, pooled_summary(&i, opts.df_method)?))
}

/// Run one strategy with one cost model. `base` supplies the auxiliaries,
/// chain settings and seed; the strategy sets the multilevel and
/// cluster-size flags.
pub fn analyse(
    d: &TrialDataset,
    strategy: Strategy,
    kind: CostKind,
    base: &ImputationSpec,
    opts: &AnalysisOptions,
) -> Result<CellResult> {
    let (control, intervention) = if strategy.imputes() {
        let set = impute_trial(d, &strategy.apply(base))?;
        analyse_completed(&set.datasets, kind, opts)?
    } else {
        let cc = complete_case_analysis(d, kind, &opts.fit, &opts.lambda_grid, opts.level)?;
        ((&cc.control).into(), (&cc.intervention).into())
    };
    Ok(CellResult {
        strategy,
        kind,
        cea: summarize(&control, &intervention, &opts.lambda_grid, opts.level)?,
        control,
        intervention,
    })
}

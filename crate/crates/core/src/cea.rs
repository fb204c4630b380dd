//! Incremental cost, incremental QALYs and incremental net benefit.

use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal, StudentsT};

use crate::error::{Error, Result};
use crate::glmm::ArmFit;
use crate::pool::{DfMethod, PooledEstimate};

pub const DEFAULT_LEVEL: f64 = 0.95;

/// Within- and between-imputation covariance of `(mean cost, mean QALY)`
/// for one arm, kept so that degrees of freedom can be computed for any
/// linear combination.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MiComponents {
    pub within: [[f64; 2]; 2],
    pub between: [[f64; 2]; 2],
    pub k: usize,
    pub df_method: DfMethod,
}

impl MiComponents {
    fn df(&self, c: [f64; 2]) -> f64 {
        let pooled = PooledEstimate {
            point: vec![0.0; 2],
            total_cov: nalgebra::DMatrix::zeros(2, 2),
            within: to_dmatrix(&self.within),
            between: to_dmatrix(&self.between),
            df: vec![],
            k: self.k,
            df_method: self.df_method,
        };
        pooled.linear_df(&c)
    }
}

fn to_dmatrix(m: &[[f64; 2]; 2]) -> nalgebra::DMatrix<f64> {
    nalgebra::DMatrix::from_row_slice(2, 2, &[m[0][0], m[0][1], m[1][0], m[1][1]])
}

fn to_array(m: &nalgebra::DMatrix<f64>) -> [[f64; 2]; 2] {
    [[m[(0, 0)], m[(0, 1)]], [m[(1, 0)], m[(1, 1)]]]
}

/// Per-arm means with their covariance, from a complete-data fit or pooled
/// over imputations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArmSummary {
    pub mean_cost: f64,
    pub mean_qaly: f64,
    pub cov: [[f64; 2]; 2],
    pub correlation_cq: f64,
    pub mi: Option<MiComponents>,
}

impl ArmSummary {
    pub fn se_cost(&self) -> f64 {
        self.cov[0][0].sqrt()
    }

    pub fn se_qaly(&self) -> f64 {
        self.cov[1][1].sqrt()
    }
}

impl From<&ArmFit> for ArmSummary {
    fn from(f: &ArmFit) -> Self {
        ArmSummary {
            mean_cost: f.mean_cost,
            mean_qaly: f.mean_qaly,
            cov: f.cov_means,
            correlation_cq: f.correlation_cq,
            mi: None,
        }
    }
}

impl ArmSummary {
    /// From a pooled `(mean cost, mean QALY)` estimate. `correlation_cq`
    /// is supplied by the caller (usually the average over imputations).
    pub fn from_pooled(p: &PooledEstimate, correlation_cq: f64) -> Result<Self> {
        if p.point.len() != 2 {
            return Err(Error::InvalidArgument(format!(
                "expected a pooled (cost, QALY) pair, got dimension {}",
                p.point.len()
            )));
        }
        Ok(ArmSummary {
            mean_cost: p.point[0],
            mean_qaly: p.point[1],
            cov: to_array(&p.total_cov),
            correlation_cq,
            mi: Some(MiComponents {
                within: to_array(&p.within),
                between: to_array(&p.between),
                k: p.k,
                df_method: p.df_method,
            }),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Increments {
    pub delta_c: f64,
    pub delta_q: f64,
    pub cov: [[f64; 2]; 2],
    /// Imputation components of (control, intervention), when pooled.
    pub mi: Option<[MiComponents; 2]>,
}

impl Increments {
    pub fn se_cost(&self) -> f64 {
        self.cov[0][0].sqrt()
    }

    pub fn se_qaly(&self) -> f64 {
        self.cov[1][1].sqrt()
    }

    /// Degrees of freedom of the reference distribution for INB at `lambda`:
    /// the smaller of the two arms' Rubin degrees of freedom for
    /// `λ·μ_Q − μ_C`, or infinity for complete-data fits.
    pub fn inb_df(&self, lambda: f64) -> f64 {
        match &self.mi {
            None => f64::INFINITY,
            Some([a, b]) => a.df([-1.0, lambda]).min(b.df([-1.0, lambda])),
        }
    }
}

/// Intervention minus control. Arms are independent, so covariances add.
pub fn increments(control: &ArmSummary, intervention: &ArmSummary) -> Increments {
    let mut cov = [[0.0; 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            cov[i][j] = control.cov[i][j] + intervention.cov[i][j];
        }
    }
    let mi = match (control.mi, intervention.mi) {
        (Some(a), Some(b)) => Some([a, b]),
        _ => None,
    };
    Increments {
        delta_c: intervention.mean_cost - control.mean_cost,
        delta_q: intervention.mean_qaly - control.mean_qaly,
        cov,
        mi,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InbPoint {
    pub lambda: f64,
    pub inb: f64,
    pub se: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

fn check_level(level: f64) -> Result<()> {
    if level > 0.0 && level < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("confidence level must be in (0, 1), got {level}")))
    }
}

/// Two-sided critical value; Student t when `df` is finite.
pub fn critical_value(level: f64, df: f64) -> Result<f64> {
    check_level(level)?;
    let p = 0.5 + level / 2.0;
    if df.is_finite() {
        let t = StudentsT::new(0.0, 1.0, df).map_err(|e| Error::InvalidArgument(format!("t quantile: {e}")))?;
        Ok(t.inverse_cdf(p))
    } else {
        Ok(Normal::standard().inverse_cdf(p))
    }
}

/// `INB(λ) = λ δ_Q − δ_C` with its standard error and confidence interval.
pub fn inb(inc: &Increments, lambda: f64, level: f64) -> Result<InbPoint> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "willingness to pay must be a non-negative number, got {lambda}"
        )));
    }
    let value = lambda * inc.delta_q - inc.delta_c;
    let var = lambda * lambda * inc.cov[1][1] + inc.cov[0][0] - 2.0 * lambda * inc.cov[0][1];
    let se = var.max(0.0).sqrt();
    let z = critical_value(level, inc.inb_df(lambda))?;
    Ok(InbPoint {
        lambda,
        inb: value,
        se,
        ci_low: value - z * se,
        ci_high: value + z * se,
    })
}

pub fn inb_curve(inc: &Increments, grid: &LambdaGrid, level: f64) -> Result<Vec<InbPoint>> {
    grid.values().iter().map(|&l| inb(inc, l, level)).collect()
}

/// Ascending, non-negative willingness-to-pay values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct LambdaGrid {
    values: Vec<f64>,
    spec: String,
}

impl LambdaGrid {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidArgument("lambda grid is empty".into()));
        }
        if values.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::InvalidArgument("lambda values must be non-negative".into()));
        }
        if values.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidArgument("lambda grid must be strictly ascending".into()));
        }
        let spec = values.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",");
        Ok(Self { values, spec })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

impl Default for LambdaGrid {
    fn default() -> Self {
        "0:50000:1000".parse().expect("valid default grid")
    }
}

impl FromStr for LambdaGrid {
    type Err = Error;

    /// `start:stop:step` (inclusive of `stop`) or a comma-separated list.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let num = |t: &str| {
            t.trim()
                .parse::<f64>()
                .map_err(|_| Error::InvalidArgument(format!("bad lambda value `{t}` in `{s}`")))
        };
        let mut grid = if s.contains(':') {
            let parts: Vec<&str> = s.split(':').collect();
            if parts.len() != 3 {
                return Err(Error::InvalidArgument(format!("lambda range `{s}` is not start:stop:step")));
            }
            let (a, b, h) = (num(parts[0])?, num(parts[1])?, num(parts[2])?);
            if !(h > 0.0) || b < a {
                return Err(Error::InvalidArgument(format!("invalid lambda range `{s}`")));
            }
            let n = ((b - a) / h + 1e-9).floor() as usize;
            LambdaGrid::new((0..=n).map(|i| a + i as f64 * h).collect())?
        } else {
            LambdaGrid::new(s.split(',').map(num).collect::<Result<_>>()?)?
        };
        grid.spec = s.to_string();
        Ok(grid)
    }
}

impl TryFrom<String> for LambdaGrid {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<LambdaGrid> for String {
    fn from(g: LambdaGrid) -> String {
        g.spec
    }
}

/// Increments plus the INB curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CeaSummary {
    pub increments: Increments,
    pub level: f64,
    pub curve: Vec<InbPoint>,
}

pub fn summarize(control: &ArmSummary, intervention: &ArmSummary, grid: &LambdaGrid, level: f64) -> Result<CeaSummary> {
    let inc = increments(control, intervention);
    Ok(CeaSummary {
        curve: inb_curve(&inc, grid, level)?,
        increments: inc,
        level,
    })
}

/// CSV with columns `lambda, inb, se, ci_low, ci_high`.
pub fn write_curve_csv<W: Write>(points: &[InbPoint], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["lambda", "inb", "se", "ci_low", "ci_high"])?;
    for p in points {
        w.write_record([
            p.lambda.to_string(),
            p.inb.to_string(),
            p.se.to_string(),
            p.ci_low.to_string(),
            p.ci_high.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

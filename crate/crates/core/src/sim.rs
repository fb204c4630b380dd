//! Synthetic two-arm cluster-randomized trials with known truth.
//!
//! Cluster effects are bivariate Normal, costs follow the configured
//! distribution around `β₁ + u_i` and QALYs are Normal around
//! `γ₁ + α c + w_i`. Cluster sizes may be linked to `u_i`, and outcomes
//! can be masked completely at random or through a logistic model in the
//! fully observed covariates and cluster size.

use std::io::Write;
use std::path::Path;

use rand::Rng as _;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::data::{Arm, ClusterInfo, CovariateKind, CovariateSchema, Participant, TrialDataset};
use crate::error::{Error, Result};
use crate::glmm::{ArmParams, CostDistribution, CostKind};
use crate::rng::{rng_from, Rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "law", rename_all = "snake_case")]
pub enum ClusterSizeLaw {
    Fixed { n: usize },
    Uniform { min: usize, max: usize },
    /// `min + round((max − min)·(s·Φ(u/σ_u) + (1 − s)·U))` with `U`
    /// uniform, so larger cost effects give larger clusters when the
    /// strength `s` is positive.
    Informative { min: usize, max: usize, strength: f64 },
}

impl ClusterSizeLaw {
    fn validate(&self) -> Result<()> {
        let ok = match *self {
            ClusterSizeLaw::Fixed { n } => n >= 1,
            ClusterSizeLaw::Uniform { min, max } => min >= 1 && min <= max,
            ClusterSizeLaw::Informative { min, max, strength } => {
                min >= 1 && min <= max && (0.0..=1.0).contains(&strength)
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("invalid cluster-size law {self:?}")))
        }
    }

    fn draw(&self, u: f64, sigma_u: f64, rng: &mut Rng) -> usize {
        match *self {
            ClusterSizeLaw::Fixed { n } => n,
            ClusterSizeLaw::Uniform { min, max } => rng.random_range(min..=max),
            ClusterSizeLaw::Informative { min, max, strength } => {
                let q = if sigma_u > 0.0 {
                    Normal::standard().cdf(u / sigma_u)
                } else {
                    0.5
                };
                let v: f64 = rng.random();
                let frac = strength * q + (1.0 - strength) * v;
                min + ((max - min) as f64 * frac).round() as usize
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "law", rename_all = "snake_case")]
pub enum CovariateLaw {
    Normal { mean: f64, sd: f64 },
    Bernoulli { p: f64 },
    /// Integer-valued, uniform on `min..=max` (age-like).
    Integer { min: i64, max: i64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariateSpec {
    pub name: String,
    #[serde(flatten)]
    pub law: CovariateLaw,
}

impl CovariateSpec {
    fn kind(&self) -> CovariateKind {
        match self.law {
            CovariateLaw::Normal { .. } => CovariateKind::Continuous,
            CovariateLaw::Bernoulli { .. } => CovariateKind::Binary,
            CovariateLaw::Integer { .. } => CovariateKind::Ordinal,
        }
    }

    fn draw(&self, rng: &mut Rng) -> f64 {
        match self.law {
            CovariateLaw::Normal { mean, sd } => {
                let z: f64 = StandardNormal.sample(rng);
                mean + sd * z
            }
            CovariateLaw::Bernoulli { p } => f64::from(u8::from(rng.random::<f64>() < p)),
            CovariateLaw::Integer { min, max } => rng.random_range(min..=max) as f64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "mechanism", rename_all = "snake_case")]
pub enum Missingness {
    #[default]
    None,
    Mcar { rate: f64 },
    /// `logit P(missing) = intercept + Σ slope·x + size_slope·n_i` on the
    /// raw covariate values.
    Mar {
        intercept: f64,
        #[serde(default)]
        slopes: Vec<(String, f64)>,
        #[serde(default)]
        size_slope: f64,
    },
}

impl Missingness {
    fn validate(&self, covariates: &[CovariateSpec]) -> Result<()> {
        match self {
            Missingness::None => Ok(()),
            Missingness::Mcar { rate } => {
                if (0.0..1.0).contains(rate) {
                    Ok(())
                } else {
                    Err(Error::InvalidArgument(format!("MCAR rate must be in [0, 1), got {rate}")))
                }
            }
            Missingness::Mar { slopes, .. } => {
                for (name, _) in slopes {
                    if !covariates.iter().any(|c| &c.name == name) {
                        return Err(Error::InvalidArgument(format!(
                            "missingness slope on unknown covariate `{name}`"
                        )));
                    }
                }
                Ok(())
            }
        }
    }

    fn probability(&self, covariates: &[CovariateSpec], x: &[f64], size: usize) -> f64 {
        match self {
            Missingness::None => 0.0,
            Missingness::Mcar { rate } => *rate,
            Missingness::Mar {
                intercept,
                slopes,
                size_slope,
            } => {
                let mut eta = intercept + size_slope * size as f64;
                for (name, b) in slopes {
                    let k = covariates.iter().position(|c| &c.name == name).expect("validated");
                    eta += b * x[k];
                }
                1.0 / (1.0 + (-eta).exp())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmSimConfig {
    pub clusters: usize,
    pub cluster_size: ClusterSizeLaw,
    pub params: ArmParams,
    #[serde(default)]
    pub cost_missing: Missingness,
    #[serde(default)]
    pub qaly_missing: Missingness,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub seed: u64,
    #[serde(default)]
    pub covariates: Vec<CovariateSpec>,
    pub control: ArmSimConfig,
    pub intervention: ArmSimConfig,
}

impl SimConfig {
    pub fn arm(&self, arm: Arm) -> &ArmSimConfig {
        match arm {
            Arm::Control => &self.control,
            Arm::Intervention => &self.intervention,
        }
    }

    pub fn arm_mut(&mut self, arm: Arm) -> &mut ArmSimConfig {
        match arm {
            Arm::Control => &mut self.control,
            Arm::Intervention => &mut self.intervention,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for arm in Arm::BOTH {
            let a = self.arm(arm);
            if a.clusters < 2 {
                return Err(Error::InvalidArgument(format!(
                    "{arm} arm needs at least 2 clusters, got {}",
                    a.clusters
                )));
            }
            a.cluster_size.validate()?;
            a.params.validate()?;
            a.cost_missing.validate(&self.covariates)?;
            a.qaly_missing.validate(&self.covariates)?;
        }
        Ok(())
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: SimConfig =
            toml::from_str(s).map_err(|e| Error::InvalidArgument(format!("simulation config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Realised cluster effects and sizes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterTruth {
    pub cluster_id: String,
    pub arm: Arm,
    pub size: usize,
    pub u: f64,
    pub w: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Truth {
    pub control: ArmParams,
    pub intervention: ArmParams,
    pub clusters: Vec<ClusterTruth>,
}

impl Truth {
    pub fn arm(&self, arm: Arm) -> &ArmParams {
        match arm {
            Arm::Control => &self.control,
            Arm::Intervention => &self.intervention,
        }
    }

    /// True incremental cost and QALYs.
    pub fn increments(&self) -> (f64, f64) {
        (
            self.intervention.mean_cost() - self.control.mean_cost(),
            self.intervention.mean_qaly() - self.control.mean_qaly(),
        )
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["cluster_id", "arm", "size", "u", "w", "mean_cost", "mean_qaly"])?;
        for c in &self.clusters {
            let p = self.arm(c.arm);
            w.write_record([
                c.cluster_id.clone(),
                c.arm.code().to_string(),
                c.size.to_string(),
                c.u.to_string(),
                c.w.to_string(),
                p.mean_cost().to_string(),
                p.mean_qaly().to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_csv<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }
}

fn cluster_id(arm: Arm, i: usize) -> String {
    let prefix = match arm {
        Arm::Control => "ctl",
        Arm::Intervention => "int",
    };
    format!("{prefix}-{:03}", i + 1)
}

/// Draw `(u, w)`. For positive-support costs the pair is redrawn until
/// `β₁ + u > 0`.
fn draw_effects(p: &ArmParams, rng: &mut Rng) -> (f64, f64) {
    let [l00, l10, l11] = p.cluster_cov.cholesky();
    loop {
        let z1: f64 = StandardNormal.sample(rng);
        let z2: f64 = StandardNormal.sample(rng);
        let u = l00 * z1;
        let w = l10 * z1 + l11 * z2;
        if !p.cost_dist.kind.positive_support() || p.beta1 + u > 0.0 {
            return (u, w);
        }
    }
}

/// One cost with conditional mean `mu`. Normal costs below zero are
/// redrawn, since costs are non-negative amounts.
fn draw_cost(dist: &CostDistribution, mu: f64, rng: &mut Rng) -> f64 {
    match dist.kind {
        CostKind::Normal => loop {
            let z: f64 = StandardNormal.sample(rng);
            let c = mu + dist.dispersion.sqrt() * z;
            if c >= 0.0 {
                return c;
            }
        },
        CostKind::Gamma => Gamma::new(dist.dispersion, mu / dist.dispersion)
            .expect("validated parameters")
            .sample(rng),
        CostKind::Lognormal => {
            let s2 = dist.dispersion.ln_1p();
            let z: f64 = StandardNormal.sample(rng);
            (mu.ln() - 0.5 * s2 + s2.sqrt() * z).exp()
        }
    }
}

/// Generate a dataset and its truth record.
pub fn generate(cfg: &SimConfig) -> Result<(TrialDataset, Truth)> {
    cfg.validate()?;
    let schema = CovariateSchema::new(cfg.covariates.iter().map(|c| (c.name.clone(), c.kind())).collect());
    let mut participants = Vec::new();
    let mut clusters = Vec::new();
    let mut truth = Vec::new();
    for arm in Arm::BOTH {
        let a = cfg.arm(arm);
        let p = &a.params;
        let mut rng = rng_from(cfg.seed, u64::from(arm.code()));
        let sigma_u = p.cluster_cov.sigma_u_sq.sqrt();
        for i in 0..a.clusters {
            let id = cluster_id(arm, i);
            let (u, w) = draw_effects(p, &mut rng);
            let size = a.cluster_size.draw(u, sigma_u, &mut rng);
            for _ in 0..size {
                let x: Vec<f64> = cfg.covariates.iter().map(|c| c.draw(&mut rng)).collect();
                let c = draw_cost(&p.cost_dist, p.beta1 + u, &mut rng);
                let z: f64 = StandardNormal.sample(&mut rng);
                let q = p.gamma1 + p.alpha * c + w + p.sigma_q_sq.sqrt() * z;
                let miss_c = rng.random::<f64>() < a.cost_missing.probability(&cfg.covariates, &x, size);
                let miss_q = rng.random::<f64>() < a.qaly_missing.probability(&cfg.covariates, &x, size);
                participants.push(Participant {
                    cluster_id: id.clone(),
                    arm,
                    cost: (!miss_c).then_some(c),
                    qaly: (!miss_q).then_some(q),
                    covariates: x,
                });
            }
            clusters.push(ClusterInfo {
                cluster_id: id.clone(),
                size,
                arm,
            });
            truth.push(ClusterTruth {
                cluster_id: id,
                arm,
                size,
                u,
                w,
            });
        }
    }
    let d = TrialDataset::new(participants, clusters, schema)?;
    Ok((
        d,
        Truth {
            control: cfg.control.params,
            intervention: cfg.intervention.params,
            clusters: truth,
        },
    ))
}

/// Cost-effect variance `σ_u²` giving a target cost ICC, where the ICC is
/// `σ_u² / (σ_u² + E[Var(C | u)])`.
pub fn sigma_u_sq_for_icc(icc: f64, dist: &CostDistribution, beta1: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&icc) {
        return Err(Error::InvalidArgument(format!("ICC must be in [0, 1), got {icc}")));
    }
    let eta = dist.dispersion;
    let b2 = beta1 * beta1;
    let v = match dist.kind {
        CostKind::Normal => icc * eta / (1.0 - icc),
        CostKind::Gamma => icc * b2 / (eta * (1.0 - icc) - icc),
        CostKind::Lognormal => icc * b2 * eta / (1.0 - icc * (1.0 + eta)),
    };
    if v.is_finite() && v >= 0.0 {
        Ok(v)
    } else {
        Err(Error::InvalidArgument(format!(
            "ICC {icc} is unattainable with {} dispersion {eta}",
            dist.kind
        )))
    }
}

/// One-way ANOVA estimate of the intra-cluster correlation.
pub fn anova_icc(groups: &[Vec<f64>]) -> f64 {
    let k = groups.len() as f64;
    let n: f64 = groups.iter().map(|g| g.len() as f64).sum();
    let grand = groups.iter().flatten().sum::<f64>() / n;
    let (mut ssb, mut ssw) = (0.0, 0.0);
    for g in groups {
        let m = g.iter().sum::<f64>() / g.len() as f64;
        ssb += g.len() as f64 * (m - grand).powi(2);
        ssw += g.iter().map(|x| (x - m).powi(2)).sum::<f64>();
    }
    let msb = ssb / (k - 1.0);
    let msw = ssw / (n - k);
    let n0 = (n - groups.iter().map(|g| (g.len() as f64).powi(2)).sum::<f64>() / n) / (k - 1.0);
    let between = (msb - msw) / n0;
    between / (between + msw)
}

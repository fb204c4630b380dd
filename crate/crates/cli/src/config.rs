//! Run manifest: a TOML file with one section per stage.
//!
//! ```toml
//! seed = 42
//! strategies = ["cc", "ml", "ml_c"]
//! distributions = ["gamma"]
//!
//! [simulate]      # synthetic trial, same keys as `SimConfig` without `seed`
//! [diagnostics]   # covariates, cluster_size, threshold
//! [imputation]    # `ImputationSpec` without `seed`
//! [fit]           # `FitOptions`
//! [analysis]      # df_method, level, lambda_grid, report_lambda
//! ```

use clustered_cea::analysis::AnalysisOptions;
use clustered_cea::cea::{LambdaGrid, DEFAULT_LEVEL};
use clustered_cea::glmm::{CostKind, FitOptions};
use clustered_cea::impute::{ImputationSpec, Strategy};
use clustered_cea::pool::DfMethod;
use clustered_cea::sim::SimConfig;
use clustered_cea::{Error, Result};
use serde::Deserialize;
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiagnosticsConfig {
    /// Covariates to screen; all dataset covariates when absent.
    pub covariates: Option<Vec<String>>,
    pub cluster_size: bool,
    pub threshold: f64,
}

impl Default for DiagnosticsConfig {
    fn default() -> Self {
        Self {
            covariates: None,
            cluster_size: true,
            threshold: clustered_cea::diagnostics::DEFAULT_THRESHOLD,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisConfig {
    pub df_method: DfMethod,
    pub level: f64,
    pub lambda_grid: LambdaGrid,
    /// Willingness to pay for the increments table.
    pub report_lambda: f64,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            df_method: DfMethod::default(),
            level: DEFAULT_LEVEL,
            lambda_grid: LambdaGrid::default(),
            report_lambda: 20000.0,
        }
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct ManifestFile {
    seed: Option<u64>,
    strategies: Option<Vec<Strategy>>,
    distributions: Option<Vec<CostKind>>,
    simulate: Option<toml::Table>,
    diagnostics: DiagnosticsConfig,
    imputation: Option<toml::Table>,
    fit: FitOptions,
    analysis: AnalysisConfig,
}

/// Resolved settings for one invocation: the manifest file merged with
/// command-line overrides.
#[derive(Debug, Clone)]
pub struct Manifest {
    pub seed: u64,
    pub spec_hash: String,
    pub strategies: Vec<Strategy>,
    pub distributions: Vec<CostKind>,
    simulate: Option<toml::Table>,
    pub diagnostics: DiagnosticsConfig,
    pub imputation: ImputationSpec,
    pub fit: FitOptions,
    pub analysis: AnalysisConfig,
}

#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub strategies: Option<Vec<Strategy>>,
    pub distributions: Option<Vec<CostKind>>,
    pub lambda_grid: Option<LambdaGrid>,
}

fn invalid(what: &str, e: impl std::fmt::Display) -> Error {
    Error::InvalidArgument(format!("{what}: {e}"))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

impl Manifest {
    /// Parse manifest text (empty for defaults) and apply overrides.
    pub fn from_str(text: &str, overrides: &Overrides) -> Result<Self> {
        let file: ManifestFile = toml::from_str(text).map_err(|e| invalid("manifest", e))?;
        let seed = overrides.seed.or(file.seed).unwrap_or(0);
        let mut imputation: ImputationSpec = match file.imputation {
            Some(t) => t.try_into().map_err(|e| invalid("[imputation]", e))?,
            None => ImputationSpec::default(),
        };
        imputation.seed = seed;
        imputation.validate()?;
        let mut analysis = file.analysis;
        if let Some(g) = &overrides.lambda_grid {
            analysis.lambda_grid = g.clone();
        }
        let m = Manifest {
            seed,
            spec_hash: sha256_hex(text.as_bytes()),
            strategies: overrides
                .strategies
                .clone()
                .or(file.strategies)
                .unwrap_or_else(|| Strategy::ALL.to_vec()),
            distributions: overrides
                .distributions
                .clone()
                .or(file.distributions)
                .unwrap_or_else(|| CostKind::ALL.to_vec()),
            simulate: file.simulate,
            diagnostics: file.diagnostics,
            imputation,
            fit: file.fit,
            analysis,
        };
        if m.strategies.is_empty() || m.distributions.is_empty() {
            return Err(Error::InvalidArgument("no strategy or no distribution selected".into()));
        }
        Ok(m)
    }

    pub fn load(path: Option<&std::path::Path>, overrides: &Overrides) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p)
                .map_err(|e| invalid(&format!("cannot read spec `{}`", p.display()), e))?,
            None => String::new(),
        };
        Self::from_str(&text, overrides)
    }

    /// The `[simulate]` section with the run seed.
    pub fn sim_config(&self) -> Result<SimConfig> {
        let mut t = self
            .simulate
            .clone()
            .ok_or_else(|| Error::InvalidArgument("the spec has no [simulate] section".into()))?;
        if t.contains_key("seed") {
            return Err(Error::InvalidArgument(
                "set the seed at the top level of the spec, not in [simulate]".into(),
            ));
        }
        t.insert("seed".into(), toml::Value::Integer(self.seed as i64));
        let cfg: SimConfig = t.try_into().map_err(|e| invalid("[simulate]", e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn analysis_options(&self) -> AnalysisOptions {
        AnalysisOptions {
            fit: self.fit.clone(),
            df_method: self.analysis.df_method,
            level: self.analysis.level,
            lambda_grid: self.analysis.lambda_grid.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_manifest_uses_defaults() {
        let m = Manifest::from_str("", &Overrides::default()).unwrap();
        assert_eq!(m.strategies.len(), 5);
        assert_eq!(m.distributions.len(), 3);
        assert_eq!(m.seed, 0);
        assert_eq!(m.imputation.k, 5);
        assert!(m.sim_config().is_err());
    }

    #[test]
    fn overrides_win_and_seed_reaches_every_stage() {
        let text = r#"
seed = 3
strategies = ["ml"]

[imputation]
k = 2
burn_in = 10
spacing = 5

[simulate.control]
clusters = 4
cluster_size = { law = "fixed", n = 5 }
params = { beta1 = 270.0, gamma1 = 0.02, alpha = 0.0, sigma_q_sq = 1e-4, cost_dist = { kind = "gamma", dispersion = 4.0 }, cluster_cov = { sigma_u_sq = 100.0, sigma_w_sq = 1e-6, rho = 0.0 } }

[simulate.intervention]
clusters = 4
cluster_size = { law = "fixed", n = 5 }
params = { beta1 = 260.0, gamma1 = 0.02, alpha = 0.0, sigma_q_sq = 1e-4, cost_dist = { kind = "gamma", dispersion = 4.0 }, cluster_cov = { sigma_u_sq = 100.0, sigma_w_sq = 1e-6, rho = 0.0 } }
"#;
        let o = Overrides {
            seed: Some(11),
            distributions: Some(vec![CostKind::Gamma]),
            ..Default::default()
        };
        let m = Manifest::from_str(text, &o).unwrap();
        assert_eq!(m.seed, 11);
        assert_eq!(m.imputation.seed, 11);
        assert_eq!(m.sim_config().unwrap().seed, 11);
        assert_eq!(m.strategies, vec![Strategy::Ml]);
        assert_eq!(m.distributions, vec![CostKind::Gamma]);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(Manifest::from_str("sede = 1", &Overrides::default()).is_err());
        assert!(Manifest::from_str("[analysis]\nlevle = 0.9", &Overrides::default()).is_err());
    }

    #[test]
    fn spec_hash_is_sha256() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }
}

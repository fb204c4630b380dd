use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::Arm;
use crate::error::{Error, Result};

/// Arm-specific auxiliary settings; unset fields fall back to the shared
/// values.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArmOverride {
    pub auxiliaries: Option<Vec<String>>,
    pub cluster_size: Option<bool>,
}

/// Imputation model for the responses `(log cost, QALY)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ImputationSpec {
    /// Include cluster random intercepts.
    pub multilevel: bool,
    /// Individual-level covariates used as predictors.
    pub auxiliaries: Vec<String>,
    /// Add the randomised cluster size as a predictor.
    pub cluster_size: bool,
    pub k: usize,
    pub burn_in: usize,
    pub spacing: usize,
    pub seed: u64,
    pub control: Option<ArmOverride>,
    pub intervention: Option<ArmOverride>,
}

impl Default for ImputationSpec {
    fn default() -> Self {
        Self {
            multilevel: true,
            auxiliaries: Vec::new(),
            cluster_size: false,
            k: 5,
            burn_in: 1000,
            spacing: 500,
            seed: 0,
            control: None,
            intervention: None,
        }
    }
}

impl ImputationSpec {
    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(Error::InvalidArgument(format!("k must be at least 2, got {}", self.k)));
        }
        if self.spacing == 0 {
            return Err(Error::InvalidArgument("spacing must be positive".into()));
        }
        Ok(())
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let spec: ImputationSpec =
            toml::from_str(s).map_err(|e| Error::InvalidArgument(format!("imputation spec: {e}")))?;
        spec.validate()?;
        Ok(spec)
    }

    fn arm_override(&self, arm: Arm) -> Option<&ArmOverride> {
        match arm {
            Arm::Control => self.control.as_ref(),
            Arm::Intervention => self.intervention.as_ref(),
        }
    }

    /// Auxiliary covariates used for `arm`.
    pub fn auxiliaries_for(&self, arm: Arm) -> &[String] {
        self.arm_override(arm)
            .and_then(|o| o.auxiliaries.as_deref())
            .unwrap_or(&self.auxiliaries)
    }

    pub fn cluster_size_for(&self, arm: Arm) -> bool {
        self.arm_override(arm)
            .and_then(|o| o.cluster_size)
            .unwrap_or(self.cluster_size)
    }

    /// MCMC iteration numbers (1-based) at which states are retained.
    pub fn draw_indices(&self) -> Vec<usize> {
        (1..=self.k).map(|j| self.burn_in + j * self.spacing).collect()
    }
}

/// Approach to missing outcomes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Complete cases.
    Cc,
    /// Single-level imputation.
    Sl,
    /// Single-level imputation with cluster size as an auxiliary.
    SlC,
    /// Multilevel imputation.
    Ml,
    /// Multilevel imputation with cluster size as an auxiliary.
    MlC,
}

impl Strategy {
    pub const ALL: [Strategy; 5] = [Strategy::Cc, Strategy::Sl, Strategy::SlC, Strategy::Ml, Strategy::MlC];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Cc => "cc",
            Strategy::Sl => "sl",
            Strategy::SlC => "sl_c",
            Strategy::Ml => "ml",
            Strategy::MlC => "ml_c",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Strategy::Cc => "CC",
            Strategy::Sl => "SL",
            Strategy::SlC => "SL-C",
            Strategy::Ml => "ML",
            Strategy::MlC => "ML-C",
        }
    }

    pub fn imputes(self) -> bool {
        self != Strategy::Cc
    }

    /// `base` with the multilevel and cluster-size settings of this
    /// strategy. Per-arm auxiliary lists are kept; per-arm cluster-size
    /// overrides are replaced.
    pub fn apply(self, base: &ImputationSpec) -> ImputationSpec {
        let mut spec = base.clone();
        let (multilevel, size) = match self {
            Strategy::Cc | Strategy::Sl => (false, false),
            Strategy::SlC => (false, true),
            Strategy::Ml => (true, false),
            Strategy::MlC => (true, true),
        };
        spec.multilevel = multilevel;
        spec.cluster_size = size;
        for o in [&mut spec.control, &mut spec.intervention].into_iter().flatten() {
            o.cluster_size = None;
        }
        spec
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace('-', "_");
        Strategy::ALL
            .into_iter()
            .find(|k| k.name() == norm)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown strategy `{s}` (cc, sl, sl_c, ml, ml_c)")))
    }
}

//! Calibrated models and their coverage certificates.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{McpError, Result};
use crate::scores::{ParamVector, PredictionSet, ScoreFamily};

/// Calibration procedure.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// Scalar split conformal on `‖r‖₂`.
    Scp1,
    /// Dimension-wise `|r_j|` thresholds with Bonferroni correction.
    ScpDim,
    /// Shape fitted on one split (sample covariance), threshold on the other.
    ScpSplitA,
    /// As `ScpSplitA` with a k-means union of ellipsoids.
    ScpSplitB,
    Remmcp,
    Relmcp,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::Scp1,
        Method::ScpDim,
        Method::ScpSplitA,
        Method::ScpSplitB,
        Method::Remmcp,
        Method::Relmcp,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Scp1 => "scp1",
            Method::ScpDim => "scp-dim",
            Method::ScpSplitA => "scp-split-a",
            Method::ScpSplitB => "scp-split-b",
            Method::Remmcp => "remmcp",
            Method::Relmcp => "relmcp",
        }
    }

    /// Whether `--score` picks the family; split conformal methods fix theirs.
    pub fn uses_score_family(&self) -> bool {
        matches!(self, Method::Remmcp | Method::Relmcp)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = McpError;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| McpError::InvalidConfig(format!("unknown method {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CertificateKind {
    Remmcp,
    Relmcp,
    Scp,
}

/// Finite-sample coverage guarantee attached to a model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Certificate {
    pub method: CertificateKind,
    pub eps_target: f64,
    /// Bound on the expected miscoverage, `k / (n_cal + 1)` for `k`
    /// discarded-or-support constraints. Absent for relaxation.
    pub expected_bound: Option<f64>,
    /// Probability that the coverage falls below `1 - eps_target`.
    pub beta: f64,
    /// Parameters `(a, b)` of the exact Beta coverage law, where it applies.
    pub beta_dist: Option<(f64, f64)>,
    /// A-posteriori miscoverage level certified with confidence `1 - beta`.
    pub eps_certified: Option<f64>,
    /// Score and cost are convex in `q`; otherwise calibration solves were
    /// only locally optimal.
    pub assumptions_convex: bool,
    /// The penalty grid was chosen adaptively from the calibration data, so
    /// the fixed-grid guarantee holds only approximately.
    pub adaptive_penalty: bool,
}

impl Certificate {
    pub fn beta_mean(&self) -> Option<f64> {
        self.beta_dist.map(|(a, b)| a / (a + b))
    }
}

/// Method-specific calibration record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum CalibrationDetails {
    Scp {
        rho: usize,
        n_reserved: usize,
        thresholds: Vec<f64>,
    },
    Remmcp {
        rho: usize,
        removed: Vec<usize>,
    },
    Relmcp {
        phi: f64,
        d: usize,
        n_eval: usize,
        i_val: usize,
    },
}

/// A score family bound to calibrated parameters, with provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibratedModel {
    pub family: ScoreFamily,
    pub q: ParamVector,
    pub method: Method,
    pub n_cal: usize,
    pub eps: f64,
    pub seed: u64,
    pub details: CalibrationDetails,
    pub certificate: Certificate,
}

impl CalibratedModel {
    pub fn prediction_set(&self) -> PredictionSet {
        PredictionSet {
            family: self.family,
            q: self.q.clone(),
        }
    }
}

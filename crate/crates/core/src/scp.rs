//! Split conformal baselines.
//!
//! - scalar SCP on `‖r‖₂` (a sphere),
//! - dimension-wise SCP on `|r_j|` at level `eps / n_y` (Bonferroni box),
//! - split variants that fit a shape on one part of the calibration data and
//!   calibrate a single scale on the reserved part: variant A fits one
//!   sample covariance, variant B a k-means union of per-cluster covariances.

use serde::{Deserialize, Serialize};

use crate::error::{McpError, Result};
use crate::model::{CalibratedModel, CalibrationDetails, Certificate, CertificateKind, Method};
use crate::numerics::kmeans::kmeans;
use crate::numerics::linalg::{tri_len, unpack_lower};
use crate::numerics::special::reg_inc_beta;
use crate::remmcp::remmcp_certificate;
use crate::residuals::ResidualSet;
use crate::rng::SeededRng;
use crate::scores::{factor_from_covariance, make_family, FamilyKind, ParamVector, PredictionSet, ScoreFamily};

/// `floor(x)` tolerant to rounding just below an integer.
pub(crate) fn floor_budget(x: f64) -> i64 {
    (x + 1e-9).floor() as i64
}

/// Outlier budget `floor(eps (n_cal + 1)) - 1`.
pub fn scp_outlier_budget(n_cal: usize, eps: f64) -> Result<usize> {
    check_eps(eps)?;
    if n_cal == 0 {
        return Err(McpError::InsufficientData("no calibration samples".into()));
    }
    let rho = floor_budget(eps * (n_cal as f64 + 1.0)) - 1;
    usize::try_from(rho).map_err(|_| {
        McpError::InsufficientData(format!(
            "outlier budget floor({eps} * ({n_cal} + 1)) - 1 = {rho} is negative; \
             need at least {} calibration samples",
            (1.0 / eps).ceil() as usize - 1
        ))
    })
}

pub(crate) fn check_eps(eps: f64) -> Result<()> {
    if !(eps > 0.0 && eps < 1.0) {
        return Err(McpError::Domain(format!("eps must lie in (0, 1), got {eps}")));
    }
    Ok(())
}

/// The `(n - rho)`-smallest score.
pub fn scp_calibrate(scores: &[f64], eps: f64) -> Result<f64> {
    let rho = scp_outlier_budget(scores.len(), eps)?;
    Ok(order_statistic(scores, scores.len() - rho))
}

/// `k`-th smallest value, 1-based.
fn order_statistic(values: &[f64], k: usize) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted[k - 1]
}

/// Per-dimension thresholds on `|r_j|` at level `eps / n_y`.
pub fn scp_dimwise_calibrate(cal: &ResidualSet, eps: f64) -> Result<Vec<f64>> {
    let n_y = cal.n_y();
    let eps_dim = eps / n_y as f64;
    (0..n_y)
        .map(|j| {
            let scores: Vec<f64> = cal.rows().map(|r| r[j].abs()).collect();
            scp_calibrate(&scores, eps_dim)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitVariant {
    A,
    B,
}

/// Outcome of split calibration.
#[derive(Debug, Clone, PartialEq)]
pub struct ScpModel {
    /// Union of ellipsoids; a single component for variant A.
    pub family: ScoreFamily,
    /// Fitted shape before threshold scaling (centers and normalised factors).
    pub fitted_shape: ParamVector,
    /// Fitted per-component sample covariances, row-major.
    pub covariances: Vec<Vec<f64>>,
    pub threshold: f64,
    pub split_fraction: f64,
    pub variant: SplitVariant,
    pub n_reserved: usize,
    pub rho: usize,
}

impl ScpModel {
    /// The calibrated set `{r : min_i d_i(r) <= threshold}` expressed as a
    /// union of unit-level ellipsoids.
    pub fn prediction_set(&self) -> PredictionSet {
        let n = self.family.n_y;
        let block = n + tri_len(n);
        let scale = 1.0 / self.threshold.sqrt();
        let mut q = self.fitted_shape.0.clone();
        for chunk in q.chunks_mut(block) {
            chunk[n..].iter_mut().for_each(|v| *v *= scale);
        }
        PredictionSet {
            family: self.family,
            q: ParamVector(q),
        }
    }
}

/// Squared Mahalanobis distance `‖Lᵀ(r - c)‖²`.
fn mahalanobis(center: &[f64], factor: &[f64], r: &[f64]) -> f64 {
    let n = center.len();
    let l = unpack_lower(factor, n);
    (0..n)
        .map(|j| {
            let v: f64 = (j..n).map(|i| l[i * n + j] * (r[i] - center[i])).sum();
            v * v
        })
        .sum()
}

/// Quantile matching the scalar SCP order statistic, falling back to the
/// maximum when the cluster is too small for a non-negative budget.
fn normalising_quantile(values: &[f64], eps: f64) -> f64 {
    let n = values.len();
    let rho = (floor_budget(eps * (n as f64 + 1.0)) - 1).max(0) as usize;
    order_statistic(values, n - rho.min(n - 1))
}

pub fn scp_split_calibrate(
    cal: &ResidualSet,
    eps: f64,
    split_fraction: f64,
    variant: SplitVariant,
    k: usize,
    seed: u64,
) -> Result<ScpModel> {
    check_eps(eps)?;
    if !(split_fraction > 0.0 && split_fraction <= 1.0) {
        return Err(McpError::Domain(format!(
            "split fraction must lie in (0, 1], got {split_fraction}"
        )));
    }
    let n = cal.len();
    let n_y = cal.n_y();
    let mut order: Vec<usize> = (0..n).collect();
    SeededRng::new(seed).shuffle(&mut order);
    let n_reserved = ((split_fraction * n as f64).ceil() as usize).min(n);
    let (reserved_idx, fit_idx) = order.split_at(n_reserved);
    if fit_idx.is_empty() {
        return Err(McpError::InsufficientData("empty fitting split".into()));
    }
    if reserved_idx.is_empty() {
        return Err(McpError::InsufficientData("empty reserved split".into()));
    }
    let rho = scp_outlier_budget(n_reserved, eps)?;
    let fit = cal.select(fit_idx);
    let reserved = cal.select(reserved_idx);

    let components = match variant {
        SplitVariant::A => 1,
        SplitVariant::B => k,
    };
    if components == 0 || components > fit.len() {
        return Err(McpError::InsufficientData(format!(
            "cannot form {components} clusters from {} fitting residuals",
            fit.len()
        )));
    }
    let (centers, members): (Vec<Vec<f64>>, Vec<Vec<usize>>) = match variant {
        SplitVariant::A => (vec![fit.mean()], vec![(0..fit.len()).collect()]),
        SplitVariant::B => {
            let clusters = kmeans(&fit, k, seed, 100)?;
            let members = (0..k)
                .map(|c| (0..fit.len()).filter(|&m| clusters.assignment[m] == c).collect())
                .collect();
            (clusters.centers, members)
        }
    };

    let mut shape = Vec::with_capacity(components * (n_y + tri_len(n_y)));
    let mut covariances = Vec::with_capacity(components);
    for (center, idx) in centers.iter().zip(&members) {
        let cluster = fit.select(idx);
        let cov = if idx.len() > 1 {
            cluster.covariance()
        } else {
            // A singleton cluster borrows the spread of the whole split.
            fit.covariance()
        };
        let mut factor = factor_from_covariance(&cov, n_y, 1.0)?;
        if variant == SplitVariant::B {
            let dists: Vec<f64> = cluster
                .rows()
                .map(|r| mahalanobis(center, &factor, r))
                .collect();
            let quantile = normalising_quantile(&dists, eps);
            if quantile > 0.0 {
                factor.iter_mut().for_each(|v| *v /= quantile.sqrt());
            }
        }
        shape.extend_from_slice(center);
        shape.extend_from_slice(&factor);
        covariances.push(cov);
    }

    let block = n_y + tri_len(n_y);
    let scores: Vec<f64> = reserved
        .rows()
        .map(|r| {
            shape
                .chunks(block)
                .map(|c| mahalanobis(&c[..n_y], &c[n_y..], r))
                .fold(f64::INFINITY, f64::min)
        })
        .collect();
    let threshold = order_statistic(&scores, n_reserved - rho);
    if !(threshold > 0.0) {
        return Err(McpError::SingularShape(
            "calibrated Mahalanobis threshold is zero".into(),
        ));
    }
    let family = make_family(FamilyKind::UnionEllipsoid { components }, n_y)?;
    Ok(ScpModel {
        family,
        fitted_shape: ParamVector(shape),
        covariances,
        threshold,
        split_fraction,
        variant,
        n_reserved,
        rho,
    })
}

/// Runs one of the split conformal methods and packages the result.
pub fn calibrate_scp(
    method: Method,
    cal: &ResidualSet,
    eps: f64,
    split_fraction: f64,
    clusters: usize,
    seed: u64,
) -> Result<CalibratedModel> {
    let n = cal.len();
    let n_y = cal.n_y();
    let (family, q, details, certificate) = match method {
        Method::Scp1 => {
            let scores: Vec<f64> = cal
                .rows()
                .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
                .collect();
            let rho = scp_outlier_budget(n, eps)?;
            let threshold = scp_calibrate(&scores, eps)?;
            let mut cert = remmcp_certificate(n, 1, rho, eps)?;
            cert.method = CertificateKind::Scp;
            (
                make_family(FamilyKind::Sphere, n_y)?,
                vec![threshold],
                CalibrationDetails::Scp {
                    rho,
                    n_reserved: n,
                    thresholds: vec![threshold],
                },
                cert,
            )
        }
        Method::ScpDim => {
            let eps_dim = eps / n_y as f64;
            let rho = scp_outlier_budget(n, eps_dim)?;
            let thresholds = scp_dimwise_calibrate(cal, eps)?;
            let marginal_beta = reg_inc_beta(1.0 - eps_dim, (n - rho) as f64, (rho + 1) as f64)?;
            let cert = Certificate {
                method: CertificateKind::Scp,
                eps_target: eps,
                expected_bound: Some(n_y as f64 * (rho + 1) as f64 / (n as f64 + 1.0)),
                beta: (n_y as f64 * marginal_beta).min(1.0),
                beta_dist: None,
                eps_certified: None,
                assumptions_convex: true,
                adaptive_penalty: false,
            };
            (
                make_family(FamilyKind::Interval, n_y)?,
                thresholds.clone(),
                CalibrationDetails::Scp {
                    rho,
                    n_reserved: n,
                    thresholds,
                },
                cert,
            )
        }
        Method::ScpSplitA | Method::ScpSplitB => {
            let variant = if method == Method::ScpSplitA {
                SplitVariant::A
            } else {
                SplitVariant::B
            };
            let fitted = scp_split_calibrate(cal, eps, split_fraction, variant, clusters, seed)?;
            let mut cert = remmcp_certificate(fitted.n_reserved, 1, fitted.rho, eps)?;
            cert.method = CertificateKind::Scp;
            let set = fitted.prediction_set();
            (
                set.family,
                set.q.0,
                CalibrationDetails::Scp {
                    rho: fitted.rho,
                    n_reserved: fitted.n_reserved,
                    thresholds: vec![fitted.threshold],
                },
                cert,
            )
        }
        Method::Remmcp | Method::Relmcp => {
            return Err(McpError::InvalidConfig(format!(
                "{method} is not a split conformal method"
            )))
        }
    };
    Ok(CalibratedModel {
        q: ParamVector::new(&family, q)?,
        family,
        method,
        n_cal: n,
        eps,
        seed,
        details,
        certificate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn budgets() {
        assert_eq!(scp_outlier_budget(2000, 0.05).unwrap(), 99);
        assert_eq!(scp_outlier_budget(500, 0.05).unwrap(), 24);
        assert_eq!(scp_outlier_budget(1000, 0.05).unwrap(), 49);
        assert!(matches!(
            scp_outlier_budget(10, 0.01),
            Err(McpError::InsufficientData(_))
        ));
    }

    #[test]
    fn thresholds() {
        assert_eq!(scp_calibrate(&[1.0, 2.0, 3.0, 4.0], 0.2).unwrap(), 4.0);
        assert_eq!(scp_calibrate(&[5.0, 1.0, 9.0, 3.0, 7.0], 0.34).unwrap(), 7.0);
        for eps in [0.2, 0.5, 0.9] {
            assert_eq!(scp_calibrate(&[2.5; 9], eps).unwrap(), 2.5);
        }
    }

    #[test]
    fn dimwise_reduces_to_scalar_in_one_dimension() {
        let vals = [0.3, -1.2, 2.2, -0.1, 0.7, 1.9, -2.5, 0.05, 1.1];
        let cal = ResidualSet::from_scalars(&vals);
        let abs: Vec<f64> = vals.iter().map(|v: &f64| v.abs()).collect();
        assert_eq!(
            scp_dimwise_calibrate(&cal, 0.2).unwrap(),
            vec![scp_calibrate(&abs, 0.2).unwrap()]
        );
    }

    #[test]
    fn dimwise_per_dimension_maxima() {
        let cal = ResidualSet::from_rows(&[[1.0, 0.0], [-1.0, 0.0], [0.0, 2.0], [0.0, -2.0]]).unwrap();
        // eps / n_y = 0.2 with n = 4 gives rho = 0.
        assert_eq!(scp_dimwise_calibrate(&cal, 0.4).unwrap(), vec![1.0, 2.0]);
    }

    #[test]
    fn full_split_fraction_leaves_nothing_to_fit() {
        let cal = ResidualSet::from_rows(&[[1.0, 0.0], [0.0, 1.0], [1.0, 1.0], [2.0, 0.5]]).unwrap();
        let err = scp_split_calibrate(&cal, 0.5, 1.0, SplitVariant::A, 1, 0).unwrap_err();
        assert!(matches!(err, McpError::InsufficientData(_)));
    }
}

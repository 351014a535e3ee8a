//! Calibration by constraint removal.
//!
//! Stage `k` minimises `J(q)` subject to `s(r_m, q) <= 0` for every residual
//! not yet removed. Between stages the support of the stage optimum (the
//! samples whose removal would move it) is removed, padded to exactly `n_q`
//! samples with the remaining samples closest to the boundary. After `rho`
//! removal stages the expected miscoverage is at most
//! `n_q (rho + 1) / (n_cal + 1)`.

use serde::{Deserialize, Serialize};

use crate::error::{McpError, Result};
use crate::model::{CalibratedModel, CalibrationDetails, Certificate, CertificateKind, Method};
use crate::numerics::linalg::{dot, norm_inf};
use crate::numerics::optim::{minimize_constrained_with, ConstrainedOptions, OptimProblem};
use crate::numerics::special::reg_inc_beta;
use crate::residuals::ResidualSet;
use crate::scores::{ParamVector, SampleConstraints, ScoreFamily};
use crate::scp::{check_eps, floor_budget};

/// Weight of the `‖q‖²` tie-breaking term added to the cost.
pub const TIE_BREAK: f64 = 1e-12;

#[derive(Debug, Clone)]
pub struct RemmcpOptions {
    pub feas_tol: f64,
    /// Activity threshold for support candidates, relative to `max(1, ‖q‖∞)`.
    pub active_tol: f64,
    pub inner_max_iters: usize,
}

impl Default for RemmcpOptions {
    fn default() -> Self {
        Self {
            feas_tol: 1e-8,
            active_tol: 1e-6,
            inner_max_iters: 2000,
        }
    }
}

/// One stage of the cascade.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemovalStage {
    pub q: Vec<f64>,
    pub cost: f64,
    /// Samples removed before this stage was solved.
    pub removed: Vec<usize>,
    /// Support of this stage's optimum (empty for the final stage).
    pub support: Vec<usize>,
    /// Padding added to the support (empty for the final stage).
    pub padding: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RemovalTrace {
    pub stages: Vec<RemovalStage>,
}

/// Outlier budget `floor(eps (n_cal + 1) / n_q) - 1`.
pub fn mcp_outlier_budget(n_cal: usize, eps: f64, n_q: usize) -> Result<usize> {
    check_eps(eps)?;
    if n_cal == 0 || n_q == 0 {
        return Err(McpError::InsufficientData(format!(
            "need n_cal >= 1 and n_q >= 1, got n_cal={n_cal}, n_q={n_q}"
        )));
    }
    let rho = floor_budget(eps * (n_cal as f64 + 1.0) / n_q as f64) - 1;
    usize::try_from(rho).map_err(|_| {
        McpError::InsufficientData(format!(
            "outlier budget floor({eps} * ({n_cal} + 1) / {n_q}) - 1 = {rho} is negative; \
             enlarge the calibration set to at least {} samples or reduce n_q",
            (n_q as f64 / eps).ceil() as usize - 1
        ))
    })
}

/// Coverage certificate after `rho` removal stages with `n_q` parameters.
pub fn remmcp_certificate(n_cal: usize, n_q: usize, rho: usize, eps: f64) -> Result<Certificate> {
    check_eps(eps)?;
    let k = n_q * (rho + 1);
    if n_q == 0 || n_cal <= k {
        return Err(McpError::Domain(format!(
            "certificate needs n_cal > n_q (rho + 1); got n_cal={n_cal}, n_q={n_q}, rho={rho}"
        )));
    }
    let a = (n_cal - k + 1) as f64;
    let b = k as f64;
    Ok(Certificate {
        method: CertificateKind::Remmcp,
        eps_target: eps,
        expected_bound: Some(k as f64 / (n_cal as f64 + 1.0)),
        beta: reg_inc_beta(1.0 - eps, a, b)?,
        beta_dist: Some((a, b)),
        eps_certified: None,
        assumptions_convex: true,
        adaptive_penalty: false,
    })
}

fn stage_problem(family: &ScoreFamily) -> OptimProblem<'_> {
    OptimProblem::new(family.n_q(), move |q: &[f64]| {
        family.cost(q) + TIE_BREAK * dot(q, q)
    })
    .with_gradient(move |q, g| {
        family.cost_gradient(q, g);
        for (gi, qi) in g.iter_mut().zip(q) {
            *gi += 2.0 * TIE_BREAK * qi;
        }
    })
}

fn solve_stage(
    family: &ScoreFamily,
    cal: &ResidualSet,
    indices: Vec<usize>,
    start: &[f64],
    options: &RemmcpOptions,
) -> Result<Vec<f64>> {
    let problem = stage_problem(family);
    let constraints = SampleConstraints {
        family,
        cal,
        indices,
    };
    let opts = ConstrainedOptions {
        feas_tol: options.feas_tol,
        inner_max_iters: options.inner_max_iters,
        ..ConstrainedOptions::default()
    };
    Ok(minimize_constrained_with(&problem, &constraints, start, &opts)?.q_star)
}

/// Samples whose constraint is active at `q_star`, pruned by leave-one-out
/// re-solves when there are more candidates than parameters.
pub fn identify_support(
    family: &ScoreFamily,
    q_star: &ParamVector,
    cal: &ResidualSet,
    indices: &[usize],
    active_tol: f64,
) -> Result<Vec<usize>> {
    identify_support_with(
        family,
        q_star,
        cal,
        indices,
        &RemmcpOptions {
            active_tol,
            ..RemmcpOptions::default()
        },
    )
}

fn identify_support_with(
    family: &ScoreFamily,
    q_star: &ParamVector,
    cal: &ResidualSet,
    indices: &[usize],
    options: &RemmcpOptions,
) -> Result<Vec<usize>> {
    let q = q_star.as_slice();
    let tol = options.active_tol * norm_inf(q).max(1.0);
    let candidates: Vec<usize> = indices
        .iter()
        .copied()
        .filter(|&m| family.max_score(q, cal.row(m)) >= -tol)
        .collect();
    if candidates.len() <= family.n_q() {
        return Ok(candidates);
    }
    let mut support = Vec::new();
    for &c in &candidates {
        let rest: Vec<usize> = indices.iter().copied().filter(|&m| m != c).collect();
        let moved = solve_stage(family, cal, rest, q, options)?;
        let shift = moved
            .iter()
            .zip(q)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        if shift > 10.0 * options.feas_tol {
            support.push(c);
        }
    }
    Ok(support)
}

/// Runs the removal cascade and returns the final model, the stage trace and
/// the certificate.
pub fn remmcp_calibrate(
    family: &ScoreFamily,
    cal: &ResidualSet,
    eps: f64,
    seed: u64,
) -> Result<(CalibratedModel, RemovalTrace, Certificate)> {
    remmcp_calibrate_with(family, cal, eps, seed, &RemmcpOptions::default())
}

pub fn remmcp_calibrate_with(
    family: &ScoreFamily,
    cal: &ResidualSet,
    eps: f64,
    seed: u64,
    options: &RemmcpOptions,
) -> Result<(CalibratedModel, RemovalTrace, Certificate)> {
    if cal.n_y() != family.n_y {
        return Err(McpError::DimensionMismatch {
            expected: family.n_y,
            got: cal.n_y(),
        });
    }
    let n_cal = cal.len();
    let n_q = family.n_q();
    let rho = mcp_outlier_budget(n_cal, eps, n_q)?;
    if n_cal <= n_q * (rho + 1) {
        return Err(McpError::InsufficientData(format!(
            "{n_cal} samples cannot absorb {} removals plus a final support of {n_q}",
            rho * n_q
        )));
    }

    let mut removed_mask = vec![false; n_cal];
    let mut removed: Vec<usize> = Vec::with_capacity(rho * n_q);
    let mut trace = RemovalTrace::default();
    let mut q = family.init(cal)?;

    for k in 0..=rho {
        if removed.len() != k * n_q {
            return Err(McpError::DegenerateTrace {
                stage: k,
                removed: removed.len(),
                expected: k * n_q,
            });
        }
        let kept: Vec<usize> = (0..n_cal).filter(|&m| !removed_mask[m]).collect();
        q = solve_stage(family, cal, kept.clone(), &q, options)?;
        let mut stage = RemovalStage {
            cost: family.cost(&q),
            q: q.clone(),
            removed: removed.clone(),
            support: Vec::new(),
            padding: Vec::new(),
        };
        if k == rho {
            trace.stages.push(stage);
            break;
        }

        let support =
            identify_support_with(family, &ParamVector(q.clone()), cal, &kept, options)?;
        if support.len() > n_q {
            return Err(McpError::DegenerateTrace {
                stage: k + 1,
                removed: removed.len() + support.len(),
                expected: (k + 1) * n_q,
            });
        }
        // Pad with the samples closest to the boundary, smallest index first on ties.
        let mut rest: Vec<(f64, usize)> = kept
            .iter()
            .copied()
            .filter(|m| !support.contains(m))
            .map(|m| (family.max_score(&q, cal.row(m)), m))
            .collect();
        rest.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let padding: Vec<usize> = rest.iter().take(n_q - support.len()).map(|&(_, m)| m).collect();

        for &m in support.iter().chain(&padding) {
            removed_mask[m] = true;
            removed.push(m);
        }
        stage.support = support;
        stage.padding = padding;
        trace.stages.push(stage);
    }

    let mut certificate = remmcp_certificate(n_cal, n_q, rho, eps)?;
    certificate.assumptions_convex = family.convex_in_q();
    let model = CalibratedModel {
        family: *family,
        q: ParamVector::new(family, q)?,
        method: Method::Remmcp,
        n_cal,
        eps,
        seed,
        details: CalibrationDetails::Remmcp { rho, removed },
        certificate: certificate.clone(),
    };
    Ok((model, trace, certificate))
}

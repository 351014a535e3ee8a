//! Calibration by constraint relaxation.
//!
//! For a penalty `phi` the relaxed program minimises
//! `J(q) + phi * sum_m max(0, max_j s_j(r_m, q))`. A solution with solution
//! complexity `d` is certified a posteriori: with confidence `1 - beta`, its
//! miscoverage is at most the root `eps` of
//!
//! ```text
//! beta / (n_eval n) * sum_{j=d}^{n-1} C(j, d) / C(n, d) * (1 - eps)^-(n - j) = 1
//! ```
//!
//! where `n_eval` counts the penalties tried so far. [`relmcp_calibrate`]
//! searches for the smallest penalty whose solution certifies the target,
//! growing `phi` while solutions are invalid, shrinking it while they are
//! valid, and bisecting once both kinds have been seen.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{McpError, Result};
use crate::model::{CalibratedModel, CalibrationDetails, Certificate, CertificateKind, Method};
use crate::numerics::optim::lbfgs;
use crate::numerics::roots::bisect_root;
use crate::numerics::special::log_binomial;
use crate::residuals::ResidualSet;
use crate::rng::SeededRng;
use crate::scores::{FamilyKind, ParamVector, ScoreFamily};
use crate::scp::check_eps;

const EPS_LO: f64 = 1e-12;
const EPS_HI: f64 = 1.0 - 1e-12;
const EPS_TOL: f64 = 1e-10;

/// Extra iterations allowed past `i_max` while no valid solution exists.
const OVERRUN: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RelmcpConfig {
    pub eps_target: f64,
    pub beta_target: f64,
    pub phi1: f64,
    pub f_plus: f64,
    pub f_minus: f64,
    pub i_max: usize,
    pub n_starts: usize,
    pub inner_max_iters: usize,
    pub seed: u64,
}

impl RelmcpConfig {
    /// Defaults for a family: 3 starts and 2000 inner iterations, or 10 and
    /// 1000 for unions of ellipsoids.
    pub fn for_family(family: &ScoreFamily, eps_target: f64, beta_target: f64, seed: u64) -> Self {
        let (n_starts, inner_max_iters) = match family.kind {
            FamilyKind::UnionEllipsoid { .. } => (10, 1000),
            _ => (3, 2000),
        };
        Self {
            eps_target,
            beta_target,
            phi1: 0.1,
            f_plus: 2.0,
            f_minus: 0.3,
            i_max: 15,
            n_starts,
            inner_max_iters,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_eps(self.eps_target)?;
        if !(self.beta_target > 0.0 && self.beta_target < 1.0) {
            return Err(McpError::Domain(format!(
                "beta must lie in (0, 1), got {}",
                self.beta_target
            )));
        }
        if !(self.phi1 > 0.0) || !(self.f_plus > 1.0) || !(self.f_minus > 0.0 && self.f_minus < 1.0) {
            return Err(McpError::InvalidConfig(
                "need phi1 > 0, f_plus > 1 and 0 < f_minus < 1".into(),
            ));
        }
        if self.i_max == 0 || self.n_starts == 0 || self.inner_max_iters == 0 {
            return Err(McpError::InvalidConfig(
                "i_max, n_starts and inner_max_iters must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub phi: f64,
    pub d: usize,
    pub eps: f64,
    pub valid: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RelmcpResult {
    pub q_star: ParamVector,
    pub phi: f64,
    pub d: usize,
    pub eps_certified: f64,
    /// 1-based iteration that produced the accepted solution; its
    /// certificate was computed with `n_eval = i_val`.
    pub i_val: usize,
    pub n_eval: usize,
    pub iteration_log: Vec<IterationRecord>,
}

/// Why no certified solution was returned.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoCertificate {
    /// Every calibration constraint holds, yet the certificate misses the
    /// target; more data is needed.
    AllConstraintsSatisfied,
    /// The penalty search ran out of iterations without a valid solution.
    IterationCap,
    /// Even a solution of the smallest possible complexity, found on the
    /// first iteration, would miss the target.
    TargetUnreachable,
}

impl NoCertificate {
    pub fn as_str(&self) -> &'static str {
        match self {
            NoCertificate::AllConstraintsSatisfied => "all_constraints_satisfied",
            NoCertificate::IterationCap => "iteration_cap",
            NoCertificate::TargetUnreachable => "target_unreachable",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum RelmcpOutcome {
    Certified(RelmcpResult),
    NotCertified {
        reason: NoCertificate,
        iteration_log: Vec<IterationRecord>,
    },
}

impl RelmcpOutcome {
    pub fn certified(&self) -> Option<&RelmcpResult> {
        match self {
            RelmcpOutcome::Certified(r) => Some(r),
            RelmcpOutcome::NotCertified { .. } => None,
        }
    }

    pub fn iteration_log(&self) -> &[IterationRecord] {
        match self {
            RelmcpOutcome::Certified(r) => &r.iteration_log,
            RelmcpOutcome::NotCertified { iteration_log, .. } => iteration_log,
        }
    }
}

/// `J(q) + phi * sum_m slack(q, r_m)`.
pub fn penalized_objective(family: &ScoreFamily, cal: &ResidualSet, phi: f64, q: &ParamVector) -> Result<f64> {
    if !(phi > 0.0) {
        return Err(McpError::Domain(format!("penalty must be positive, got {phi}")));
    }
    let mut total = 0.0;
    for r in cal.rows() {
        total += family.slack(q, r)?;
    }
    Ok(family.cost_eval(q)? + phi * total)
}

fn objective_value(family: &ScoreFamily, cal: &ResidualSet, phi: f64, q: &[f64]) -> f64 {
    let slack: f64 = cal.rows().map(|r| family.max_score(q, r).max(0.0)).sum();
    family.cost(q) + phi * slack
}

fn objective_value_grad(family: &ScoreFamily, cal: &ResidualSet, phi: f64, q: &[f64], grad: &mut [f64]) -> f64 {
    let n_s = family.n_s();
    let n_q = family.n_q();
    family.cost_gradient(q, grad);
    let mut scores = vec![0.0; n_s];
    let mut jac = vec![0.0; n_s * n_q];
    let mut slack = 0.0;
    for r in cal.rows() {
        family.eval_into(q, r, &mut scores);
        let (j, worst) = scores
            .iter()
            .copied()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (j, v)| if v > acc.1 { (j, v) } else { acc });
        if worst > 0.0 {
            slack += worst;
            family.jacobian_into(q, r, &mut jac);
            for (g, d) in grad.iter_mut().zip(&jac[j * n_q..(j + 1) * n_q]) {
                *g += phi * d;
            }
        }
    }
    family.cost(q) + phi * slack
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveDiagnostics {
    pub objective: f64,
    pub best_start: usize,
    pub start_objectives: Vec<f64>,
}

/// Best of `n_starts` local solves of the penalised objective.
///
/// Starts alternate between the two warm-start anchors `(current, previous
/// best)`; the first start from each anchor is unperturbed, later ones add
/// Gaussian noise of relative scale 0.1. Each penalty value gets its own
/// seeded streams, so repeated calls are bit-identical.
pub fn solve_penalized(
    family: &ScoreFamily,
    cal: &ResidualSet,
    phi: f64,
    config: &RelmcpConfig,
    warm: Option<(&[f64], &[f64])>,
) -> Result<(ParamVector, SolveDiagnostics)> {
    if !(phi > 0.0) {
        return Err(McpError::Domain(format!("penalty must be positive, got {phi}")));
    }
    let init;
    let (current, previous) = match warm {
        Some(w) => w,
        None => {
            init = family.init(cal)?;
            (init.as_slice(), init.as_slice())
        }
    };
    let n_q = family.n_q();
    if current.len() != n_q || previous.len() != n_q {
        return Err(McpError::DimensionMismatch {
            expected: n_q,
            got: current.len(),
        });
    }
    let seed = config.seed ^ phi.to_bits();

    let runs: Vec<Result<(Vec<f64>, f64)>> = (0..config.n_starts)
        .into_par_iter()
        .map(|start| {
            let anchor = if start % 2 == 0 { current } else { previous };
            let mut q0 = anchor.to_vec();
            if start >= 2 {
                let mut rng = SeededRng::derive(seed, start as u64);
                for v in q0.iter_mut() {
                    *v += 0.1 * v.abs().max(1e-2) * rng.normal();
                }
            }
            let value = |q: &[f64]| objective_value(family, cal, phi, q);
            let value_grad = |q: &[f64], g: &mut [f64]| objective_value_grad(family, cal, phi, q, g);
            let res = lbfgs(&value, &value_grad, &q0, config.inner_max_iters, 1e-9)?;
            Ok((res.q_star, res.value))
        })
        .collect();

    let mut best: Option<(usize, Vec<f64>, f64)> = None;
    let mut start_objectives = Vec::with_capacity(runs.len());
    for (i, run) in runs.into_iter().enumerate() {
        let (q, v) = match run {
            Ok(r) => r,
            Err(McpError::NonFiniteObjective) => {
                start_objectives.push(f64::INFINITY);
                continue;
            }
            Err(e) => return Err(e),
        };
        start_objectives.push(v);
        if best.as_ref().is_none_or(|b| v < b.2) {
            best = Some((i, q, v));
        }
    }
    let (best_start, q, objective) = best.ok_or(McpError::NonFiniteObjective)?;
    Ok((
        ParamVector(q),
        SolveDiagnostics {
            objective,
            best_start,
            start_objectives,
        },
    ))
}

/// Violated constraints plus `min(n_q, non-violated)`.
pub fn solution_complexity(family: &ScoreFamily, q_star: &ParamVector, cal: &ResidualSet) -> usize {
    let violated = cal
        .rows()
        .filter(|r| family.max_score(&q_star.0, r) > 0.0)
        .count();
    violated + family.n_q().min(cal.len() - violated)
}

/// Miscoverage certified with confidence `1 - beta` for a solution of
/// complexity `d` among `n_eval` evaluated penalties.
pub fn certified_miscoverage(n_cal: usize, d: usize, beta: f64, n_eval: usize) -> Result<f64> {
    if d >= n_cal {
        return Err(McpError::Domain(format!(
            "no certificate for complexity {d} with {n_cal} samples"
        )));
    }
    if !(beta > 0.0 && beta < 1.0) || n_eval == 0 {
        return Err(McpError::Domain(format!(
            "need beta in (0, 1) and n_eval >= 1, got beta={beta}, n_eval={n_eval}"
        )));
    }
    let log_c_nd = log_binomial(n_cal as u64, d as u64)?;
    let terms: Vec<(f64, f64)> = (d..n_cal)
        .map(|j| {
            Ok((
                log_binomial(j as u64, d as u64)? - log_c_nd,
                (n_cal - j) as f64,
            ))
        })
        .collect::<Result<_>>()?;
    let log_front = beta.ln() - (n_eval as f64).ln() - (n_cal as f64).ln();
    let log_lhs = |eps: f64| {
        let log_keep = (-eps).ln_1p();
        let max = terms
            .iter()
            .map(|(c, p)| c - p * log_keep)
            .fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = terms.iter().map(|(c, p)| (c - p * log_keep - max).exp()).sum();
        log_front + max + sum.ln()
    };
    if log_lhs(EPS_HI) < 0.0 {
        return Ok(1.0);
    }
    if log_lhs(EPS_LO) >= 0.0 {
        return Ok(EPS_LO);
    }
    bisect_root(log_lhs, EPS_LO, EPS_HI, EPS_TOL)
}

fn certify(n_cal: usize, d: usize, beta: f64, n_eval: usize) -> Result<f64> {
    if d >= n_cal {
        Ok(1.0)
    } else {
        certified_miscoverage(n_cal, d, beta, n_eval)
    }
}

/// Adaptive penalty search.
pub fn relmcp_calibrate(family: &ScoreFamily, cal: &ResidualSet, config: &RelmcpConfig) -> Result<RelmcpOutcome> {
    config.validate()?;
    if cal.n_y() != family.n_y {
        return Err(McpError::DimensionMismatch {
            expected: family.n_y,
            got: cal.n_y(),
        });
    }
    if cal.is_empty() {
        return Err(McpError::InsufficientData("no calibration samples".into()));
    }
    let n_cal = cal.len();
    let beta = config.beta_target;
    if certify(n_cal, family.n_q().min(n_cal), beta, 1)? > config.eps_target {
        return Ok(RelmcpOutcome::NotCertified {
            reason: NoCertificate::TargetUnreachable,
            iteration_log: Vec::new(),
        });
    }
    let init = family.init(cal)?;

    let mut log: Vec<IterationRecord> = Vec::new();
    let mut solutions: Vec<ParamVector> = Vec::new();
    let mut i_val = 0usize;
    let mut i_inv = 0usize;
    let mut phi = config.phi1;
    let mut i = 1usize;

    loop {
        if i > config.i_max + OVERRUN || !phi.is_finite() {
            return Ok(RelmcpOutcome::NotCertified {
                reason: NoCertificate::IterationCap,
                iteration_log: log,
            });
        }
        let previous = solutions.last().map_or(init.as_slice(), |q| q.as_slice());
        let (q, _) = solve_penalized(family, cal, phi, config, Some((init.as_slice(), previous)))?;
        let d = solution_complexity(family, &q, cal);
        let eps_i = certify(n_cal, d, beta, i)?;
        let valid = eps_i <= config.eps_target;
        log.push(IterationRecord {
            phi,
            d,
            eps: eps_i,
            valid,
        });
        let all_satisfied = cal.rows().all(|r| family.max_score(&q.0, r) <= 0.0);
        solutions.push(q);

        if valid {
            i_val = i;
        } else if all_satisfied {
            return Ok(RelmcpOutcome::NotCertified {
                reason: NoCertificate::AllConstraintsSatisfied,
                iteration_log: log,
            });
        } else {
            i_inv = i;
        }

        if i_val != 0 {
            let best = &log[i_val - 1];
            let eps_next = certify(n_cal, best.d, beta, i + 1)?;
            if eps_next > config.eps_target || i >= config.i_max {
                return Ok(RelmcpOutcome::Certified(RelmcpResult {
                    q_star: solutions[i_val - 1].clone(),
                    phi: best.phi,
                    d: best.d,
                    eps_certified: best.eps,
                    i_val,
                    n_eval: i,
                    iteration_log: log,
                }));
            }
        }

        phi = if i_val == 0 {
            let exponent = 1.max(i.saturating_sub(config.i_max)) as i32;
            log[i_inv - 1].phi * config.f_plus.powi(exponent)
        } else if i_inv == 0 {
            log[i_val - 1].phi * config.f_minus
        } else {
            0.5 * (log[i_val - 1].phi + log[i_inv - 1].phi)
        };
        i += 1;
    }
}

/// Packages a certified result as a model.
pub fn relmcp_model(family: &ScoreFamily, cal: &ResidualSet, config: &RelmcpConfig, result: &RelmcpResult) -> CalibratedModel {
    CalibratedModel {
        family: *family,
        q: result.q_star.clone(),
        method: Method::Relmcp,
        n_cal: cal.len(),
        eps: config.eps_target,
        seed: config.seed,
        details: CalibrationDetails::Relmcp {
            phi: result.phi,
            d: result.d,
            n_eval: result.n_eval,
            i_val: result.i_val,
        },
        certificate: Certificate {
            method: CertificateKind::Relmcp,
            eps_target: config.eps_target,
            expected_bound: None,
            beta: config.beta_target,
            beta_dist: None,
            eps_certified: Some(result.eps_certified),
            assumptions_convex: family.convex_in_q(),
            adaptive_penalty: true,
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scores::make_family;

    /// Direct evaluation of the certificate equation's left-hand side.
    fn lhs_direct(n: usize, d: usize, beta: f64, n_eval: usize, eps: f64) -> f64 {
        let c_nd = binom(n, d);
        let sum: f64 = (d..n)
            .map(|j| binom(j, d) / c_nd * (1.0 - eps).powi(-((n - j) as i32)))
            .sum();
        beta / (n_eval as f64 * n as f64) * sum
    }

    fn binom(n: usize, k: usize) -> f64 {
        (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
    }

    #[test]
    fn complexity_formula() {
        let family = make_family(FamilyKind::Sphere, 1).unwrap();
        let cal = ResidualSet::from_scalars(&[0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 1.5, 2.5, 3.5]);
        // three violated at q = 1, seven members, n_q = 1
        assert_eq!(solution_complexity(&family, &ParamVector(vec![1.0]), &cal), 4);
        assert_eq!(solution_complexity(&family, &ParamVector(vec![10.0]), &cal), 1);
        assert_eq!(solution_complexity(&family, &ParamVector(vec![0.0]), &cal), 10);

        let rbf = make_family(FamilyKind::Rbf { centers: 2 }, 1).unwrap();
        assert_eq!(rbf.n_q(), 5);
        // three far residuals violated, seven near the centers
        let cal = ResidualSet::from_scalars(&[0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 50.0, 60.0, 70.0]);
        let q = ParamVector(vec![0.0, 0.0, 1.0, 1.0, 0.5]);
        assert_eq!(solution_complexity(&rbf, &q, &cal), 8);
    }

    #[test]
    fn single_term_closed_form() {
        let eps = certified_miscoverage(10, 9, 0.1, 1).unwrap();
        assert!((eps - 0.999).abs() < 1e-9, "{eps}");
    }

    #[test]
    fn zero_complexity_matches_explicit_sum() {
        let oracle = bisect_root(|e| lhs_direct(10, 0, 0.1, 1, e) - 1.0, 1e-12, 1.0 - 1e-9, 1e-13).unwrap();
        let eps = certified_miscoverage(10, 0, 0.1, 1).unwrap();
        assert!((eps - oracle).abs() < 1e-9, "{eps} vs {oracle}");
    }

    #[test]
    fn more_evaluations_loosen_the_certificate() {
        for d in [0, 3, 10, 25] {
            let mut prev = 0.0;
            for n_eval in 1..8 {
                let eps = certified_miscoverage(60, d, 0.05, n_eval).unwrap();
                assert!(eps > prev);
                prev = eps;
            }
        }
    }

    #[test]
    fn complexity_at_least_n_cal_has_no_certificate() {
        assert!(certified_miscoverage(10, 10, 0.1, 1).is_err());
    }

    #[test]
    fn penalty_examples() {
        let family = make_family(FamilyKind::Interval, 2).unwrap();
        let cal = ResidualSet::from_rows(&[[2.0, 0.0], [0.0, 0.0]]).unwrap();
        let q = ParamVector(vec![1.0, 1.0]);
        assert_eq!(penalized_objective(&family, &cal, 10.0, &q).unwrap(), 12.0);
        let a = penalized_objective(&family, &cal, 3.0, &q).unwrap() - 2.0;
        let b = penalized_objective(&family, &cal, 6.0, &q).unwrap() - 2.0;
        assert_eq!(b, 2.0 * a);
        let inside = ResidualSet::from_rows(&[[0.5, 0.0], [0.0, -0.5]]).unwrap();
        assert_eq!(penalized_objective(&family, &inside, 7.0, &q).unwrap(), 2.0);
        assert!(penalized_objective(&family, &cal, 0.0, &q).is_err());
    }
}

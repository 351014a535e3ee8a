//! Smooth local minimisation.
//!
//! [`minimize_unconstrained`] is a limited-memory BFGS method (memory 10) with
//! a backtracking Armijo line search. [`minimize_constrained`] handles sample
//! constraints `s(r_m, q) <= 0` through a penalty homotopy: the multiplier-
//! shifted quadratic penalty `J(q) + 1/(2 mu) sum(max(0, lambda + mu s)^2 -
//! lambda^2)` is minimised repeatedly, `mu` doubles from 10 whenever the
//! violation stalls, and the shifts `lambda` are refreshed between solves.

use std::collections::VecDeque;

use crate::error::{McpError, Result};
use crate::numerics::linalg::{dot, norm2, norm_inf};

const LBFGS_MEMORY: usize = 10;
const ARMIJO_C1: f64 = 1e-4;
const BACKTRACK: f64 = 0.5;
const MAX_BACKTRACKS: usize = 60;

type ObjectiveFn<'a> = dyn Fn(&[f64]) -> f64 + Send + Sync + 'a;
type GradientFn<'a> = dyn Fn(&[f64], &mut [f64]) + Send + Sync + 'a;

/// Scalar objective over `R^dim` with an optional analytic gradient.
pub struct OptimProblem<'a> {
    dim: usize,
    objective: Box<ObjectiveFn<'a>>,
    gradient: Option<Box<GradientFn<'a>>>,
}

impl<'a> OptimProblem<'a> {
    pub fn new(dim: usize, objective: impl Fn(&[f64]) -> f64 + Send + Sync + 'a) -> Self {
        Self {
            dim,
            objective: Box::new(objective),
            gradient: None,
        }
    }

    pub fn with_gradient(
        mut self,
        gradient: impl Fn(&[f64], &mut [f64]) + Send + Sync + 'a,
    ) -> Self {
        self.gradient = Some(Box::new(gradient));
        self
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn value(&self, q: &[f64]) -> f64 {
        (self.objective)(q)
    }

    /// Analytic gradient if one was supplied, forward differences otherwise.
    pub fn gradient(&self, q: &[f64], grad: &mut [f64]) {
        match &self.gradient {
            Some(g) => g(q, grad),
            None => forward_difference(&*self.objective, q, grad),
        }
    }
}

/// Forward finite differences with step `1e-6 (1 + |q_i|)`.
pub fn forward_difference(f: &dyn Fn(&[f64]) -> f64, q: &[f64], grad: &mut [f64]) {
    let base = f(q);
    let mut probe = q.to_vec();
    for i in 0..q.len() {
        let h = 1e-6 * (1.0 + q[i].abs());
        probe[i] = q[i] + h;
        grad[i] = (f(&probe) - base) / h;
        probe[i] = q[i];
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimResult {
    pub q_star: Vec<f64>,
    pub value: f64,
    pub converged: bool,
    pub iterations: usize,
    pub grad_norm: f64,
}

/// Per-sample constraints `s(r_m, q) <= 0` over a list of included samples.
pub trait ConstraintSet {
    /// Components per sample (`n_s`).
    fn n_components(&self) -> usize;

    /// Included sample indices, duplicate-free.
    fn indices(&self) -> &[usize];

    /// Writes `s(r_index, q)` into `out`.
    fn eval(&self, index: usize, q: &[f64], out: &mut [f64]);

    /// Row-major `n_s x n_q` Jacobian of `s(r_index, q)`; forward
    /// differences unless overridden.
    fn jacobian(&self, index: usize, q: &[f64], out: &mut [f64]) {
        let n_s = self.n_components();
        let n_q = q.len();
        let mut base = vec![0.0; n_s];
        let mut bumped = vec![0.0; n_s];
        self.eval(index, q, &mut base);
        let mut probe = q.to_vec();
        for k in 0..n_q {
            let h = 1e-6 * (1.0 + q[k].abs());
            probe[k] = q[k] + h;
            self.eval(index, &probe, &mut bumped);
            for j in 0..n_s {
                out[j * n_q + k] = (bumped[j] - base[j]) / h;
            }
            probe[k] = q[k];
        }
    }

    /// Largest positive constraint component over all included samples.
    fn max_violation(&self, q: &[f64]) -> f64 {
        let mut out = vec![0.0; self.n_components()];
        let mut worst = 0.0_f64;
        for &m in self.indices() {
            self.eval(m, q, &mut out);
            for &v in &out {
                worst = worst.max(v);
            }
        }
        worst
    }
}

/// Limited-memory BFGS with backtracking Armijo line search.
///
/// Stops when the gradient 2-norm falls below `tol`, after `max_iters`
/// iterations, or when no step along the search direction decreases the
/// objective (reported with `converged = false`).
pub fn minimize_unconstrained(
    problem: &OptimProblem<'_>,
    q0: &[f64],
    max_iters: usize,
    tol: f64,
) -> Result<OptimResult> {
    if q0.len() != problem.dim() {
        return Err(McpError::DimensionMismatch {
            expected: problem.dim(),
            got: q0.len(),
        });
    }
    if !(tol > 0.0) {
        return Err(McpError::Domain(format!("tolerance must be positive, got {tol}")));
    }
    lbfgs(
        &|q: &[f64]| problem.value(q),
        &|q: &[f64], g: &mut [f64]| {
            problem.gradient(q, g);
            problem.value(q)
        },
        q0,
        max_iters,
        tol,
    )
}

pub(crate) fn lbfgs(
    value: &dyn Fn(&[f64]) -> f64,
    value_grad: &dyn Fn(&[f64], &mut [f64]) -> f64,
    q0: &[f64],
    max_iters: usize,
    tol: f64,
) -> Result<OptimResult> {
    let n = q0.len();
    let mut x = q0.to_vec();
    let mut g = vec![0.0; n];
    let mut f = value_grad(&x, &mut g);
    if !f.is_finite() {
        return Err(McpError::NonFiniteObjective);
    }
    if n == 0 {
        return Ok(OptimResult {
            q_star: x,
            value: f,
            converged: true,
            iterations: 0,
            grad_norm: 0.0,
        });
    }

    let mut history: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::with_capacity(LBFGS_MEMORY);
    let mut dir = vec![0.0; n];
    let mut trial = vec![0.0; n];
    let mut g_new = vec![0.0; n];
    let mut alpha_buf = vec![0.0; LBFGS_MEMORY];
    let mut converged = false;
    let mut iterations = 0;
    let mut flat_steps = 0;

    while iterations < max_iters {
        let gnorm = norm2(&g);
        if !gnorm.is_finite() {
            break;
        }
        if gnorm <= tol {
            converged = true;
            break;
        }

        two_loop(&g, &history, &mut dir, &mut alpha_buf);
        let mut slope = dot(&g, &dir);
        if !(slope < 0.0) {
            history.clear();
            dir.iter_mut().zip(&g).for_each(|(d, gi)| *d = -gi);
            slope = -gnorm * gnorm;
        }

        // Without curvature information, cap the first step at unit length.
        let mut step = if history.is_empty() { (1.0 / norm2(&dir)).min(1.0) } else { 1.0 };
        let mut accepted = None;
        for _ in 0..MAX_BACKTRACKS {
            for i in 0..n {
                trial[i] = x[i] + step * dir[i];
            }
            let ft = value(&trial);
            if ft.is_finite() && ft <= f + ARMIJO_C1 * step * slope {
                accepted = Some(ft);
                break;
            }
            step *= BACKTRACK;
        }
        let Some(_) = accepted else {
            if history.is_empty() {
                break;
            }
            history.clear();
            continue;
        };

        let f_new = value_grad(&trial, &mut g_new);
        iterations += 1;
        let s: Vec<f64> = trial.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * norm2(&s) * norm2(&y) && sy > 0.0 {
            if history.len() == LBFGS_MEMORY {
                history.pop_front();
            }
            history.push_back((s, y, 1.0 / sy));
        }

        if f - f_new <= 1e-15 * f.abs().max(1.0) {
            flat_steps += 1;
        } else {
            flat_steps = 0;
        }
        std::mem::swap(&mut x, &mut trial);
        std::mem::swap(&mut g, &mut g_new);
        f = f_new;
        if flat_steps >= 8 {
            break;
        }
    }

    Ok(OptimResult {
        grad_norm: norm2(&g),
        q_star: x,
        value: f,
        converged,
        iterations,
    })
}

fn two_loop(
    g: &[f64],
    history: &VecDeque<(Vec<f64>, Vec<f64>, f64)>,
    dir: &mut [f64],
    alpha: &mut [f64],
) {
    dir.iter_mut().zip(g).for_each(|(d, gi)| *d = -gi);
    for (k, (s, y, rho)) in history.iter().enumerate().rev() {
        let a = rho * dot(s, dir);
        alpha[k] = a;
        dir.iter_mut().zip(y).for_each(|(d, yi)| *d -= a * yi);
    }
    if let Some((s, y, _)) = history.back() {
        let gamma = dot(s, y) / dot(y, y);
        dir.iter_mut().for_each(|d| *d *= gamma);
    }
    for (k, (s, y, rho)) in history.iter().enumerate() {
        let b = rho * dot(y, dir);
        let a = alpha[k];
        dir.iter_mut().zip(s).for_each(|(d, si)| *d += (a - b) * si);
    }
}

/// Settings of the penalty homotopy.
#[derive(Debug, Clone)]
pub struct ConstrainedOptions {
    pub feas_tol: f64,
    pub mu0: f64,
    pub max_doublings: usize,
    pub inner_max_iters: usize,
    pub inner_tol: f64,
}

impl Default for ConstrainedOptions {
    fn default() -> Self {
        Self {
            feas_tol: 1e-8,
            mu0: 10.0,
            max_doublings: 30,
            inner_max_iters: 2000,
            inner_tol: 1e-10,
        }
    }
}

/// Minimises `problem` subject to every component of every included sample
/// constraint being `<= feas_tol`.
pub fn minimize_constrained(
    problem: &OptimProblem<'_>,
    constraints: &dyn ConstraintSet,
    q0: &[f64],
    feas_tol: f64,
) -> Result<OptimResult> {
    let options = ConstrainedOptions {
        feas_tol,
        ..ConstrainedOptions::default()
    };
    minimize_constrained_with(problem, constraints, q0, &options)
}

pub fn minimize_constrained_with(
    problem: &OptimProblem<'_>,
    constraints: &dyn ConstraintSet,
    q0: &[f64],
    options: &ConstrainedOptions,
) -> Result<OptimResult> {
    if !(options.feas_tol > 0.0) {
        return Err(McpError::Domain("feasibility tolerance must be positive".into()));
    }
    if q0.len() != problem.dim() {
        return Err(McpError::DimensionMismatch {
            expected: problem.dim(),
            got: q0.len(),
        });
    }
    if !problem.value(q0).is_finite() {
        return Err(McpError::NonFiniteObjective);
    }
    if constraints.indices().is_empty() {
        return minimize_unconstrained(problem, q0, options.inner_max_iters, options.inner_tol);
    }

    let n_s = constraints.n_components();
    let n_q = q0.len();
    let indices = constraints.indices();
    let mut shifts = vec![0.0; indices.len() * n_s];
    let mut mu = options.mu0;
    let mut doublings = 0;
    let mut q = q0.to_vec();
    let mut last_violation = f64::INFINITY;
    let mut iterations = 0;
    let mut result = None;

    for _outer in 0..(options.max_doublings + 40) {
        let penalty_value = |x: &[f64]| {
            let mut s = vec![0.0; n_s];
            let mut total = problem.value(x);
            for (k, &m) in indices.iter().enumerate() {
                constraints.eval(m, x, &mut s);
                for j in 0..n_s {
                    let lam = shifts[k * n_s + j];
                    let t = (lam + mu * s[j]).max(0.0);
                    total += (t * t - lam * lam) / (2.0 * mu);
                }
            }
            total
        };
        let penalty_value_grad = |x: &[f64], grad: &mut [f64]| {
            problem.gradient(x, grad);
            let mut total = problem.value(x);
            let mut s = vec![0.0; n_s];
            let mut jac = vec![0.0; n_s * n_q];
            for (k, &m) in indices.iter().enumerate() {
                constraints.eval(m, x, &mut s);
                let mut jac_ready = false;
                for j in 0..n_s {
                    let lam = shifts[k * n_s + j];
                    let t = (lam + mu * s[j]).max(0.0);
                    total += (t * t - lam * lam) / (2.0 * mu);
                    if t > 0.0 {
                        if !jac_ready {
                            constraints.jacobian(m, x, &mut jac);
                            jac_ready = true;
                        }
                        for i in 0..n_q {
                            grad[i] += t * jac[j * n_q + i];
                        }
                    }
                }
            }
            total
        };
        let inner = lbfgs(
            &penalty_value,
            &penalty_value_grad,
            &q,
            options.inner_max_iters,
            options.inner_tol,
        )?;
        iterations += inner.iterations;
        let step = q
            .iter()
            .zip(&inner.q_star)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        q = inner.q_star;

        let mut s = vec![0.0; n_s];
        let mut violation = 0.0_f64;
        for (k, &m) in indices.iter().enumerate() {
            constraints.eval(m, &q, &mut s);
            for j in 0..n_s {
                violation = violation.max(s[j]);
                let slot = &mut shifts[k * n_s + j];
                *slot = (*slot + mu * s[j]).max(0.0);
            }
        }

        let settled = step <= 1e-12 * (1.0 + norm_inf(&q));
        if violation <= options.feas_tol && (settled || violation == 0.0 && inner.converged) {
            result = Some((violation, inner.converged));
            break;
        }
        if violation > 0.25 * last_violation {
            if doublings == options.max_doublings {
                if violation <= options.feas_tol {
                    result = Some((violation, inner.converged));
                }
                break;
            }
            mu *= 2.0;
            doublings += 1;
        }
        last_violation = violation;
    }

    let violation = constraints.max_violation(&q);
    if !(violation <= options.feas_tol) {
        return Err(McpError::Infeasible {
            violation,
            doublings,
        });
    }
    let mut grad = vec![0.0; n_q];
    problem.gradient(&q, &mut grad);
    Ok(OptimResult {
        value: problem.value(&q),
        converged: result.map(|(_, c)| c).unwrap_or(false),
        iterations,
        grad_norm: norm2(&grad),
        q_star: q,
    })
}

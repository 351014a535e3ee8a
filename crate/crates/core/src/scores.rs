//! Vector score families `s(r, q)` and their cost functions `J(q)`.
//!
//! A residual `r` belongs to the prediction set of parameters `q` when every
//! component of `s(r, q)` is non-positive. Supported shapes:
//!
//! | kind | `n_q` | `s(r, q)` | `J(q)` |
//! |---|---|---|---|
//! | sphere | 1 | `‖r‖₂ − q` | `q` |
//! | interval | `n_y` | `(−r − q; r − q)` | `1ᵀq` |
//! | ellipsoid | `n_y(n_y+1)/2` | `rᵀLLᵀr − 1` | `−log det LLᵀ` |
//! | union of K ellipsoids | `K(n_y + n_y(n_y+1)/2)` | `minᵢ (r−cᵢ)ᵀLᵢLᵢᵀ(r−cᵢ) − 1` | `Σᵢ −log det LᵢLᵢᵀ` |
//! | N radial basis functions | `N(n_y+1)+1` | `γ − Σᵢ exp(−‖r−μᵢ‖²/2σᵢ²)` | `Σᵢ σᵢ²` |
//!
//! Sphere radii and interval half-widths are floored at zero, ellipsoid
//! factor diagonals at [`L_DIAG_FLOOR`], RBF widths at [`SIGMA_FLOOR`] and the
//! RBF level at [`GAMMA_FLOOR`]. Floors apply inside both score and cost.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{McpError, Result};
use crate::numerics::kmeans::kmeans;
use crate::numerics::linalg::{
    cholesky, lower_gram, norm2, regularize, spd_inverse, tri_index, tri_len, unpack_lower,
};
use crate::numerics::optim::ConstraintSet;
use crate::residuals::ResidualSet;

pub const L_DIAG_FLOOR: f64 = 1e-8;
pub const SIGMA_FLOOR: f64 = 1e-6;
pub const GAMMA_FLOOR: f64 = 1e-2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum FamilyKind {
    Sphere,
    Interval,
    Ellipsoid,
    UnionEllipsoid { components: usize },
    Rbf { centers: usize },
}

impl fmt::Display for FamilyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FamilyKind::Sphere => write!(f, "sphere"),
            FamilyKind::Interval => write!(f, "interval"),
            FamilyKind::Ellipsoid => write!(f, "ellipsoid"),
            FamilyKind::UnionEllipsoid { components } => write!(f, "union:{components}"),
            FamilyKind::Rbf { centers } => write!(f, "rbf:{centers}"),
        }
    }
}

impl From<FamilyKind> for String {
    fn from(kind: FamilyKind) -> String {
        kind.to_string()
    }
}

impl TryFrom<String> for FamilyKind {
    type Error = McpError;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl FromStr for FamilyKind {
    type Err = McpError;

    fn from_str(s: &str) -> Result<Self> {
        let count = |v: &str| -> Result<usize> {
            v.parse::<usize>()
                .ok()
                .filter(|&k| k >= 1)
                .ok_or_else(|| McpError::InvalidConfig(format!("bad component count in {s:?}")))
        };
        match s.split_once(':') {
            None => match s {
                "sphere" => Ok(FamilyKind::Sphere),
                "interval" => Ok(FamilyKind::Interval),
                "ellipsoid" => Ok(FamilyKind::Ellipsoid),
                _ => Err(McpError::InvalidConfig(format!("unknown score family {s:?}"))),
            },
            Some(("union", k)) => Ok(FamilyKind::UnionEllipsoid {
                components: count(k)?,
            }),
            Some(("rbf", n)) => Ok(FamilyKind::Rbf { centers: count(n)? }),
            Some(_) => Err(McpError::InvalidConfig(format!("unknown score family {s:?}"))),
        }
    }
}

/// A score family bound to a residual dimension.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreFamily {
    pub kind: FamilyKind,
    pub n_y: usize,
}

/// Parameters `q` of a family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamVector(pub Vec<f64>);

impl ParamVector {
    pub fn new(family: &ScoreFamily, values: Vec<f64>) -> Result<Self> {
        if values.len() != family.n_q() {
            return Err(McpError::DimensionMismatch {
                expected: family.n_q(),
                got: values.len(),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(McpError::Domain("parameter vector has non-finite entries".into()));
        }
        Ok(Self(values))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Axis-aligned box `[lo, hi]`.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundingBox {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl BoundingBox {
    pub fn volume(&self) -> f64 {
        self.lo
            .iter()
            .zip(&self.hi)
            .map(|(l, h)| (h - l).max(0.0))
            .product()
    }

    pub fn contains(&self, r: &[f64]) -> bool {
        r.iter()
            .zip(self.lo.iter().zip(&self.hi))
            .all(|(v, (l, h))| *l <= *v && *v <= *h)
    }

    fn hull(&mut self, other: &BoundingBox) {
        for j in 0..self.lo.len() {
            self.lo[j] = self.lo[j].min(other.lo[j]);
            self.hi[j] = self.hi[j].max(other.hi[j]);
        }
    }
}

/// Ellipsoid factor with floored diagonal, row-major `n x n`.
fn effective_factor(packed: &[f64], n: usize) -> Vec<f64> {
    let mut l = unpack_lower(packed, n);
    for i in 0..n {
        l[i * n + i] = l[i * n + i].max(L_DIAG_FLOOR);
    }
    l
}

/// Quadratic form `‖Lᵀ(r - c)‖² - 1` and its gradient w.r.t. `(c, L)`.
struct EllipsoidBlock<'a> {
    n: usize,
    center: Option<&'a [f64]>,
    packed: &'a [f64],
}

impl EllipsoidBlock<'_> {
    /// Entry `(i, j)`, `j <= i`, of the factor with floored diagonal.
    fn l_at(&self, i: usize, j: usize) -> f64 {
        let v = self.packed[tri_index(i, j)];
        if i == j {
            v.max(L_DIAG_FLOOR)
        } else {
            v
        }
    }

    fn diff_at(&self, r: &[f64], i: usize) -> f64 {
        self.center.map_or(r[i], |c| r[i] - c[i])
    }

    /// `(Lᵀ d)_j`.
    fn projected(&self, r: &[f64], j: usize) -> f64 {
        (j..self.n).map(|i| self.l_at(i, j) * self.diff_at(r, i)).sum()
    }

    fn score(&self, r: &[f64]) -> f64 {
        (0..self.n).map(|j| self.projected(r, j).powi(2)).sum::<f64>() - 1.0
    }

    /// Writes the gradient into `out`: center part first (if any), then the
    /// packed factor.
    fn gradient(&self, r: &[f64], out: &mut [f64]) {
        let n = self.n;
        let v: Vec<f64> = (0..n).map(|j| self.projected(r, j)).collect();
        let offset = if self.center.is_some() {
            // d/dc = -2 L v
            for i in 0..n {
                out[i] = -2.0 * (0..=i).map(|j| self.l_at(i, j) * v[j]).sum::<f64>();
            }
            n
        } else {
            0
        };
        for i in 0..n {
            let d = self.diff_at(r, i);
            for j in 0..=i {
                let active = i != j || self.packed[tri_index(i, i)] > L_DIAG_FLOOR;
                out[offset + tri_index(i, j)] = if active { 2.0 * v[j] * d } else { 0.0 };
            }
        }
    }

    fn cost(&self) -> f64 {
        (0..self.n)
            .map(|i| -2.0 * self.packed[tri_index(i, i)].max(L_DIAG_FLOOR).ln())
            .sum()
    }

    fn cost_gradient(&self, out: &mut [f64]) {
        out.iter_mut().for_each(|g| *g = 0.0);
        for i in 0..self.n {
            let lii = self.packed[tri_index(i, i)];
            if lii > L_DIAG_FLOOR {
                out[tri_index(i, i)] = -2.0 / lii;
            }
        }
    }

    fn bounding_box(&self) -> Result<BoundingBox> {
        let n = self.n;
        let l = effective_factor(self.packed, n);
        let precision = lower_gram(&l, n);
        let cov = spd_inverse(&precision, n)
            .ok_or_else(|| McpError::SingularShape("ellipsoid precision not invertible".into()))?;
        let mut lo = vec![0.0; n];
        let mut hi = vec![0.0; n];
        for i in 0..n {
            let half = cov[i * n + i].max(0.0).sqrt();
            if !half.is_finite() {
                return Err(McpError::SingularShape("unbounded ellipsoid".into()));
            }
            let c = self.center.map_or(0.0, |c| c[i]);
            lo[i] = c - half;
            hi[i] = c + half;
        }
        Ok(BoundingBox { lo, hi })
    }
}

/// Packs `L` with `LLᵀ = precision`, or `None` if not positive definite.
pub fn factor_from_precision(precision: &[f64], n: usize) -> Option<Vec<f64>> {
    cholesky(precision, n).map(|l| crate::numerics::linalg::pack_lower(&l, n))
}

/// Packed factor of the inverse of `cov` scaled by `scale`, with the
/// regularisation fallback for near-singular covariances.
pub(crate) fn factor_from_covariance(cov: &[f64], n: usize, scale: f64) -> Result<Vec<f64>> {
    let mut c: Vec<f64> = cov.iter().map(|v| v * scale).collect();
    if cholesky(&c, n).is_none() {
        log::warn!("singular covariance, adding diagonal regularisation");
        if !regularize(&mut c, n) {
            return Err(McpError::SingularShape("covariance is singular".into()));
        }
    }
    let precision = spd_inverse(&c, n)
        .ok_or_else(|| McpError::SingularShape("covariance is singular".into()))?;
    factor_from_precision(&precision, n)
        .ok_or_else(|| McpError::SingularShape("precision is not positive definite".into()))
}

impl ScoreFamily {
    pub fn new(kind: FamilyKind, n_y: usize) -> Result<Self> {
        make_family(kind, n_y)
    }

    pub fn name(&self) -> String {
        self.kind.to_string()
    }

    pub fn n_q(&self) -> usize {
        let n = self.n_y;
        match self.kind {
            FamilyKind::Sphere => 1,
            FamilyKind::Interval => n,
            FamilyKind::Ellipsoid => tri_len(n),
            FamilyKind::UnionEllipsoid { components } => components * (n + tri_len(n)),
            FamilyKind::Rbf { centers } => centers * (n + 1) + 1,
        }
    }

    pub fn n_s(&self) -> usize {
        match self.kind {
            FamilyKind::Interval => 2 * self.n_y,
            _ => 1,
        }
    }

    /// True where both score and cost are convex in `q`.
    pub fn convex_in_q(&self) -> bool {
        matches!(self.kind, FamilyKind::Sphere | FamilyKind::Interval)
    }

    fn check(&self, q: &[f64], r: &[f64]) -> Result<()> {
        if q.len() != self.n_q() {
            return Err(McpError::DimensionMismatch {
                expected: self.n_q(),
                got: q.len(),
            });
        }
        if r.len() != self.n_y {
            return Err(McpError::DimensionMismatch {
                expected: self.n_y,
                got: r.len(),
            });
        }
        Ok(())
    }

    fn union_block<'a>(&self, q: &'a [f64], i: usize) -> EllipsoidBlock<'a> {
        let n = self.n_y;
        let block = n + tri_len(n);
        let start = i * block;
        EllipsoidBlock {
            n,
            center: Some(&q[start..start + n]),
            packed: &q[start + n..start + block],
        }
    }

    /// Index of the component with the smallest score (union family).
    fn union_argmin(&self, q: &[f64], r: &[f64], components: usize) -> (usize, f64) {
        let mut best = (0, f64::INFINITY);
        for i in 0..components {
            let s = self.union_block(q, i).score(r);
            if s < best.1 {
                best = (i, s);
            }
        }
        best
    }

    /// Unchecked score evaluation; `out` has length `n_s`.
    pub fn eval_into(&self, q: &[f64], r: &[f64], out: &mut [f64]) {
        let n = self.n_y;
        match self.kind {
            FamilyKind::Sphere => out[0] = norm2(r) - q[0].max(0.0),
            FamilyKind::Interval => {
                for j in 0..n {
                    let w = q[j].max(0.0);
                    out[j] = -r[j] - w;
                    out[n + j] = r[j] - w;
                }
            }
            FamilyKind::Ellipsoid => {
                out[0] = EllipsoidBlock {
                    n,
                    center: None,
                    packed: q,
                }
                .score(r)
            }
            FamilyKind::UnionEllipsoid { components } => {
                out[0] = self.union_argmin(q, r, components).1;
            }
            FamilyKind::Rbf { centers } => {
                let (sum, _) = self.rbf_terms(q, r, centers);
                out[0] = q[centers * (n + 1)].max(GAMMA_FLOOR) - sum;
            }
        }
    }

    fn rbf_terms(&self, q: &[f64], r: &[f64], centers: usize) -> (f64, Vec<f64>) {
        let n = self.n_y;
        let mut terms = Vec::with_capacity(centers);
        for i in 0..centers {
            let mu = &q[i * n..(i + 1) * n];
            let sigma = q[centers * n + i].max(SIGMA_FLOOR);
            let d2: f64 = r.iter().zip(mu).map(|(a, b)| (a - b) * (a - b)).sum();
            terms.push((-0.5 * d2 / (sigma * sigma)).exp());
        }
        (terms.iter().sum(), terms)
    }

    /// Unchecked Jacobian `∂s/∂q`, row-major `n_s x n_q`.
    pub fn jacobian_into(&self, q: &[f64], r: &[f64], out: &mut [f64]) {
        let n = self.n_y;
        let n_q = self.n_q();
        out.iter_mut().for_each(|v| *v = 0.0);
        match self.kind {
            FamilyKind::Sphere => out[0] = -1.0,
            FamilyKind::Interval => {
                // Right derivative at the zero floor.
                for j in 0..n {
                    out[j * n_q + j] = -1.0;
                    out[(n + j) * n_q + j] = -1.0;
                }
            }
            FamilyKind::Ellipsoid => EllipsoidBlock {
                n,
                center: None,
                packed: q,
            }
            .gradient(r, out),
            FamilyKind::UnionEllipsoid { components } => {
                let (i, _) = self.union_argmin(q, r, components);
                let block = n + tri_len(n);
                self.union_block(q, i)
                    .gradient(r, &mut out[i * block..(i + 1) * block]);
            }
            FamilyKind::Rbf { centers } => {
                let (_, terms) = self.rbf_terms(q, r, centers);
                for i in 0..centers {
                    let mu = &q[i * n..(i + 1) * n];
                    let raw_sigma = q[centers * n + i];
                    let sigma = raw_sigma.max(SIGMA_FLOOR);
                    let s2 = sigma * sigma;
                    let mut d2 = 0.0;
                    for k in 0..n {
                        let diff = r[k] - mu[k];
                        d2 += diff * diff;
                        out[i * n + k] = -terms[i] * diff / s2;
                    }
                    if raw_sigma > SIGMA_FLOOR {
                        out[centers * n + i] = -terms[i] * d2 / (s2 * sigma);
                    }
                }
                if q[centers * (n + 1)] > GAMMA_FLOOR {
                    out[centers * (n + 1)] = 1.0;
                }
            }
        }
    }

    /// `s(r, q)`.
    pub fn score_eval(&self, q: &ParamVector, r: &[f64]) -> Result<Vec<f64>> {
        self.check(&q.0, r)?;
        let mut out = vec![0.0; self.n_s()];
        self.eval_into(&q.0, r, &mut out);
        Ok(out)
    }

    /// Largest score component, unchecked.
    pub fn max_score(&self, q: &[f64], r: &[f64]) -> f64 {
        if self.kind == FamilyKind::Interval {
            return (0..self.n_y)
                .map(|j| r[j].abs() - q[j].max(0.0))
                .fold(f64::NEG_INFINITY, f64::max);
        }
        let mut out = [0.0];
        self.eval_into(q, r, &mut out);
        out[0]
    }

    /// `max(0, max_j s_j(r, q))`; zero exactly for members.
    pub fn slack(&self, q: &ParamVector, r: &[f64]) -> Result<f64> {
        self.check(&q.0, r)?;
        Ok(self.max_score(&q.0, r).max(0.0))
    }

    pub fn cost_eval(&self, q: &ParamVector) -> Result<f64> {
        if q.0.len() != self.n_q() {
            return Err(McpError::DimensionMismatch {
                expected: self.n_q(),
                got: q.0.len(),
            });
        }
        let c = self.cost(&q.0);
        if !c.is_finite() {
            return Err(McpError::SingularShape("cost is not finite".into()));
        }
        Ok(c)
    }

    /// Unchecked cost.
    pub fn cost(&self, q: &[f64]) -> f64 {
        let n = self.n_y;
        match self.kind {
            FamilyKind::Sphere => q[0].max(0.0),
            FamilyKind::Interval => q.iter().map(|v| v.max(0.0)).sum(),
            FamilyKind::Ellipsoid => EllipsoidBlock {
                n,
                center: None,
                packed: q,
            }
            .cost(),
            FamilyKind::UnionEllipsoid { components } => {
                (0..components).map(|i| self.union_block(q, i).cost()).sum()
            }
            FamilyKind::Rbf { centers } => (0..centers)
                .map(|i| q[centers * n + i].max(SIGMA_FLOOR).powi(2))
                .sum(),
        }
    }

    /// Unchecked cost gradient.
    pub fn cost_gradient(&self, q: &[f64], out: &mut [f64]) {
        let n = self.n_y;
        out.iter_mut().for_each(|v| *v = 0.0);
        match self.kind {
            FamilyKind::Sphere => out[0] = 1.0,
            FamilyKind::Interval => out.iter_mut().for_each(|v| *v = 1.0),
            FamilyKind::Ellipsoid => EllipsoidBlock {
                n,
                center: None,
                packed: q,
            }
            .cost_gradient(out),
            FamilyKind::UnionEllipsoid { components } => {
                let block = n + tri_len(n);
                for i in 0..components {
                    let start = i * block;
                    self.union_block(q, i)
                        .cost_gradient(&mut out[start + n..start + block]);
                }
            }
            FamilyKind::Rbf { centers } => {
                for i in 0..centers {
                    let s = q[centers * n + i];
                    if s > SIGMA_FLOOR {
                        out[centers * n + i] = 2.0 * s;
                    }
                }
            }
        }
    }

    /// Starting parameters fitted to the calibration residuals.
    ///
    /// Sphere and interval start from the smallest set covering every
    /// residual, the ellipsoid from `L = I`, and unions and RBF mixtures from
    /// a k-means fit (seed 0) with per-cluster covariances.
    pub fn init(&self, cal: &ResidualSet) -> Result<Vec<f64>> {
        let n = self.n_y;
        if cal.n_y() != n {
            return Err(McpError::DimensionMismatch {
                expected: n,
                got: cal.n_y(),
            });
        }
        match self.kind {
            FamilyKind::Sphere => Ok(vec![cal.rows().map(norm2).fold(0.0, f64::max)]),
            FamilyKind::Interval => {
                let mut q = vec![0.0_f64; n];
                for row in cal.rows() {
                    for (qj, v) in q.iter_mut().zip(row) {
                        *qj = qj.max(v.abs());
                    }
                }
                Ok(q)
            }
            FamilyKind::Ellipsoid => {
                let mut q = vec![0.0; tri_len(n)];
                for i in 0..n {
                    q[tri_index(i, i)] = 1.0;
                }
                Ok(q)
            }
            FamilyKind::UnionEllipsoid { components } => self.init_union(cal, components),
            FamilyKind::Rbf { centers } => self.init_rbf(cal, centers),
        }
    }

    fn init_union(&self, cal: &ResidualSet, components: usize) -> Result<Vec<f64>> {
        let n = self.n_y;
        if cal.len() < components {
            return Err(McpError::InsufficientData(format!(
                "{components} ellipsoid components need at least {components} residuals"
            )));
        }
        let fit = kmeans(cal, components, 0, 100)?;
        let global_var: f64 = {
            let cov = cal.covariance();
            ((0..n).map(|i| cov[i * n + i]).sum::<f64>() / n as f64).max(1e-12)
        };
        let mut q = Vec::with_capacity(self.n_q());
        for (k, center) in fit.centers.iter().enumerate() {
            let members: Vec<usize> = (0..cal.len()).filter(|&m| fit.assignment[m] == k).collect();
            let cluster = cal.select(&members);
            let mut cov = if members.len() > n {
                cluster.covariance()
            } else {
                let mut c = vec![0.0; n * n];
                for i in 0..n {
                    c[i * n + i] = global_var / components as f64;
                }
                c
            };
            if cholesky(&cov, n).is_none() && !regularize(&mut cov, n) {
                for i in 0..n {
                    cov[i * n + i] += global_var * 1e-3;
                }
            }
            // Scale so 90% of the cluster lies inside its ellipsoid.
            let base = factor_from_covariance(&cov, n, 1.0)?;
            let block = EllipsoidBlock {
                n,
                center: Some(center),
                packed: &base,
            };
            let mut d: Vec<f64> = cluster.rows().map(|r| block.score(r) + 1.0).collect();
            let scale = if d.is_empty() {
                1.0
            } else {
                d.sort_by(f64::total_cmp);
                let idx = ((0.9 * d.len() as f64).ceil() as usize).clamp(1, d.len()) - 1;
                d[idx].max(1e-12)
            };
            q.extend_from_slice(center);
            q.extend(base.iter().map(|v| v / scale.sqrt()));
        }
        Ok(q)
    }

    fn init_rbf(&self, cal: &ResidualSet, centers: usize) -> Result<Vec<f64>> {
        let n = self.n_y;
        if cal.len() < centers {
            return Err(McpError::InsufficientData(format!(
                "{centers} RBF centers need at least {centers} residuals"
            )));
        }
        let fit = kmeans(cal, centers, 0, 100)?;
        let mut q = Vec::with_capacity(self.n_q());
        for c in &fit.centers {
            q.extend_from_slice(c);
        }
        for (k, c) in fit.centers.iter().enumerate() {
            let (sum, count) = cal
                .rows()
                .zip(&fit.assignment)
                .filter(|(_, &a)| a == k)
                .fold((0.0, 0usize), |(s, m), (r, _)| {
                    (s + r.iter().zip(c).map(|(a, b)| (a - b).powi(2)).sum::<f64>(), m + 1)
                });
            let sigma = if count > 0 {
                (sum / (count * n) as f64).sqrt()
            } else {
                1.0
            };
            q.push(sigma.max(SIGMA_FLOOR));
        }
        q.push(GAMMA_FLOOR);
        Ok(q)
    }

    /// Axis-aligned box containing every member of the set.
    pub fn bounding_box(&self, q: &ParamVector, cal: &ResidualSet) -> Result<BoundingBox> {
        let _ = cal;
        let q = &q.0;
        if q.len() != self.n_q() {
            return Err(McpError::DimensionMismatch {
                expected: self.n_q(),
                got: q.len(),
            });
        }
        let n = self.n_y;
        match self.kind {
            FamilyKind::Sphere => {
                let r = q[0].max(0.0);
                Ok(BoundingBox {
                    lo: vec![-r; n],
                    hi: vec![r; n],
                })
            }
            FamilyKind::Interval => Ok(BoundingBox {
                lo: q.iter().map(|v| -v.max(0.0)).collect(),
                hi: q.iter().map(|v| v.max(0.0)).collect(),
            }),
            FamilyKind::Ellipsoid => EllipsoidBlock {
                n,
                center: None,
                packed: q,
            }
            .bounding_box(),
            FamilyKind::UnionEllipsoid { components } => {
                let mut bbox = self.union_block(q, 0).bounding_box()?;
                for i in 1..components {
                    bbox.hull(&self.union_block(q, i).bounding_box()?);
                }
                Ok(bbox)
            }
            FamilyKind::Rbf { centers } => {
                // A member has exp(-d²/2σᵢ²) >= γ/N for some i.
                let gamma = q[centers * (n + 1)].max(GAMMA_FLOOR);
                let ratio = centers as f64 / gamma;
                let reach = if ratio > 1.0 { (2.0 * ratio.ln()).sqrt() } else { 0.0 };
                let mut bbox: Option<BoundingBox> = None;
                for i in 0..centers {
                    let mu = &q[i * n..(i + 1) * n];
                    let half = reach * q[centers * n + i].max(SIGMA_FLOOR);
                    let b = BoundingBox {
                        lo: mu.iter().map(|m| m - half).collect(),
                        hi: mu.iter().map(|m| m + half).collect(),
                    };
                    match bbox.as_mut() {
                        Some(acc) => acc.hull(&b),
                        None => bbox = Some(b),
                    }
                }
                Ok(bbox.expect("at least one center"))
            }
        }
    }
}

/// Builds a family, validating the dimension and component counts.
pub fn make_family(kind: FamilyKind, n_y: usize) -> Result<ScoreFamily> {
    if n_y < 1 {
        return Err(McpError::UnsupportedDimension(
            "residual dimension must be at least 1".into(),
        ));
    }
    match kind {
        FamilyKind::UnionEllipsoid { components: 0 } | FamilyKind::Rbf { centers: 0 } => {
            Err(McpError::InvalidConfig(format!("{kind} needs at least one component")))
        }
        _ => Ok(ScoreFamily { kind, n_y }),
    }
}

/// A family together with calibrated parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionSet {
    pub family: ScoreFamily,
    pub q: ParamVector,
}

impl PredictionSet {
    pub fn new(family: ScoreFamily, q: Vec<f64>) -> Result<Self> {
        let q = ParamVector::new(&family, q)?;
        Ok(Self { family, q })
    }

    /// True iff every score component is non-positive.
    pub fn membership(&self, r: &[f64]) -> Result<bool> {
        self.family.check(&self.q.0, r)?;
        Ok(self.family.max_score(&self.q.0, r) <= 0.0)
    }

    pub fn contains(&self, r: &[f64]) -> bool {
        self.family.max_score(&self.q.0, r) <= 0.0
    }

    pub fn bounding_box(&self, cal: &ResidualSet) -> Result<BoundingBox> {
        self.family.bounding_box(&self.q, cal)
    }
}

/// Constraints `s(r_m, q) <= 0` for a subset of calibration residuals.
pub struct SampleConstraints<'a> {
    pub family: &'a ScoreFamily,
    pub cal: &'a ResidualSet,
    pub indices: Vec<usize>,
}

impl ConstraintSet for SampleConstraints<'_> {
    fn n_components(&self) -> usize {
        self.family.n_s()
    }

    fn indices(&self) -> &[usize] {
        &self.indices
    }

    fn eval(&self, index: usize, q: &[f64], out: &mut [f64]) {
        self.family.eval_into(q, self.cal.row(index), out);
    }

    fn jacobian(&self, index: usize, q: &[f64], out: &mut [f64]) {
        self.family.jacobian_into(q, self.cal.row(index), out);
    }
}

use crate::error::{McpError, Result};
use crate::residuals::ResidualSet;
use crate::rng::SeededRng;

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    /// `K` centers, each of length `n_y`.
    pub centers: Vec<Vec<f64>>,
    pub assignment: Vec<usize>,
    pub inertia: f64,
    /// Inertia after each assignment step.
    pub history: Vec<f64>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(point: &[f64], centers: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (k, c) in centers.iter().enumerate() {
        let d = sq_dist(point, c);
        if d < best.1 {
            best = (k, d);
        }
    }
    best
}

/// Lloyd's algorithm from k-means++ seeding. Stops when assignments no longer
/// change or after `max_iters` iterations.
pub fn kmeans(points: &ResidualSet, k: usize, seed: u64, max_iters: usize) -> Result<KMeansResult> {
    let n = points.len();
    if n == 0 {
        return Err(McpError::EmptyInput("k-means needs at least one point".into()));
    }
    if k == 0 || k > n {
        return Err(McpError::Domain(format!(
            "k-means needs 1 <= K <= {n} points, got K = {k}"
        )));
    }
    if !points.is_finite() {
        return Err(McpError::Domain("k-means input contains non-finite values".into()));
    }
    let mut rng = SeededRng::new(seed);

    let mut centers = vec![points.row(rng.index(n)).to_vec()];
    let mut d2: Vec<f64> = points.rows().map(|p| sq_dist(p, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.uniform() * total;
            let mut acc = 0.0;
            let mut chosen = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                acc += d;
                if acc > target && d > 0.0 {
                    chosen = i;
                    break;
                }
            }
            chosen
        } else {
            rng.index(n)
        };
        let c = points.row(pick).to_vec();
        for (d, p) in d2.iter_mut().zip(points.rows()) {
            *d = d.min(sq_dist(p, &c));
        }
        centers.push(c);
    }

    let n_y = points.n_y();
    let mut assignment = vec![usize::MAX; n];
    let mut history = Vec::new();
    let mut inertia = 0.0;
    for _ in 0..max_iters.max(1) {
        let mut changed = false;
        inertia = 0.0;
        for (i, p) in points.rows().enumerate() {
            let (c, d) = nearest(p, &centers);
            inertia += d;
            if assignment[i] != c {
                assignment[i] = c;
                changed = true;
            }
        }
        history.push(inertia);
        if !changed {
            break;
        }
        let mut sums = vec![vec![0.0; n_y]; k];
        let mut counts = vec![0usize; k];
        for (p, &c) in points.rows().zip(&assignment) {
            counts[c] += 1;
            for (s, v) in sums[c].iter_mut().zip(p) {
                *s += v;
            }
        }
        for c in 0..k {
            // An emptied cluster keeps its previous center.
            if counts[c] > 0 {
                for (dst, s) in centers[c].iter_mut().zip(&sums[c]) {
                    *dst = s / counts[c] as f64;
                }
            }
        }
    }
    // Final assignment against the final centers.
    inertia = inertia.min(
        points
            .rows()
            .zip(&assignment)
            .map(|(p, &c)| sq_dist(p, &centers[c]))
            .sum(),
    );

    Ok(KMeansResult {
        centers,
        assignment,
        inertia,
        history,
    })
}

use serde::{Deserialize, Serialize};

use crate::error::{McpError, Result};

/// Row-major matrix of residuals `r = y - f(x)`, one row per sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualSet {
    n_y: usize,
    data: Vec<f64>,
}

impl ResidualSet {
    pub fn new(n_y: usize, data: Vec<f64>) -> Result<Self> {
        if n_y == 0 {
            return Err(McpError::UnsupportedDimension(
                "residual dimension must be at least 1".into(),
            ));
        }
        if data.len() % n_y != 0 {
            return Err(McpError::DimensionMismatch {
                expected: n_y * (data.len() / n_y + 1),
                got: data.len(),
            });
        }
        Ok(Self { n_y, data })
    }

    pub fn empty(n_y: usize) -> Result<Self> {
        Self::new(n_y, Vec::new())
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let first = rows
            .first()
            .ok_or_else(|| McpError::EmptyInput("no rows".into()))?;
        let n_y = first.as_ref().len();
        let mut data = Vec::with_capacity(n_y * rows.len());
        for row in rows {
            let row = row.as_ref();
            if row.len() != n_y {
                return Err(McpError::DimensionMismatch {
                    expected: n_y,
                    got: row.len(),
                });
            }
            data.extend_from_slice(row);
        }
        Self::new(n_y, data)
    }

    /// One-dimensional set from scalar values.
    pub fn from_scalars(values: &[f64]) -> Self {
        Self {
            n_y: 1,
            data: values.to_vec(),
        }
    }

    pub fn n_y(&self) -> usize {
        self.n_y
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.n_y
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n_y..(i + 1) * self.n_y]
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        self.data.chunks_exact(self.n_y)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn push(&mut self, row: &[f64]) -> Result<()> {
        if row.len() != self.n_y {
            return Err(McpError::DimensionMismatch {
                expected: self.n_y,
                got: row.len(),
            });
        }
        self.data.extend_from_slice(row);
        Ok(())
    }

    /// New set holding the given rows, in the given order.
    pub fn select(&self, indices: &[usize]) -> Self {
        let mut data = Vec::with_capacity(indices.len() * self.n_y);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Self {
            n_y: self.n_y,
            data,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn mean(&self) -> Vec<f64> {
        let mut mean = vec![0.0; self.n_y];
        for row in self.rows() {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        let n = self.len().max(1) as f64;
        mean.iter_mut().for_each(|m| *m /= n);
        mean
    }

    /// Unbiased sample covariance, row-major `n_y x n_y`.
    pub fn covariance(&self) -> Vec<f64> {
        let d = self.n_y;
        let mean = self.mean();
        let mut cov = vec![0.0; d * d];
        for row in self.rows() {
            for i in 0..d {
                let ci = row[i] - mean[i];
                for j in 0..=i {
                    cov[i * d + j] += ci * (row[j] - mean[j]);
                }
            }
        }
        let denom = (self.len() as f64 - 1.0).max(1.0);
        for i in 0..d {
            for j in 0..=i {
                let v = cov[i * d + j] / denom;
                cov[i * d + j] = v;
                cov[j * d + i] = v;
            }
        }
        cov
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rows_and_select() {
        let set = ResidualSet::from_rows(&[[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]]).unwrap();
        assert_eq!(set.len(), 3);
        assert_eq!(set.row(1), &[3.0, 4.0]);
        let sub = set.select(&[2, 0]);
        assert_eq!(sub.as_slice(), &[5.0, 6.0, 1.0, 2.0]);
    }

    #[test]
    fn ragged_construction_fails() {
        assert!(ResidualSet::new(2, vec![1.0, 2.0, 3.0]).is_err());
        assert!(ResidualSet::new(0, vec![]).is_err());
    }

    #[test]
    fn covariance_of_known_points() {
        let set = ResidualSet::from_rows(&[[1.0, 0.0], [-1.0, 0.0], [0.0, 2.0], [0.0, -2.0]])
            .unwrap();
        let cov = set.covariance();
        assert!((cov[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((cov[3] - 8.0 / 3.0).abs() < 1e-12);
        assert!(cov[1].abs() < 1e-12);
    }
}

use crate::error::{McpError, Result};

/// Bisection for a monotone `f` with a sign change on `[lo, hi]`.
///
/// Returns the midpoint of the final bracket, whose width is at most `tol`.
/// An exact zero at an endpoint is returned as is.
pub fn bisect_root(f: impl Fn(f64) -> f64, lo: f64, hi: f64, tol: f64) -> Result<f64> {
    if !(tol > 0.0) || !(lo <= hi) {
        return Err(McpError::Domain(format!(
            "bisection needs lo <= hi and tol > 0; got [{lo}, {hi}], tol={tol}"
        )));
    }
    let f_lo = f(lo);
    let f_hi = f(hi);
    if f_lo == 0.0 {
        return Ok(lo);
    }
    if f_hi == 0.0 {
        return Ok(hi);
    }
    if f_lo.signum() == f_hi.signum() || f_lo.is_nan() || f_hi.is_nan() {
        return Err(McpError::NoBracket { f_lo, f_hi });
    }
    let rising = f_hi > 0.0;
    let (mut a, mut b) = (lo, hi);
    while b - a > tol {
        let mid = 0.5 * (a + b);
        if mid <= a || mid >= b {
            break;
        }
        let fm = f(mid);
        if fm == 0.0 {
            return Ok(mid);
        }
        if (fm > 0.0) == rising {
            b = mid;
        } else {
            a = mid;
        }
    }
    Ok(0.5 * (a + b))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_root_of_two() {
        let x = bisect_root(|x| x * x - 2.0, 1.0, 2.0, 1e-12).unwrap();
        assert!((x - std::f64::consts::SQRT_2).abs() < 1e-12);
    }

    #[test]
    fn linear() {
        let x = bisect_root(|x| x - 0.5, 0.0, 1.0, 1e-12).unwrap();
        assert!((x - 0.5).abs() < 1e-12);
    }

    #[test]
    fn log_three_against_series() {
        // ln 3 = 2 atanh(1/2) = 2 sum_k (1/2)^(2k+1) / (2k+1)
        let series: f64 = (0..60)
            .map(|k| 2.0 * 0.5f64.powi(2 * k + 1) / (2 * k + 1) as f64)
            .sum();
        let x = bisect_root(|x| x.exp() - 3.0, 0.0, 2.0, 1e-12).unwrap();
        assert!((x - series).abs() < 1e-11);
        assert!((x - 1.0986).abs() < 1e-4);
    }

    #[test]
    fn decreasing_functions_also_bracket() {
        let x = bisect_root(|x| 1.0 - x, 0.0, 3.0, 1e-12).unwrap();
        assert!((x - 1.0).abs() < 1e-12);
    }

    #[test]
    fn same_sign_is_rejected() {
        let err = bisect_root(|x| x * x + 1.0, -1.0, 1.0, 1e-6).unwrap_err();
        assert!(matches!(err, McpError::NoBracket { .. }));
    }

    #[test]
    fn halving_tolerance_is_stable() {
        let a = bisect_root(|x| x.powi(3) - 5.0, 0.0, 3.0, 1e-12).unwrap();
        let b = bisect_root(|x| x.powi(3) - 5.0, 0.0, 3.0, 5e-13).unwrap();
        assert!((a - b).abs() <= 10.0 * 1e-12);
    }
}

//! Error normalization and log-log slope fits.

use crate::error::{HarnessError, Result};

/// Points used by [`tail_slope`] before the first one is discarded.
pub const TAIL_POINTS: usize = 5;

/// `max(test − floor, 0) / truth`.
pub fn shifted_relative_error(test_error: f64, floor: f64, truth_norm_sq: f64) -> f64 {
    assert!(truth_norm_sq > 0.0, "ground-truth norm must be positive");
    (test_error - floor).max(0.0) / truth_norm_sq
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Slope {
    pub slope: f64,
    pub std_error: f64,
    pub points: usize,
}

/// OLS of `ln error` on `ln axis` after dropping the first grid point and any
/// non-positive errors.
pub fn fit_slope(points: &[(f64, f64)]) -> Result<Slope> {
    let kept: Vec<(f64, f64)> = points
        .iter()
        .skip(1)
        .filter(|(x, y)| *x > 0.0 && *y > 0.0 && y.is_finite())
        .map(|(x, y)| (x.ln(), y.ln()))
        .collect();
    let k = kept.len();
    if k < 4 {
        return Err(HarnessError::InsufficientPoints);
    }
    let kf = k as f64;
    let mx = kept.iter().map(|p| p.0).sum::<f64>() / kf;
    let my = kept.iter().map(|p| p.1).sum::<f64>() / kf;
    let sxx: f64 = kept.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = kept.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    if sxx == 0.0 {
        return Err(HarnessError::InsufficientPoints);
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ssr: f64 = kept.iter().map(|p| (p.1 - intercept - slope * p.0).powi(2)).sum();
    Ok(Slope {
        slope,
        std_error: (ssr / (kf - 2.0) / sxx).sqrt(),
        points: k,
    })
}

/// Slope over the last [`TAIL_POINTS`] grid points.
pub fn tail_slope(points: &[(f64, f64)]) -> Result<Slope> {
    let start = points.len().saturating_sub(TAIL_POINTS);
    fit_slope(&points[start..])
}

#[cfg(test)]
mod tests {
    use super::*;
    use icl_core::Rng;
    use proptest::prelude::*;

    fn grid() -> Vec<f64> {
        (0..8).map(|k| 16.0 * 2f64.powi(k)).collect()
    }

    #[test]
    fn shifted_error_examples() {
        assert_eq!(shifted_relative_error(0.2, 0.2, 1.0), 0.0);
        assert_eq!(shifted_relative_error(0.37, 0.0, 1.0), 0.37);
        assert!((shifted_relative_error(0.30, 0.10, 0.50) - 0.40).abs() < 1e-15);
        assert_eq!(shifted_relative_error(0.1, 0.3, 1.0), 0.0);
    }

    #[test]
    fn exact_power_laws() {
        let pts: Vec<(f64, f64)> = grid().iter().map(|x| (*x, 3.0 * x.powi(-2))).collect();
        let s = fit_slope(&pts).unwrap();
        assert!((s.slope + 2.0).abs() < 1e-12);
        assert_eq!(s.points, 7);
        let pts: Vec<(f64, f64)> = grid().iter().map(|x| (*x, 0.5 / x)).collect();
        assert!((fit_slope(&pts).unwrap().slope + 1.0).abs() < 1e-12);
    }

    #[test]
    fn noisy_power_law() {
        let mut rng = Rng::new(1, 0);
        for _ in 0..50 {
            let pts: Vec<(f64, f64)> = grid()
                .iter()
                .map(|x| (*x, x.powf(-1.5) * (1.0 + 0.1 * rng.uniform(-1.0, 1.0))))
                .collect();
            assert!((fit_slope(&pts).unwrap().slope + 1.5).abs() < 0.15);
        }
    }

    #[test]
    fn drops_first_and_non_positive() {
        let mut pts: Vec<(f64, f64)> = grid().iter().map(|x| (*x, 1.0 / x)).collect();
        pts[0].1 = 1e9;
        pts[3].1 = 0.0;
        pts[4].1 = -1.0;
        let s = fit_slope(&pts).unwrap();
        assert_eq!(s.points, 5);
        assert!((s.slope + 1.0).abs() < 1e-12);
        assert!(matches!(fit_slope(&pts[..5]), Err(HarnessError::InsufficientPoints)));
        assert!(matches!(fit_slope(&pts[..4]), Err(HarnessError::InsufficientPoints)));
    }

    #[test]
    fn tail_uses_last_points() {
        let mut pts: Vec<(f64, f64)> = grid().iter().map(|x| (*x, 1.0 / x)).collect();
        for p in pts.iter_mut().skip(3) {
            p.1 = 0.01;
        }
        assert!(tail_slope(&pts).unwrap().slope.abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn recovers_any_exact_slope(slope in -3.0f64..1.0, c in 0.01f64..100.0) {
            let pts: Vec<(f64, f64)> = grid().iter().map(|x| (*x, c * x.powf(slope))).collect();
            let s = fit_slope(&pts).unwrap();
            prop_assert!((s.slope - slope).abs() < 1e-10);
            prop_assert!(s.std_error < 1e-8);
        }
    }
}

use super::Matrix;
use crate::error::{Error, Result};

pub const DEFAULT_STEP: f64 = 1e-4;

/// Max over coordinates of `|central difference − analytic| / max(|analytic|, 1e-8)`.
pub fn finite_difference_check<F>(f: F, x: &Matrix, analytic: &Matrix, step: f64) -> Result<f64>
where
    F: Fn(&Matrix) -> Result<f64>,
{
    if !(step > 0.0) {
        return Err(Error::Numeric(format!("step must be positive, got {step}")));
    }
    if x.shape() != analytic.shape() {
        return Err(Error::Shape(format!(
            "gradient {:?} for input {:?}",
            analytic.shape(),
            x.shape()
        )));
    }
    let mut probe = x.clone();
    let mut worst: f64 = 0.0;
    for idx in 0..x.as_slice().len() {
        let orig = probe.as_slice()[idx];
        probe.as_mut_slice()[idx] = orig + step;
        let plus = f(&probe)?;
        probe.as_mut_slice()[idx] = orig - step;
        let minus = f(&probe)?;
        probe.as_mut_slice()[idx] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::Numeric(format!(
                "objective not finite around coordinate {idx}"
            )));
        }
        let numeric = (plus - minus) / (2.0 * step);
        let a = analytic.as_slice()[idx];
        worst = worst.max((numeric - a).abs() / a.abs().max(1e-8));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::RngStream;

    fn sum_sq(x: &Matrix) -> Result<f64> {
        Ok(x.as_slice().iter().map(|v| v * v).sum())
    }

    #[test]
    fn quadratic_is_exact() {
        let mut rng = RngStream::for_stream(1, "fd", 0, 0);
        let x = rng.normal_matrix(3, 3, 2.0);
        let grad = x.scaled(2.0);
        assert!(finite_difference_check(sum_sq, &x, &grad, DEFAULT_STEP).unwrap() <= 1e-8);
    }

    #[test]
    fn wrong_gradient_is_reported() {
        let x = Matrix::from_rows(&[[1.0, -2.0, 0.5]]).unwrap();
        let wrong = x.scaled(4.0);
        let err = finite_difference_check(sum_sq, &x, &wrong, DEFAULT_STEP).unwrap();
        assert!((err - 0.5).abs() < 1e-6, "{err}");
        // Relative to the analytic value: a doubled gradient is off by 50%, a halved one by 100%.
        let halved = x.clone();
        let err = finite_difference_check(sum_sq, &x, &halved, DEFAULT_STEP).unwrap();
        assert!((err - 1.0).abs() < 1e-6, "{err}");
    }

    #[test]
    fn non_finite_objective_errors() {
        let x = Matrix::zeros(1, 2);
        let r = finite_difference_check(|_| Ok(f64::INFINITY), &x, &x, DEFAULT_STEP);
        assert!(matches!(r, Err(Error::Numeric(_))));
    }
}

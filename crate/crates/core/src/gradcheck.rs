//! Central finite-difference gradient verification.
//!
//! Always run in `f64`: the checks compare analytical backward passes
//! against `(f(x + h) - f(x - h)) / 2h` elementwise.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;

/// Outcome of a gradient check.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
}

/// Relative error with denominator `max(|a|, |b|, 1e-8)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs().max(b.abs())).max(1e-8)
}

/// Compare an analytical gradient of a scalar-valued function against
/// central finite differences at `point`.
///
/// `f` is re-evaluated with perturbed copies of `point`; `analytic` must
/// have the same shape as `point`. Non-finite values in either gradient are
/// reported as errors naming the offending index.
pub fn grad_check<F>(
    mut f: F,
    point: &Tensor<f64>,
    analytic: &Tensor<f64>,
    step: f64,
) -> Result<GradCheckReport>
where
    F: FnMut(&Tensor<f64>) -> f64,
{
    if analytic.shape() != point.shape() {
        return Err(Error::Shape(format!(
            "analytic gradient {:?} vs point {:?}",
            analytic.shape(),
            point.shape()
        )));
    }
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: 0,
        worst_analytic: 0.0,
        worst_numeric: 0.0,
    };
    let mut probe = point.clone();
    for i in 0..point.len() {
        let orig = point.data()[i];
        probe.data_mut()[i] = orig + step;
        let up = f(&probe);
        probe.data_mut()[i] = orig - step;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * step);
        let a = analytic.data()[i];
        if !numeric.is_finite() || !a.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite gradient at index {i}: analytic {a}, numeric {numeric}"
            )));
        }
        let rel = relative_error(a, numeric);
        if rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst_index = i;
            report.worst_analytic = a;
            report.worst_numeric = numeric;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::{conv2d, conv2d_backward, linear, linear_backward, relu, relu_backward};
    use crate::rng::Rng;

    #[test]
    fn linear_layer_gradients_check_out() {
        let mut rng = Rng::new(21);
        let x = Tensor::<f64>::random_normal(&[4], 1.0, &mut rng);
        let w = Tensor::<f64>::random_normal(&[2, 4], 1.0, &mut rng);
        let b = Tensor::<f64>::random_normal(&[2], 1.0, &mut rng);
        let ones = Tensor::filled(&[2], 1.0);
        let (dx, dw, db) = linear_backward(&x, &w, &b, &ones).unwrap();

        let r = grad_check(|p| linear(p, &w, &b).unwrap().sum(), &x, &dx, DEFAULT_STEP).unwrap();
        assert!(r.max_rel_error < 1e-6, "dx rel err {}", r.max_rel_error);

        let r = grad_check(|p| linear(&x, p, &b).unwrap().sum(), &w, &dw, DEFAULT_STEP).unwrap();
        assert!(r.max_rel_error < 1e-6, "dw rel err {}", r.max_rel_error);

        let r = grad_check(|p| linear(&x, &w, p).unwrap().sum(), &b, &db, DEFAULT_STEP).unwrap();
        assert!(r.max_rel_error < 1e-6, "db rel err {}", r.max_rel_error);
    }

    #[test]
    fn conv_kernel_and_input_gradients_check_out() {
        let mut rng = Rng::new(22);
        let x = Tensor::<f64>::random_normal(&[2, 6, 6], 1.0, &mut rng);
        let k = Tensor::<f64>::random_normal(&[3, 2, 3, 3], 1.0, &mut rng);
        let out = conv2d(&x, &k, 2, 1).unwrap();
        let ones = Tensor::filled(out.shape(), 1.0);
        let (dx, dk) = conv2d_backward(&x, &k, 2, 1, &ones).unwrap();

        let r = grad_check(|p| conv2d(p, &k, 2, 1).unwrap().sum(), &x, &dx, DEFAULT_STEP).unwrap();
        assert!(r.max_rel_error < 1e-6, "dx rel err {}", r.max_rel_error);

        let r = grad_check(|p| conv2d(&x, p, 2, 1).unwrap().sum(), &k, &dk, DEFAULT_STEP).unwrap();
        assert!(r.max_rel_error < 1e-6, "dk rel err {}", r.max_rel_error);
    }

    #[test]
    fn relu_gradient_away_from_kink() {
        let x = Tensor::<f64>::from_vec(&[2], vec![-1.0, 2.0]).unwrap();
        let g = relu_backward(&x, &Tensor::filled(&[2], 1.0));
        assert_eq!(g.data(), &[0.0, 1.0]);
        // points bounded away from 0 by more than 10 * step
        let r = grad_check(|p| relu(p).sum(), &x, &g, DEFAULT_STEP).unwrap();
        assert!(r.max_rel_error < 1e-6, "rel err {}", r.max_rel_error);
    }

    #[test]
    fn reports_non_finite_gradients() {
        let x = Tensor::<f64>::from_vec(&[2], vec![1.0, 2.0]).unwrap();
        let bad = Tensor::<f64>::from_vec(&[2], vec![f64::NAN, 0.0]).unwrap();
        let err = grad_check(|p| p.sum(), &x, &bad, DEFAULT_STEP).unwrap_err();
        assert!(err.to_string().contains("index 0"), "{err}");
    }
}

//! Central finite-difference gradient checking.

use crate::grad::tensor::Tensor;

/// Default step for central differences.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Central-difference gradient of `f` at `at`, one entry at a time.
pub fn numerical_grad(at: &Tensor, f: impl Fn(&Tensor) -> f64, step: f64) -> Tensor {
    let mut point = at.detach();
    let mut grad = Tensor::zeros(at.rows(), at.cols());
    for i in 0..at.rows() * at.cols() {
        let orig = point.data()[i];
        point.data_mut()[i] = orig + step;
        let up = f(&point);
        point.data_mut()[i] = orig - step;
        let down = f(&point);
        point.data_mut()[i] = orig;
        grad.data_mut()[i] = (up - down) / (2.0 * step);
    }
    grad
}

/// Compares an analytic gradient against a numerical one entry by entry:
/// relative error below `rel_tol`, falling back to an absolute tolerance of
/// 1e-8 where the gradient magnitude is under 1e-6.
pub fn max_grad_mismatch(analytic: &Tensor, numeric: &Tensor, rel_tol: f64) -> Option<(usize, f64, f64)> {
    assert_eq!(analytic.shape(), numeric.shape());
    for (i, (&a, &n)) in analytic.iter().zip(numeric.iter()).enumerate() {
        let scale = a.abs().max(n.abs());
        let ok = if scale < 1e-6 {
            (a - n).abs() < 1e-8
        } else {
            (a - n).abs() / scale < rel_tol
        };
        if !ok {
            return Some((i, a, n));
        }
    }
    None
}

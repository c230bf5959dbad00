//! Central finite differences, used as an independent oracle for the
//! analytic gradients recorded on a [`crate::autograd::Tape`].

use crate::tensor::Tensor;

/// Step used by every finite-difference check in the crate.
pub const FD_STEP: f64 = 1e-5;

/// Central-difference gradient of a scalar function at `x`.
pub fn numeric_grad(x: &Tensor, mut f: impl FnMut(&Tensor) -> f64) -> Tensor {
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + FD_STEP;
        let up = f(&probe);
        probe.data_mut()[i] = orig - FD_STEP;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (up - down) / (2.0 * FD_STEP);
    }
    grad
}

/// Norm-wise relative error `|a - b| / max(|a|, |b|)`, with a floor of
/// `1e-12` on the denominator so two vanishing gradients compare equal.
pub fn relative_error(analytic: &Tensor, numeric: &Tensor) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape());
    let diff = analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    diff / analytic.norm().max(numeric.norm()).max(1e-12)
}

/// Panics with both gradients in the message when the relative error
/// exceeds `tol`.
pub fn assert_grad_close(analytic: &Tensor, numeric: &Tensor, tol: f64) {
    let err = relative_error(analytic, numeric);
    assert!(
        err < tol,
        "gradient mismatch: relative error {err:.3e} >= {tol:.1e}\n analytic {analytic:?}\n numeric  {numeric:?}"
    );
}

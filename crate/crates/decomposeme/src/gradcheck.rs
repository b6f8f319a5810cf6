//! Finite-difference gradient checking.

use crate::tensor::Tensor;

/// Compare an analytic gradient against central finite differences.
///
/// `value` maps a tensor to a scalar (accumulated in f64); `analytic`
/// is the claimed gradient of that scalar at `input`. Every coordinate
/// is perturbed by `+/- eps` and the worst relative error
/// `|fd - analytic| / max(1, |fd|, |analytic|)` is returned.
pub fn grad_check<F>(value: F, analytic: &Tensor, input: &Tensor, eps: f32) -> f64
where
    F: Fn(&Tensor) -> f64,
{
    assert_eq!(
        analytic.shape(),
        input.shape(),
        "analytic gradient shape must match the input"
    );
    let mut worst = 0.0f64;
    let mut probe = input.clone();
    for i in 0..input.len() {
        let original = probe.data()[i];
        probe.data_mut()[i] = original + eps;
        let plus = value(&probe);
        probe.data_mut()[i] = original - eps;
        let minus = value(&probe);
        probe.data_mut()[i] = original;

        let fd = (plus - minus) / (2.0 * f64::from(eps));
        let an = f64::from(analytic.data()[i]);
        let rel = (fd - an).abs() / 1.0f64.max(fd.abs()).max(an.abs());
        if rel > worst {
            worst = rel;
        }
    }
    worst
}

//! Central finite differences, used as an independent oracle for analytic gradients.

use crate::tensor::Tensor;

/// Central-difference gradient of `f` with respect to `inputs[which]`.
pub fn numeric_gradient(f: impl Fn(&[Tensor]) -> f64, inputs: &[Tensor], which: usize, step: f64) -> Tensor {
    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut grad = Tensor::zeros(inputs[which].shape().to_vec());
    for i in 0..inputs[which].len() {
        let orig = work[which].data()[i];
        work[which].data_mut()[i] = orig + step;
        let plus = f(&work);
        work[which].data_mut()[i] = orig - step;
        let minus = f(&work);
        work[which].data_mut()[i] = orig;
        grad.data_mut()[i] = (plus - minus) / (2.0 * step);
    }
    grad
}

/// `max |a - b| / max(|a|_inf, |b|_inf)`; zero when both are identically zero.
pub fn relative_error(analytic: &Tensor, numeric: &Tensor) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape(), "gradient shapes differ");
    let scale = analytic.max_abs().max(numeric.max_abs());
    if scale == 0.0 {
        return 0.0;
    }
    let diff = analytic.data().iter().zip(numeric.data()).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    diff / scale
}

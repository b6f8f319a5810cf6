//! Pointwise nonlinearities.

use crate::tensor::Tensor;

/// Elementwise `max(x, 0)`.
pub fn relu(input: &Tensor) -> Tensor {
    let data = input.data().iter().map(|&v| v.max(0.0)).collect();
    Tensor::from_vec(input.shape(), data).expect("same shape")
}

/// ReLU gradient: passes `grad_out` where the forward input was
/// strictly positive. A tie at exactly 0 gets gradient 0.
pub fn relu_backward(input: &Tensor, grad_out: &Tensor) -> Tensor {
    assert_eq!(input.shape(), grad_out.shape(), "relu backward shape");
    let data = input
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::from_vec(input.shape(), data).expect("same shape")
}

/// Elementwise hyperbolic tangent.
pub fn tanh(input: &Tensor) -> Tensor {
    let data = input.data().iter().map(|&v| v.tanh()).collect();
    Tensor::from_vec(input.shape(), data).expect("same shape")
}

/// Tanh gradient: `grad_out * (1 - tanh(x)^2)`.
pub fn tanh_backward(input: &Tensor, grad_out: &Tensor) -> Tensor {
    assert_eq!(input.shape(), grad_out.shape(), "tanh backward shape");
    let data = input
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&x, &g)| {
            let t = x.tanh();
            g * (1.0 - t * t)
        })
        .collect();
    Tensor::from_vec(input.shape(), data).expect("same shape")
}

use super::tensor::Tensor;

#[inline]
pub fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + super::fmath::expf(-x))
}

/// Elementwise `x * sigmoid(x)`.
pub fn silu(input: &Tensor) -> Tensor {
    input.map(|x| x * sigmoid(x))
}

pub fn silu_backward(input: &Tensor, grad_out: &Tensor) -> Tensor {
    let mut g = grad_out.clone();
    for (d, &x) in g.data_mut().iter_mut().zip(input.data()) {
        let s = sigmoid(x);
        *d *= s * (1.0 + x * (1.0 - s));
    }
    g
}

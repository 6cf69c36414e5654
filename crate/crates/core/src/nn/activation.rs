use crate::error::Result;
use crate::tensor::Tensor;

/// Element-wise clamp to `[-1, 1]`.
pub fn hardtanh(input: &Tensor) -> Tensor {
    input.map(|x| x.clamp(-1.0, 1.0))
}

/// Passes `upstream` where `|x| < 1`; zero elsewhere, including at `|x| == 1`.
pub fn hardtanh_backward(upstream: &Tensor, input: &Tensor) -> Result<Tensor> {
    upstream.zip_map(input, |g, x| if x.abs() < 1.0 { g } else { 0.0 })
}

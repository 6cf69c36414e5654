use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Mean over the spatial extent: `[N, C, H, W] -> [N, C, 1, 1]`.
pub fn avgpool_global(input: &Tensor) -> Result<Tensor> {
    let (n, c, hw) = dims(input)?;
    let out = input
        .data()
        .chunks(hw)
        .map(|p| p.iter().sum::<f64>() / hw as f64)
        .collect();
    Tensor::new(&[n, c, 1, 1], out)
}

pub fn avgpool_global_backward(upstream: &Tensor, input_shape: &[usize]) -> Result<Tensor> {
    if input_shape.len() != 4 || upstream.shape() != [input_shape[0], input_shape[1], 1, 1] {
        return Err(Error::shape(format!(
            "pool gradient {:?} does not match input {input_shape:?}",
            upstream.shape()
        )));
    }
    let hw = input_shape[2] * input_shape[3];
    let scale = 1.0 / hw as f64;
    let data = upstream
        .data()
        .iter()
        .flat_map(|&g| std::iter::repeat_n(g * scale, hw))
        .collect();
    Tensor::new(input_shape, data)
}

fn dims(input: &Tensor) -> Result<(usize, usize, usize)> {
    match *input.shape() {
        [n, c, h, w] if h * w > 0 => Ok((n, c, h * w)),
        [_, _, _, _] => Err(Error::shape("average pool over an empty spatial extent")),
        ref s => Err(Error::shape(format!("pool input must be NCHW, got {s:?}"))),
    }
}

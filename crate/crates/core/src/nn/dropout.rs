use rand::Rng;

use super::Mode;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Inverted dropout. Returns the output and, in train mode with a nonzero
/// rate, the per-element multiplier needed by [`dropout_backward`].
pub fn dropout(
    input: &Tensor,
    rate: f64,
    rng: &mut impl Rng,
    mode: Mode,
) -> Result<(Tensor, Option<Tensor>)> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Domain(format!("dropout rate {rate} outside [0, 1)")));
    }
    if mode == Mode::Infer || rate == 0.0 {
        return Ok((input.clone(), None));
    }
    let keep = 1.0 / (1.0 - rate);
    let mask = Tensor::from_fn(input.shape(), |_| {
        if rng.random::<f64>() < rate {
            0.0
        } else {
            keep
        }
    });
    let out = input.zip_map(&mask, |x, m| x * m)?;
    Ok((out, Some(mask)))
}

pub fn dropout_backward(upstream: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
    match mask {
        Some(m) => upstream.zip_map(m, |g, k| g * k),
        None => Ok(upstream.clone()),
    }
}

//! Per-channel batch normalization over `(N, H, W)`.

use super::Mode;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub eps: f64,
    pub momentum: f64,
}

/// Saved activations needed by [`BatchNorm::backward`].
#[derive(Debug, Clone)]
pub struct BnCache {
    xhat: Tensor,
    inv_std: Vec<f64>,
}

impl BatchNorm {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            eps: DEFAULT_EPS,
            momentum: DEFAULT_MOMENTUM,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    fn dims(&self, input: &Tensor) -> Result<(usize, usize, usize)> {
        let s = input.shape();
        if s.len() != 4 {
            return Err(Error::shape(format!(
                "batch norm input must be NCHW, got {s:?}"
            )));
        }
        if s[1] != self.channels() {
            return Err(Error::shape(format!(
                "batch norm has {} channels, input has {}",
                self.channels(),
                s[1]
            )));
        }
        if s[0] == 0 {
            return Err(Error::shape("batch norm on an empty batch"));
        }
        Ok((s[0], s[1], s[2] * s[3]))
    }

    /// Inference-mode normalization with the running statistics.
    pub fn infer(&self, input: &Tensor) -> Result<Tensor> {
        let (n, c, hw) = self.dims(input)?;
        let x = input.data();
        let mut out = vec![0.0; x.len()];
        for ch in 0..c {
            let inv = 1.0 / (self.running_var[ch] + self.eps).sqrt();
            let (g, b, m) = (self.gamma[ch], self.beta[ch], self.running_mean[ch]);
            for s in 0..n {
                let base = (s * c + ch) * hw;
                for i in base..base + hw {
                    out[i] = (x[i] - m) * inv * g + b;
                }
            }
        }
        Tensor::new(input.shape(), out)
    }

    /// Normalizes `input`; in train mode also updates the running statistics
    /// and returns the cache for the backward pass.
    // Channel index addresses several per-channel arrays at once.
    #[allow(clippy::needless_range_loop)]
    pub fn forward(&mut self, input: &Tensor, mode: Mode) -> Result<(Tensor, Option<BnCache>)> {
        if mode == Mode::Infer {
            return Ok((self.infer(input)?, None));
        }
        let (n, c, hw) = self.dims(input)?;
        let x = input.data();
        let mut out = vec![0.0; x.len()];
        let count = (n * hw) as f64;
        let mut xhat = vec![0.0; x.len()];
        let mut inv_std = vec![0.0; c];
        for ch in 0..c {
            let mut mean = 0.0;
            for s in 0..n {
                let base = (s * c + ch) * hw;
                mean += x[base..base + hw].iter().sum::<f64>();
            }
            mean /= count;
            let mut var = 0.0;
            for s in 0..n {
                let base = (s * c + ch) * hw;
                var += x[base..base + hw]
                    .iter()
                    .map(|v| (v - mean) * (v - mean))
                    .sum::<f64>();
            }
            var /= count;
            let inv = 1.0 / (var + self.eps).sqrt();
            inv_std[ch] = inv;
            for s in 0..n {
                let base = (s * c + ch) * hw;
                for i in base..base + hw {
                    let xh = (x[i] - mean) * inv;
                    xhat[i] = xh;
                    out[i] = xh * self.gamma[ch] + self.beta[ch];
                }
            }
            let unbiased = if count > 1.0 {
                var * count / (count - 1.0)
            } else {
                var
            };
            self.running_mean[ch] =
                (1.0 - self.momentum) * self.running_mean[ch] + self.momentum * mean;
            self.running_var[ch] =
                (1.0 - self.momentum) * self.running_var[ch] + self.momentum * unbiased;
        }
        let cache = BnCache {
            xhat: Tensor::new(input.shape(), xhat)?,
            inv_std,
        };
        Ok((Tensor::new(input.shape(), out)?, Some(cache)))
    }

    /// Returns `(grad_input, grad_gamma, grad_beta)` for a train-mode forward.
    pub fn backward(
        &self,
        upstream: &Tensor,
        cache: &BnCache,
    ) -> Result<(Tensor, Vec<f64>, Vec<f64>)> {
        upstream.expect_same_shape(&cache.xhat)?;
        let (n, c, hw) = self.dims(upstream)?;
        let g = upstream.data();
        let xh = cache.xhat.data();
        let count = (n * hw) as f64;
        let mut grad_in = vec![0.0; g.len()];
        let mut grad_gamma = vec![0.0; c];
        let mut grad_beta = vec![0.0; c];
        for ch in 0..c {
            let (mut sum_g, mut sum_gx) = (0.0, 0.0);
            for s in 0..n {
                let base = (s * c + ch) * hw;
                for i in base..base + hw {
                    sum_g += g[i];
                    sum_gx += g[i] * xh[i];
                }
            }
            grad_beta[ch] = sum_g;
            grad_gamma[ch] = sum_gx;
            let k = self.gamma[ch] * cache.inv_std[ch] / count;
            for s in 0..n {
                let base = (s * c + ch) * hw;
                for i in base..base + hw {
                    grad_in[i] = k * (count * g[i] - sum_g - xh[i] * sum_gx);
                }
            }
        }
        Ok((
            Tensor::new(upstream.shape(), grad_in)?,
            grad_gamma,
            grad_beta,
        ))
    }
}

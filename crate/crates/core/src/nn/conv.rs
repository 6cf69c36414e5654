//! 2-D cross-correlation over NCHW tensors (im2col + GEMM).

use serde::{Deserialize, Serialize};

use super::{for_each_chunk_with, map_indices};
use crate::error::{Error, Result};
use crate::linalg::{gemm, MatRef};
use crate::tensor::Tensor;

/// Samples per weight-gradient partial sum. Fixed so the reduction order
/// does not depend on the thread count.
const GRAD_CHUNK: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub c_in: usize,
    pub c_out: usize,
    pub k_h: usize,
    pub k_w: usize,
    pub stride_h: usize,
    pub stride_w: usize,
    pub pad_h: usize,
    pub pad_w: usize,
    pub has_bias: bool,
}

impl ConvSpec {
    /// Square kernel, equal stride and padding in both dimensions, no bias.
    pub fn square(c_in: usize, c_out: usize, k: usize, stride: usize, pad: usize) -> Self {
        Self {
            c_in,
            c_out,
            k_h: k,
            k_w: k,
            stride_h: stride,
            stride_w: stride,
            pad_h: pad,
            pad_w: pad,
            has_bias: false,
        }
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [self.c_out, self.c_in, self.k_h, self.k_w]
    }

    pub fn weight_len(&self) -> usize {
        self.c_out * self.c_in * self.k_h * self.k_w
    }

    /// Receptive-field size `c_in * k_h * k_w`.
    pub fn fan_in(&self) -> usize {
        self.c_in * self.k_h * self.k_w
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        if self.stride_h == 0 || self.stride_w == 0 {
            return Err(Error::shape("convolution stride must be positive"));
        }
        let extent = |n: usize, pad: usize, k: usize, s: usize| -> Option<usize> {
            (n + 2 * pad).checked_sub(k).map(|v| v / s + 1)
        };
        match (
            extent(h, self.pad_h, self.k_h, self.stride_h),
            extent(w, self.pad_w, self.k_w, self.stride_w),
        ) {
            (Some(oh), Some(ow)) => Ok((oh, ow)),
            _ => Err(Error::shape(format!(
                "kernel {}x{} does not fit padded input {h}x{w}",
                self.k_h, self.k_w
            ))),
        }
    }

    fn check(
        &self,
        input: &Tensor,
        weights: &Tensor,
    ) -> Result<(usize, usize, usize, usize, usize)> {
        let [n, c, h, w] = match input.shape() {
            &[n, c, h, w] => [n, c, h, w],
            s => return Err(Error::shape(format!("conv input must be NCHW, got {s:?}"))),
        };
        if c != self.c_in {
            return Err(Error::shape(format!(
                "conv expects {} input channels, got {c}",
                self.c_in
            )));
        }
        if weights.shape() != self.weight_shape() {
            return Err(Error::shape(format!(
                "conv weights {:?} do not match spec {:?}",
                weights.shape(),
                self.weight_shape()
            )));
        }
        let (oh, ow) = self.output_hw(h, w)?;
        Ok((n, h, w, oh, ow))
    }
}

/// Output columns `xo` whose tap `b` lands inside a row of width `w`.
fn valid_cols(spec: &ConvSpec, b: usize, w: usize, ow: usize) -> std::ops::Range<usize> {
    let s = spec.stride_w;
    let lo = spec.pad_w.saturating_sub(b).div_ceil(s);
    // ix = xo*s + b - pad < w  <=>  xo*s < w + pad - b
    let hi = (w + spec.pad_w)
        .checked_sub(b)
        .map_or(0, |lim| lim.div_ceil(s))
        .min(ow);
    lo.min(hi)..hi
}

/// Unrolls one sample `[c_in, h, w]` into a `[c_in*k_h*k_w, oh*ow]` column matrix.
fn im2col(x: &[f64], spec: &ConvSpec, h: usize, w: usize, oh: usize, ow: usize, col: &mut [f64]) {
    let p = oh * ow;
    let s = spec.stride_w;
    let mut row = 0;
    for ci in 0..spec.c_in {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for a in 0..spec.k_h {
            for b in 0..spec.k_w {
                let dst = &mut col[row * p..(row + 1) * p];
                let cols = valid_cols(spec, b, w, ow);
                for y in 0..oh {
                    let seg = &mut dst[y * ow..(y + 1) * ow];
                    let iy = (y * spec.stride_h + a) as isize - spec.pad_h as isize;
                    if iy < 0 || iy >= h as isize || cols.is_empty() {
                        seg.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    seg[..cols.start].fill(0.0);
                    seg[cols.end..].fill(0.0);
                    let first = cols.start * s + b - spec.pad_w;
                    if s == 1 {
                        seg[cols.clone()].copy_from_slice(&src[first..first + cols.len()]);
                    } else {
                        for (out, v) in seg[cols.clone()]
                            .iter_mut()
                            .zip(src[first..].iter().step_by(s))
                        {
                            *out = *v;
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Scatter-adds a column matrix back into a sample gradient `[c_in, h, w]`.
fn col2im(col: &[f64], spec: &ConvSpec, h: usize, w: usize, oh: usize, ow: usize, x: &mut [f64]) {
    let p = oh * ow;
    let s = spec.stride_w;
    let mut row = 0;
    for ci in 0..spec.c_in {
        let plane = &mut x[ci * h * w..(ci + 1) * h * w];
        for a in 0..spec.k_h {
            for b in 0..spec.k_w {
                let src = &col[row * p..(row + 1) * p];
                let cols = valid_cols(spec, b, w, ow);
                row += 1;
                if cols.is_empty() {
                    continue;
                }
                let first = cols.start * s + b - spec.pad_w;
                for y in 0..oh {
                    let iy = (y * spec.stride_h + a) as isize - spec.pad_h as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    let g = &src[y * ow + cols.start..y * ow + cols.end];
                    for (d, &v) in dst[first..].iter_mut().step_by(s).zip(g) {
                        *d += v;
                    }
                }
            }
        }
    }
}

/// Bias-free convolution with zero padding.
pub fn conv2d_forward(input: &Tensor, spec: &ConvSpec, weights: &Tensor) -> Result<Tensor> {
    if spec.has_bias {
        return Err(Error::config(
            "spec has a bias term; use conv2d_forward_biased",
        ));
    }
    forward_impl(input, spec, weights, None)
}

pub fn conv2d_forward_biased(
    input: &Tensor,
    spec: &ConvSpec,
    weights: &Tensor,
    bias: &Tensor,
) -> Result<Tensor> {
    if bias.len() != spec.c_out {
        return Err(Error::shape(format!(
            "bias has {} entries for {} output channels",
            bias.len(),
            spec.c_out
        )));
    }
    forward_impl(input, spec, weights, Some(bias.data()))
}

fn forward_impl(
    input: &Tensor,
    spec: &ConvSpec,
    weights: &Tensor,
    bias: Option<&[f64]>,
) -> Result<Tensor> {
    let (n, h, w, oh, ow) = spec.check(input, weights)?;
    let k = spec.fan_in();
    let p = oh * ow;
    let in_len = spec.c_in * h * w;
    let out_len = spec.c_out * p;
    let mut out = vec![0.0; n * out_len];
    let x = input.data();
    let wm = MatRef::row_major(weights.data(), spec.c_out, k);
    let scratch = || vec![0.0; k * p];
    for_each_chunk_with(&mut out, out_len, scratch, |col, s, dst| {
        im2col(&x[s * in_len..(s + 1) * in_len], spec, h, w, oh, ow, col);
        gemm(wm, MatRef::row_major(col, k, p), dst, false);
        if let Some(b) = bias {
            for (co, plane) in dst.chunks_mut(p).enumerate() {
                plane.iter_mut().for_each(|v| *v += b[co]);
            }
        }
    });
    Tensor::new(&[n, spec.c_out, oh, ow], out)
}

#[derive(Debug, Clone)]
pub struct ConvGrads {
    /// `None` when the caller did not ask for the input gradient.
    pub input: Option<Tensor>,
    pub weights: Tensor,
    pub bias: Option<Tensor>,
}

/// Gradients of a sum-reduced loss with respect to the input and the weights.
pub fn conv2d_backward(
    upstream: &Tensor,
    input: &Tensor,
    spec: &ConvSpec,
    weights: &Tensor,
    need_input_grad: bool,
) -> Result<ConvGrads> {
    let (n, h, w, oh, ow) = spec.check(input, weights)?;
    if upstream.shape() != [n, spec.c_out, oh, ow] {
        return Err(Error::shape(format!(
            "upstream gradient {:?} does not match conv output [{n}, {}, {oh}, {ow}]",
            upstream.shape(),
            spec.c_out
        )));
    }
    let k = spec.fan_in();
    let p = oh * ow;
    let in_len = spec.c_in * h * w;
    let out_len = spec.c_out * p;
    let x = input.data();
    let g = upstream.data();

    let chunks = n.div_ceil(GRAD_CHUNK);
    let partials: Vec<Vec<f64>> = map_indices(chunks, |c| {
        let mut acc = vec![0.0; spec.c_out * k];
        let mut col = vec![0.0; k * p];
        for s in c * GRAD_CHUNK..((c + 1) * GRAD_CHUNK).min(n) {
            im2col(
                &x[s * in_len..(s + 1) * in_len],
                spec,
                h,
                w,
                oh,
                ow,
                &mut col,
            );
            // dW += G_s * col^T
            gemm(
                MatRef::row_major(&g[s * out_len..(s + 1) * out_len], spec.c_out, p),
                MatRef::transposed(&col, k, p),
                &mut acc,
                true,
            );
        }
        acc
    });
    let mut grad_w = vec![0.0; spec.c_out * k];
    for part in &partials {
        grad_w.iter_mut().zip(part).for_each(|(a, b)| *a += b);
    }

    let grad_in = if need_input_grad {
        let mut gi = vec![0.0; n * in_len];
        let wt = MatRef::transposed(weights.data(), spec.c_out, k);
        let scratch = || vec![0.0; k * p];
        for_each_chunk_with(&mut gi, in_len, scratch, |col, s, dst| {
            gemm(
                wt,
                MatRef::row_major(&g[s * out_len..(s + 1) * out_len], spec.c_out, p),
                col,
                false,
            );
            col2im(col, spec, h, w, oh, ow, dst);
        });
        Some(Tensor::new(input.shape(), gi)?)
    } else {
        None
    };

    let bias = spec.has_bias.then(|| {
        let mut b = vec![0.0; spec.c_out];
        for s in 0..n {
            for (co, plane) in g[s * out_len..(s + 1) * out_len].chunks(p).enumerate() {
                b[co] += plane.iter().sum::<f64>();
            }
        }
        Tensor::new(&[spec.c_out], b).expect("bias shape")
    });

    Ok(ConvGrads {
        input: grad_in,
        weights: Tensor::new(&spec.weight_shape(), grad_w)?,
        bias,
    })
}

/// Straightforward six-loop reference convolution.
#[cfg(test)]
pub(crate) fn conv2d_naive(input: &Tensor, spec: &ConvSpec, weights: &Tensor) -> Tensor {
    let s = input.shape();
    let (n, h, w) = (s[0], s[2], s[3]);
    let (oh, ow) = spec.output_hw(h, w).unwrap();
    let mut out = Tensor::zeros(&[n, spec.c_out, oh, ow]);
    let x = input.data();
    let wt = weights.data();
    for b in 0..n {
        for co in 0..spec.c_out {
            for y in 0..oh {
                for xo in 0..ow {
                    let mut acc = 0.0;
                    for ci in 0..spec.c_in {
                        for a in 0..spec.k_h {
                            for bb in 0..spec.k_w {
                                let iy = (y * spec.stride_h + a) as isize - spec.pad_h as isize;
                                let ix = (xo * spec.stride_w + bb) as isize - spec.pad_w as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                let xv =
                                    x[((b * spec.c_in + ci) * h + iy as usize) * w + ix as usize];
                                let wv = wt[((co * spec.c_in + ci) * spec.k_h + a) * spec.k_w + bb];
                                acc += xv * wv;
                            }
                        }
                    }
                    out.data_mut()[((b * spec.c_out + co) * oh + y) * ow + xo] = acc;
                }
            }
        }
    }
    out
}

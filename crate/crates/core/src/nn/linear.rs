use crate::error::{Error, Result};
use crate::linalg::{gemm, MatRef};
use crate::tensor::Tensor;

/// `out[n, k] = sum_f input[n, f] * weights[k, f] + bias[k]`.
pub fn linear_forward(input: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (n, f, k) = dims(input, weights, bias)?;
    let mut out = vec![0.0; n * k];
    gemm(
        MatRef::row_major(input.data(), n, f),
        MatRef::transposed(weights.data(), k, f),
        &mut out,
        false,
    );
    for row in out.chunks_mut(k) {
        row.iter_mut().zip(bias.data()).for_each(|(o, b)| *o += b);
    }
    Tensor::new(&[n, k], out)
}

#[derive(Debug, Clone)]
pub struct LinearGrads {
    pub input: Tensor,
    pub weights: Tensor,
    pub bias: Tensor,
}

pub fn linear_backward(upstream: &Tensor, input: &Tensor, weights: &Tensor) -> Result<LinearGrads> {
    let (n, f) = input.matrix_dims()?;
    let (k, f2) = weights.matrix_dims()?;
    if f != f2 || upstream.shape() != [n, k] {
        return Err(Error::shape(format!(
            "linear backward: upstream {:?}, input {:?}, weights {:?}",
            upstream.shape(),
            input.shape(),
            weights.shape()
        )));
    }
    let mut gi = vec![0.0; n * f];
    gemm(
        MatRef::row_major(upstream.data(), n, k),
        MatRef::row_major(weights.data(), k, f),
        &mut gi,
        false,
    );
    let mut gw = vec![0.0; k * f];
    gemm(
        MatRef::transposed(upstream.data(), n, k),
        MatRef::row_major(input.data(), n, f),
        &mut gw,
        false,
    );
    let mut gb = vec![0.0; k];
    for row in upstream.data().chunks(k) {
        gb.iter_mut().zip(row).for_each(|(a, b)| *a += b);
    }
    Ok(LinearGrads {
        input: Tensor::new(&[n, f], gi)?,
        weights: Tensor::new(&[k, f], gw)?,
        bias: Tensor::new(&[k], gb)?,
    })
}

fn dims(input: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<(usize, usize, usize)> {
    let (n, f) = input.matrix_dims()?;
    let (k, f2) = weights.matrix_dims()?;
    if f != f2 || bias.len() != k {
        return Err(Error::shape(format!(
            "linear: input {:?}, weights {:?}, bias {:?}",
            input.shape(),
            weights.shape(),
            bias.shape()
        )));
    }
    Ok((n, f, k))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, uniform_tensor};

    #[test]
    fn identity_and_zero_weights() {
        let mut rng = stream(1, &[]);
        let x = uniform_tensor(&[3, 4], -1.0, 1.0, &mut rng);
        let y = linear_forward(&x, &Tensor::identity(4), &Tensor::zeros(&[4])).unwrap();
        assert_eq!(y, x);
        let b = Tensor::new(&[2], vec![0.5, -2.0]).unwrap();
        let y = linear_forward(&x, &Tensor::zeros(&[2, 4]), &b).unwrap();
        for row in y.data().chunks(2) {
            assert_eq!(row, b.data());
        }
    }

    #[test]
    fn shape_errors() {
        let x = Tensor::zeros(&[2, 3]);
        assert!(linear_forward(&x, &Tensor::zeros(&[4, 2]), &Tensor::zeros(&[4])).is_err());
        assert!(linear_forward(&x, &Tensor::zeros(&[4, 3]), &Tensor::zeros(&[3])).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = stream(2, &[]);
        let x = uniform_tensor(&[3, 5], -1.0, 1.0, &mut rng);
        let w = uniform_tensor(&[4, 5], -1.0, 1.0, &mut rng);
        let b = uniform_tensor(&[4], -1.0, 1.0, &mut rng);
        let probe = uniform_tensor(&[3, 4], -1.0, 1.0, &mut rng);
        let loss = |x: &Tensor, w: &Tensor, b: &Tensor| {
            linear_forward(x, w, b).unwrap().dot(&probe).unwrap()
        };
        let g = linear_backward(&probe, &x, &w).unwrap();
        let h = 1e-5;
        let fd = |f: &dyn Fn(f64) -> f64| (f(h) - f(-h)) / (2.0 * h);
        for i in 0..x.len() {
            let d = fd(&|e| {
                let mut t = x.clone();
                t.data_mut()[i] += e;
                loss(&t, &w, &b)
            });
            assert!((d - g.input.data()[i]).abs() < 1e-6);
        }
        for i in 0..w.len() {
            let d = fd(&|e| {
                let mut t = w.clone();
                t.data_mut()[i] += e;
                loss(&x, &t, &b)
            });
            assert!((d - g.weights.data()[i]).abs() < 1e-6);
        }
        for i in 0..b.len() {
            let d = fd(&|e| {
                let mut t = b.clone();
                t.data_mut()[i] += e;
                loss(&x, &w, &t)
            });
            assert!((d - g.bias.data()[i]).abs() < 1e-6);
        }
    }
}

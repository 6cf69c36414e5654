//! Matrix kernels: products, trace, norms, Kronecker product and SVD.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Strided read-only matrix view over a slice.
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a> {
    pub data: &'a [f64],
    pub rows: usize,
    pub cols: usize,
    pub row_stride: usize,
    pub col_stride: usize,
}

impl<'a> MatRef<'a> {
    pub fn row_major(data: &'a [f64], rows: usize, cols: usize) -> Self {
        Self {
            data,
            rows,
            cols,
            row_stride: cols,
            col_stride: 1,
        }
    }

    /// The transpose of a row-major `rows x cols` buffer.
    pub fn transposed(data: &'a [f64], rows: usize, cols: usize) -> Self {
        Self {
            data,
            rows: cols,
            cols: rows,
            row_stride: 1,
            col_stride: cols,
        }
    }

    fn fits(&self) -> bool {
        self.rows == 0
            || self.cols == 0
            || (self.rows - 1) * self.row_stride + (self.cols - 1) * self.col_stride
                < self.data.len()
    }
}

/// `c = a * b` (or `c += a * b` when `accumulate`), `c` row-major `a.rows x b.cols`.
pub(crate) fn gemm(a: MatRef<'_>, b: MatRef<'_>, c: &mut [f64], accumulate: bool) {
    assert_eq!(a.cols, b.rows, "gemm inner dimension");
    assert!(a.fits() && b.fits(), "gemm view out of bounds");
    assert_eq!(c.len(), a.rows * b.cols, "gemm output size");
    if a.rows == 0 || b.cols == 0 {
        return;
    }
    if a.cols == 0 {
        if !accumulate {
            c.fill(0.0);
        }
        return;
    }
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: bounds of both views were checked above, `c` holds exactly
    // rows x cols elements addressed with row stride `b.cols`.
    unsafe {
        matrixmultiply::dgemm(
            a.rows,
            a.cols,
            b.cols,
            1.0,
            a.data.as_ptr(),
            a.row_stride as isize,
            a.col_stride as isize,
            b.data.as_ptr(),
            b.row_stride as isize,
            b.col_stride as isize,
            beta,
            c.as_mut_ptr(),
            b.cols as isize,
            1,
        );
    }
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.matrix_dims()?;
    let (k2, n) = b.matrix_dims()?;
    if k != k2 {
        return Err(Error::shape(format!(
            "matmul inner dimensions differ: {m}x{k} * {k2}x{n}"
        )));
    }
    let mut out = vec![0.0; m * n];
    gemm(
        MatRef::row_major(a.data(), m, k),
        MatRef::row_major(b.data(), k, n),
        &mut out,
        false,
    );
    Tensor::new(&[m, n], out)
}

pub fn transpose(a: &Tensor) -> Result<Tensor> {
    let (r, c) = a.matrix_dims()?;
    let src = a.data();
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = src[i * c + j];
        }
    }
    Tensor::new(&[c, r], out)
}

pub fn trace(a: &Tensor) -> Result<f64> {
    let n = square_dim(a)?;
    Ok((0..n).map(|i| a.at2(i, i)).sum())
}

pub fn l2_norm(v: &Tensor) -> f64 {
    v.frobenius()
}

pub fn kron(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (ar, ac) = a.matrix_dims()?;
    let (br, bc) = b.matrix_dims()?;
    let cols = ac * bc;
    let mut out = vec![0.0; ar * br * cols];
    for i in 0..ar {
        for j in 0..ac {
            let aij = a.at2(i, j);
            for p in 0..br {
                let row = (i * br + p) * cols + j * bc;
                for q in 0..bc {
                    out[row + q] = aij * b.at2(p, q);
                }
            }
        }
    }
    Tensor::new(&[ar * br, cols], out)
}

pub(crate) fn square_dim(a: &Tensor) -> Result<usize> {
    let (r, c) = a.matrix_dims()?;
    if r != c {
        return Err(Error::shape(format!(
            "expected a square matrix, got {r}x{c}"
        )));
    }
    Ok(r)
}

/// `a = U * diag(s) * V^T` with orthogonal `U`, `V` and `s` sorted nonincreasing.
#[derive(Debug, Clone)]
pub struct SvdResult {
    pub u: Tensor,
    pub s: Vec<f64>,
    pub v: Tensor,
}

impl SvdResult {
    pub fn reconstruct(&self) -> Tensor {
        let n = self.s.len();
        let mut us = self.u.clone();
        for i in 0..n {
            for j in 0..n {
                let x = us.at2(i, j) * self.s[j];
                us.set2(i, j, x);
            }
        }
        let vt = transpose(&self.v).expect("square");
        matmul(&us, &vt).expect("square")
    }
}

const SVD_MAX_SWEEPS: usize = 80;
const SVD_TOL: f64 = 1e-15;

/// Singular value decomposition of a square matrix by one-sided (Hestenes) Jacobi.
pub fn svd(a: &Tensor) -> Result<SvdResult> {
    let n = square_dim(a)?;
    if !a.all_finite() {
        return Err(Error::Domain("svd input has non-finite entries".into()));
    }
    // Column-major working copies: column j lives at [j*n, (j+1)*n).
    let mut w = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            w[j * n + i] = a.at2(i, j);
        }
    }
    let mut v = vec![0.0; n * n];
    for j in 0..n {
        v[j * n + j] = 1.0;
    }

    let mut converged = n < 2;
    let mut sweeps = 0;
    while !converged {
        if sweeps == SVD_MAX_SWEEPS {
            return Err(Error::NoConvergence {
                what: format!("one-sided Jacobi SVD ({n}x{n})"),
                iterations: sweeps,
            });
        }
        sweeps += 1;
        let mut rotated = false;
        for p in 0..n - 1 {
            for q in p + 1..n {
                let (cp, cq) = column_pair(&mut w, n, p, q);
                let alpha: f64 = cp.iter().map(|x| x * x).sum();
                let beta: f64 = cq.iter().map(|x| x * x).sum();
                let gamma: f64 = cp.iter().zip(cq.iter()).map(|(x, y)| x * y).sum();
                if gamma == 0.0 || gamma.abs() <= SVD_TOL * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + zeta.hypot(1.0));
                let c = 1.0 / t.hypot(1.0);
                let s = c * t;
                rotate(cp, cq, c, s);
                let (vp, vq) = column_pair(&mut v, n, p, q);
                rotate(vp, vq, c, s);
            }
        }
        converged = !rotated;
    }

    let norms: Vec<f64> = (0..n)
        .map(|j| {
            w[j * n..(j + 1) * n]
                .iter()
                .map(|x| x * x)
                .sum::<f64>()
                .sqrt()
        })
        .collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| norms[j].total_cmp(&norms[i]));

    let mut u_cols: Vec<Option<Vec<f64>>> = Vec::with_capacity(n);
    let mut s = Vec::with_capacity(n);
    let mut v_out = Tensor::zeros(&[n, n]);
    for (dst, &src) in order.iter().enumerate() {
        let sigma = norms[src];
        s.push(sigma);
        for i in 0..n {
            v_out.set2(i, dst, v[src * n + i]);
        }
        if sigma > f64::MIN_POSITIVE {
            u_cols.push(Some(
                w[src * n..(src + 1) * n]
                    .iter()
                    .map(|x| x / sigma)
                    .collect(),
            ));
        } else {
            u_cols.push(None);
        }
    }
    let u_cols = complete_orthonormal(u_cols, n);
    let mut u = Tensor::zeros(&[n, n]);
    for (j, col) in u_cols.iter().enumerate() {
        for (i, &v) in col.iter().enumerate() {
            u.set2(i, j, v);
        }
    }
    Ok(SvdResult { u, s, v: v_out })
}

fn column_pair(buf: &mut [f64], n: usize, p: usize, q: usize) -> (&mut [f64], &mut [f64]) {
    debug_assert!(p < q);
    let (head, tail) = buf.split_at_mut(q * n);
    (&mut head[p * n..(p + 1) * n], &mut tail[..n])
}

fn rotate(x: &mut [f64], y: &mut [f64], c: f64, s: f64) {
    for (a, b) in x.iter_mut().zip(y.iter_mut()) {
        let (xa, yb) = (*a, *b);
        *a = c * xa - s * yb;
        *b = s * xa + c * yb;
    }
}

/// Fills missing columns (zero singular values) with unit vectors orthogonal
/// to every present column.
fn complete_orthonormal(cols: Vec<Option<Vec<f64>>>, n: usize) -> Vec<Vec<f64>> {
    let mut done: Vec<Vec<f64>> = cols.iter().flatten().cloned().collect();
    let mut candidate = 0;
    let mut fill = Vec::new();
    for _ in cols.iter().filter(|c| c.is_none()) {
        loop {
            let mut e = vec![0.0; n];
            e[candidate] = 1.0;
            candidate += 1;
            // Two Gram-Schmidt passes.
            for _ in 0..2 {
                for d in done.iter() {
                    let proj: f64 = d.iter().zip(&e).map(|(a, b)| a * b).sum();
                    for (x, y) in e.iter_mut().zip(d) {
                        *x -= proj * y;
                    }
                }
            }
            let norm = e.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-6 {
                e.iter_mut().for_each(|x| *x /= norm);
                done.push(e.clone());
                fill.push(e);
                break;
            }
        }
    }
    let mut fill = fill.into_iter();
    cols.into_iter()
        .map(|c| c.unwrap_or_else(|| fill.next().expect("one fill per missing column")))
        .collect()
}

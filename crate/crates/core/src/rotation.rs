//! Bi-rotation for rotated binarization.
//!
//! A layer's flattened weights `w` (length `n = n1 * n2`) are folded row-major
//! into `Wbar` (`n1 x n2`). The rotation `R = R1 (x) R2` is never formed:
//! `R^T w` is computed as `vec(R1^T Wbar R2)`. At the start of every epoch the
//! pair `(R1, R2)` is re-learned by alternating maximization of
//! `tr(Wb^T R1^T Wbar R2)` over the binary matrix `Wb`, then `R1`, then `R2`,
//! each step solved in closed form (sign, or an orthogonal Procrustes polar
//! factor). The forward pass binarizes `w~ = w + (R^T w - w) |sin(beta)|`.

use crate::binary::sign_value;
use crate::error::{Error, Result};
use crate::linalg::{matmul, svd, transpose};
use crate::tensor::Tensor;

pub const MAX_CYCLES: usize = 3;
pub const EARLY_STOP_REL: f64 = 1e-7;

/// Most balanced factor pair `(n1, n2)` of `n` with `n1 <= n2`.
pub fn split_sizes(n: usize) -> (usize, usize) {
    assert!(n >= 1, "split_sizes needs a positive size");
    let mut best = (1, n);
    let mut d = 1;
    while d * d <= n {
        if n.is_multiple_of(d) {
            best = (d, n / d);
        }
        d += 1;
    }
    best
}

/// Learned rotation of one binarized layer.
#[derive(Debug, Clone, PartialEq)]
pub struct RotationState {
    pub n1: usize,
    pub n2: usize,
    pub r1: Tensor,
    pub r2: Tensor,
    pub beta: f64,
    /// `1 / (sqrt(n) * ||w||)` at the last rotation solve.
    pub eta: f64,
}

impl RotationState {
    /// Identity rotation for a layer of `n` weights, `beta = 0`.
    pub fn identity(n: usize) -> Self {
        let (n1, n2) = split_sizes(n);
        Self {
            n1,
            n2,
            r1: Tensor::identity(n1),
            r2: Tensor::identity(n2),
            beta: 0.0,
            eta: 0.0,
        }
    }

    pub fn len(&self) -> usize {
        self.n1 * self.n2
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn alpha(&self) -> f64 {
        self.beta.sin().abs()
    }

    /// Largest of `||R1^T R1 - I||_F` and `||R2^T R2 - I||_F`.
    pub fn orthogonality_error(&self) -> f64 {
        let err = |r: &Tensor, n: usize| {
            let rtr = matmul(&transpose(r).expect("matrix"), r).expect("square");
            rtr.zip_map(&Tensor::identity(n), |a, b| a - b)
                .expect("same shape")
                .frobenius()
        };
        err(&self.r1, self.n1).max(err(&self.r2, self.n2))
    }

    /// `R^T w`, via the folded form.
    pub fn rotate(&self, w: &Tensor) -> Result<Tensor> {
        let folded = FoldedWeights::fold(w, self.n1, self.n2)?;
        let rotated = rotate_folded(&folded.wbar, &self.r1, &self.r2)?;
        Tensor::new(w.shape(), rotated.into_data())
    }

    /// `R g` (the adjoint of [`RotationState::rotate`]): `vec(R1 G R2^T)`.
    pub fn rotate_adjoint(&self, g: &Tensor) -> Result<Tensor> {
        let folded = FoldedWeights::fold(g, self.n1, self.n2)?;
        let tmp = matmul(&self.r1, &folded.wbar)?;
        let out = matmul(&tmp, &transpose(&self.r2)?)?;
        Tensor::new(g.shape(), out.into_data())
    }
}

/// Weights folded row-major into an `n1 x n2` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct FoldedWeights {
    pub wbar: Tensor,
}

impl FoldedWeights {
    pub fn fold(w: &Tensor, n1: usize, n2: usize) -> Result<Self> {
        if w.len() != n1 * n2 {
            return Err(Error::shape(format!(
                "cannot fold {} weights into {n1}x{n2}",
                w.len()
            )));
        }
        Ok(Self {
            wbar: Tensor::new(&[n1, n2], w.data().to_vec())?,
        })
    }

    pub fn unfold(&self, shape: &[usize]) -> Result<Tensor> {
        Tensor::new(shape, self.wbar.data().to_vec())
    }
}

/// `R1^T Wbar R2`.
pub fn rotate_folded(wbar: &Tensor, r1: &Tensor, r2: &Tensor) -> Result<Tensor> {
    matmul(&matmul(&transpose(r1)?, wbar)?, r2)
}

/// Cosine of the angle between a rotated weight vector and its sign vector:
/// `sum_i |rotated_i| / (sqrt(n) * ||w||)`.
pub fn cos_phi(w: &Tensor, rotated: &Tensor) -> Result<f64> {
    if w.len() != rotated.len() {
        return Err(Error::shape("cos_phi operands differ in length"));
    }
    let norm = w.frobenius();
    if norm == 0.0 {
        return Err(Error::Domain("cos_phi of a zero weight vector".into()));
    }
    let l1: f64 = rotated.data().iter().map(|x| x.abs()).sum();
    Ok(l1 / ((w.len() as f64).sqrt() * norm))
}

/// Orthogonal `R` maximizing `tr(R^T A)`: the polar factor `U V^T` of `A`.
pub fn procrustes_max(a: &Tensor) -> Result<Tensor> {
    let d = svd(a)?;
    matmul(&d.u, &transpose(&d.v)?)
}

/// Binary maximizer for fixed rotations: `sign(R1^T Wbar R2)`.
pub fn step_wb(r1: &Tensor, r2: &Tensor, wbar: &Tensor) -> Result<Tensor> {
    Ok(rotate_folded(wbar, r1, r2)?.map(sign_value))
}

/// `tr(Wb^T R1^T Wbar R2)`.
pub fn objective(wb: &Tensor, r1: &Tensor, r2: &Tensor, wbar: &Tensor) -> Result<f64> {
    wb.dot(&rotate_folded(wbar, r1, r2)?)
}

/// Maximizer over `R1` of the objective: polar factor of `Wbar R2 Wb^T`.
pub fn step_r1(wb: &Tensor, r2: &Tensor, wbar: &Tensor) -> Result<Tensor> {
    let a = matmul(&matmul(wbar, r2)?, &transpose(wb)?)?;
    procrustes_max(&a)
}

/// Maximizer over `R2` of the objective: polar factor of `Wbar^T R1 Wb`.
pub fn step_r2(wb: &Tensor, r1: &Tensor, wbar: &Tensor) -> Result<Tensor> {
    let a = matmul(&matmul(&transpose(wbar)?, r1)?, wb)?;
    procrustes_max(&a)
}

/// Result of one rotation solve.
#[derive(Debug, Clone)]
pub struct RotationOutcome {
    pub state: RotationState,
    /// Objective after every step (`Wb`, `R1`, `R2` per cycle), non-decreasing.
    pub objectives: Vec<f64>,
    pub cycles: usize,
    /// Cosine at the warm-start rotation.
    pub cos_phi_start: f64,
    pub cos_phi_end: f64,
}

/// Alternating maximization over at most [`MAX_CYCLES`] cycles, warm-started
/// from `prev`. A step whose objective would fall (by rounding) is rejected,
/// so the recorded sequence is exactly non-decreasing. `beta` is carried over.
pub fn learn_rotation(w: &Tensor, prev: &RotationState) -> Result<RotationOutcome> {
    let norm = w.frobenius();
    if norm == 0.0 {
        return Err(Error::Domain(
            "cannot learn a rotation for zero weights".into(),
        ));
    }
    let eta = 1.0 / ((w.len() as f64).sqrt() * norm);
    let wbar = FoldedWeights::fold(w, prev.n1, prev.n2)?.wbar;
    let (mut r1, mut r2) = (prev.r1.clone(), prev.r2.clone());

    let mut wb = step_wb(&r1, &r2, &wbar)?;
    let mut current = objective(&wb, &r1, &r2, &wbar)?;
    let cos_phi_start = current * eta;
    let mut objectives = vec![current];
    let mut cycles = 0;
    while cycles < MAX_CYCLES {
        cycles += 1;
        let cycle_start = current;
        if cycles > 1 {
            let cand = step_wb(&r1, &r2, &wbar)?;
            let value = objective(&cand, &r1, &r2, &wbar)?;
            if value >= current {
                wb = cand;
                current = value;
            }
            objectives.push(current);
        }
        let cand = step_r1(&wb, &r2, &wbar)?;
        let value = objective(&wb, &cand, &r2, &wbar)?;
        if value >= current {
            r1 = cand;
            current = value;
        }
        objectives.push(current);

        let cand = step_r2(&wb, &r1, &wbar)?;
        let value = objective(&wb, &r1, &cand, &wbar)?;
        if value >= current {
            r2 = cand;
            current = value;
        }
        objectives.push(current);

        if current - cycle_start <= EARLY_STOP_REL * cycle_start.abs() {
            break;
        }
    }
    // The final binary matrix is sign(R1^T Wbar R2); its objective is the L1 norm.
    let end = rotate_folded(&wbar, &r1, &r2)?;
    let cos_phi_end = cos_phi(w, &end)?.max(current * eta);
    Ok(RotationOutcome {
        state: RotationState {
            n1: prev.n1,
            n2: prev.n2,
            r1,
            r2,
            beta: prev.beta,
            eta,
        },
        objectives,
        cycles,
        cos_phi_start,
        cos_phi_end,
    })
}

/// `w~ = w + (R^T w - w) * alpha` together with `R^T w`.
#[derive(Debug, Clone)]
pub struct AdjustedWeights {
    pub adjusted: Tensor,
    pub rotated: Tensor,
}

pub fn adjusted_weights(w: &Tensor, state: &RotationState) -> Result<AdjustedWeights> {
    let rotated = state.rotate(w)?;
    let alpha = state.alpha();
    let adjusted = w.zip_map(&rotated, |x, r| x + (r - x) * alpha)?;
    Ok(AdjustedWeights { adjusted, rotated })
}

/// `dL/dbeta = <upstream, R^T w - w> * sign(sin beta) * cos beta`, with
/// `sign(0) = +1`.
pub fn beta_grad(upstream: &Tensor, w: &Tensor, rotated: &Tensor, beta: f64) -> Result<f64> {
    let diff = rotated.zip_map(w, |r, x| r - x)?;
    Ok(upstream.dot(&diff)? * sign_value(beta.sin()) * beta.cos())
}

/// Gradient with respect to `w` of a loss seen through `w~`:
/// `(1 - alpha) g + alpha R g`.
pub fn weight_grad(upstream: &Tensor, state: &RotationState) -> Result<Tensor> {
    let alpha = state.alpha();
    if alpha == 0.0 {
        return Ok(upstream.clone());
    }
    let back = state.rotate_adjoint(upstream)?;
    upstream.zip_map(&back, |g, r| (1.0 - alpha) * g + alpha * r)
}

/// Fraction of entries whose sign differs between `a` and `b`.
pub fn flip_fraction(a: &Tensor, b: &Tensor) -> f64 {
    let flips = a
        .data()
        .iter()
        .zip(b.data())
        .filter(|(x, y)| sign_value(**x) != sign_value(**y))
        .count();
    flips as f64 / a.len().max(1) as f64
}

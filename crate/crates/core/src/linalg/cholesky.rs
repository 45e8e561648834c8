//! Cholesky factorisation for the `(·+λI)` systems, plus the push-through pair.

use crate::error::{ensure, Error, Result};
use crate::linalg::Matrix;

/// Relative asymmetry tolerated by [`Cholesky::factor`].
const SPD_SYMMETRY_TOL: f64 = 1e-8;

/// Lower-triangular factor `L` with `A = L Lᵀ`.
#[derive(Clone, Debug)]
pub struct Cholesky {
    l: Matrix,
}

impl Cholesky {
    pub fn factor(a: &Matrix) -> Result<Self> {
        let (n, m) = a.shape();
        ensure(n == m, || format!("cholesky of non-square {n}x{m}"))?;
        let asym = a.asymmetry();
        if asym > SPD_SYMMETRY_TOL {
            return Err(Error::NotSymmetric(asym));
        }
        let mut l = Matrix::zeros(n, n);
        for j in 0..n {
            let mut diag = a[(j, j)];
            for k in 0..j {
                diag -= l[(j, k)] * l[(j, k)];
            }
            if !(diag > 0.0) || !diag.is_finite() {
                return Err(Error::NotPositiveDefinite {
                    pivot: j,
                    value: diag,
                });
            }
            let ljj = diag.sqrt();
            l[(j, j)] = ljj;
            for i in j + 1..n {
                let mut s = a[(i, j)];
                let (li, lj) = (l.row(i), l.row(j));
                for k in 0..j {
                    s -= li[k] * lj[k];
                }
                l[(i, j)] = s / ljj;
            }
        }
        Ok(Self { l })
    }

    pub fn dim(&self) -> usize {
        self.l.rows()
    }

    pub fn lower(&self) -> &Matrix {
        &self.l
    }

    /// Solves `A X = B` column by column.
    pub fn solve(&self, b: &Matrix) -> Result<Matrix> {
        let n = self.dim();
        ensure(b.rows() == n, || {
            format!("solve with {n}x{n} factor and rhs of {} rows", b.rows())
        })?;
        // Work on Bᵀ so each right-hand side is contiguous.
        let mut xt = b.transpose();
        for c in 0..xt.rows() {
            let x = xt.row_mut(c);
            for i in 0..n {
                let li = self.l.row(i);
                let mut s = x[i];
                for k in 0..i {
                    s -= li[k] * x[k];
                }
                x[i] = s / li[i];
            }
            for i in (0..n).rev() {
                let mut s = x[i];
                for k in i + 1..n {
                    s -= self.l[(k, i)] * x[k];
                }
                x[i] = s / self.l[(i, i)];
            }
        }
        Ok(xt.transpose())
    }
}

/// Solves `A X = B` for symmetric positive definite `A`.
pub fn solve_spd(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    Cholesky::factor(a)?.solve(b)
}

/// Both sides of the push-through identity for `Ψ ∈ ℝ^{n×T}`:
/// `lhs = Ψᵀ(ΨΨᵀ + λI_n)⁻¹` and `rhs = (ΨᵀΨ + λI_T)⁻¹Ψᵀ`.
pub fn push_through(psi: &Matrix, lambda: f64) -> Result<(Matrix, Matrix)> {
    if !(lambda > 0.0) {
        return Err(Error::Config(format!("lambda must be positive, got {lambda}")));
    }
    let big = psi.gram().add_diagonal(lambda);
    // (ΨΨᵀ+λI) symmetric, so Ψᵀ(ΨΨᵀ+λI)⁻¹ = ((ΨΨᵀ+λI)⁻¹Ψ)ᵀ
    let lhs = solve_spd(&big, psi)?.transpose();
    let small = psi.tr_matmul(psi)?.add_diagonal(lambda);
    let rhs = solve_spd(&small, &psi.transpose())?;
    Ok((lhs, rhs))
}

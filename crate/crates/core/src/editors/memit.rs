use crate::error::{ensure, Error, Result};
use crate::linalg::{solve_spd, Matrix};

/// Dense single-matrix edit:
/// `Δ = (V₁ − W K₁) K₁ᵀ (K₀K₀ᵀ + K₁K₁ᵀ + λI)⁻¹`.
///
/// `w_down` is `d_model × d_hidden`, `k1` is `d_hidden × T`, `v1` is
/// `d_model × T`, `k0` is `d_hidden × M` (may have zero columns).
pub fn solve_dense_memit(w_down: &Matrix, k1: &Matrix, v1: &Matrix, k0: &Matrix, lambda: f64) -> Result<Matrix> {
    if !(lambda > 0.0) {
        return Err(Error::Config(format!("lambda must be positive, got {lambda}")));
    }
    let (dm, dh) = w_down.shape();
    ensure(k1.rows() == dh && k0.rows() == dh, || {
        format!("keys must have {dh} rows, got {} and {}", k1.rows(), k0.rows())
    })?;
    ensure(v1.shape() == (dm, k1.cols()), || {
        format!("values {:?}, expected {dm}x{}", v1.shape(), k1.cols())
    })?;
    let mut a = k1.gram().add_diagonal(lambda);
    if k0.cols() > 0 {
        a.add_assign(&k0.gram())?;
    }
    let resid = v1.sub(&w_down.matmul(k1)?)?;
    let b = resid.matmul(&k1.transpose())?;
    // A symmetric: Δ = B A⁻¹ = (A⁻¹ Bᵀ)ᵀ
    Ok(solve_spd(&a, &b.transpose())?.transpose())
}

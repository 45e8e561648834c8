//! Per-expert null-space projectors built from preservation-key statistics.

use crate::linalg::{eig_sym, Matrix};
use crate::error::{Error, Result};
use crate::moe::PreservationSet;

/// Relative eigenvalue threshold: directions whose preservation energy is
/// below this fraction of the largest eigenvalue are free to edit.
pub const DEFAULT_THRESHOLD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq)]
pub struct NullSpaceProjectorSet {
    projectors: Vec<Matrix>,
    /// Orthonormal basis of the protected directions for each expert.
    preserved: Vec<Matrix>,
    pub threshold: f64,
    pub sample_count: usize,
}

impl NullSpaceProjectorSet {
    /// `P_j = I` for every expert: no constraint.
    pub fn identity(experts: usize, d_hidden: usize) -> Self {
        Self {
            projectors: vec![Matrix::identity(d_hidden); experts],
            preserved: vec![Matrix::zeros(d_hidden, 0); experts],
            threshold: 0.0,
            sample_count: 0,
        }
    }

    pub fn num_experts(&self) -> usize {
        self.projectors.len()
    }

    pub fn dim(&self) -> usize {
        self.projectors.first().map_or(0, Matrix::rows)
    }

    pub fn matrix(&self, j: usize) -> &Matrix {
        &self.projectors[j]
    }

    pub fn preserved_basis(&self, j: usize) -> &Matrix {
        &self.preserved[j]
    }

    pub fn project(&self, j: usize, key: &[f64]) -> Vec<f64> {
        self.projectors[j].matvec(key).expect("projector dimension")
    }

    pub fn is_identity(&self) -> bool {
        self.preserved.iter().all(|b| b.cols() == 0)
    }
}

/// `P_j = Ũ_j Ũ_jᵀ`, with `Ũ_j` the eigenvectors of `K_{0,j}K_{0,j}ᵀ / M_j`
/// whose eigenvalue is below `threshold · λ_max`. Experts without samples get
/// the identity.
pub fn build_projectors(pres: &PreservationSet, threshold: f64) -> Result<NullSpaceProjectorSet> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::Config(format!(
            "null-space threshold must lie in (0, 1), got {threshold}"
        )));
    }
    let d_hidden = pres.keys.first().map_or(0, Matrix::rows);
    let mut projectors = Vec::with_capacity(pres.num_experts());
    let mut preserved = Vec::with_capacity(pres.num_experts());
    for keys in &pres.keys {
        if keys.cols() == 0 {
            projectors.push(Matrix::identity(d_hidden));
            preserved.push(Matrix::zeros(d_hidden, 0));
            continue;
        }
        let cov = keys.gram().scale(1.0 / keys.cols() as f64);
        let eig = eig_sym(&cov)?;
        let cutoff = threshold * eig.values[0];
        if eig.values[0] <= 0.0 {
            projectors.push(Matrix::identity(d_hidden));
            preserved.push(Matrix::zeros(d_hidden, 0));
            continue;
        }
        let kept = eig.values.iter().take_while(|v| **v >= cutoff).count();
        let free = eig.vectors.columns_range(kept, d_hidden);
        projectors.push(free.gram());
        preserved.push(eig.vectors.columns_range(0, kept));
    }
    Ok(NullSpaceProjectorSet {
        projectors,
        preserved,
        threshold,
        sample_count: pres.sample_count(),
    })
}

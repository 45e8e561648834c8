use crate::error::{Error, Result};
use crate::linalg::{Cholesky, Matrix};
use crate::moe::{EditBatch, MoeLayer};
use crate::timing::PhaseTimings;

use super::{DesignProblem, LayerDelta, NullSpaceProjectorSet};

/// Largest `E·d_hidden` accepted by the global oracle.
pub const ORACLE_MAX_DIM: usize = 512;

fn check_lambda(lambda: f64) -> Result<()> {
    if lambda > 0.0 && lambda.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!("lambda must be positive, got {lambda}")))
    }
}

/// Reference solve `Δ = RΨᵀ(ΨΨᵀ + λI)⁻¹` with the `E·d_hidden`-sized inverse.
pub fn solve_global_oracle(
    batch: &EditBatch,
    layer: &MoeLayer,
    projectors: Option<&NullSpaceProjectorSet>,
    lambda: f64,
) -> Result<LayerDelta> {
    let problem = DesignProblem::build(batch, layer, projectors)?;
    solve_global_oracle_design(&problem, lambda)
}

pub fn solve_global_oracle_design(problem: &DesignProblem, lambda: f64) -> Result<LayerDelta> {
    check_lambda(lambda)?;
    let n = problem.psi.rows();
    if n > ORACLE_MAX_DIM {
        return Err(Error::OracleGuard {
            size: n,
            limit: ORACLE_MAX_DIM,
        });
    }
    let mut phases = PhaseTimings::default();
    let big = phases.time("kernel", || problem.psi.gram().add_diagonal(lambda));
    let chol = phases.time("factorization", || Cholesky::factor(&big))?;
    let flat = phases.time("assembly", || -> Result<Matrix> {
        // (ΨΨᵀ+λI) X = ΨRᵀ, Δ = Xᵀ
        let rhs = problem.psi.matmul(&problem.residuals.transpose())?;
        Ok(chol.solve(&rhs)?.transpose())
    })?;
    finish(problem, "global_oracle", lambda, phases, &flat)
}

/// `Δ = R(ΨᵀΨ + λI_T)⁻¹Ψᵀ`; only a `T × T` system is factored.
pub fn solve_woodbury(
    batch: &EditBatch,
    layer: &MoeLayer,
    projectors: Option<&NullSpaceProjectorSet>,
    lambda: f64,
) -> Result<LayerDelta> {
    let problem = DesignProblem::build(batch, layer, projectors)?;
    solve_woodbury_design(&problem, lambda)
}

pub fn solve_woodbury_design(problem: &DesignProblem, lambda: f64) -> Result<LayerDelta> {
    check_lambda(lambda)?;
    let mut phases = PhaseTimings::default();
    let kernel = phases.time("kernel", || -> Result<Matrix> {
        Ok(problem.psi.tr_matmul(&problem.psi)?.add_diagonal(lambda))
    })?;
    let chol = phases.time("factorization", || Cholesky::factor(&kernel))?;
    let flat = phases.time("assembly", || -> Result<Matrix> {
        // K Zᵀ = Rᵀ, Δ = ZΨᵀ
        let z = chol.solve(&problem.residuals.transpose())?;
        z.tr_matmul(&problem.psi.transpose())
    })?;
    finish(problem, "woodbury", lambda, phases, &flat)
}

fn finish(
    problem: &DesignProblem,
    solver: &str,
    lambda: f64,
    phases: PhaseTimings,
    flat: &Matrix,
) -> Result<LayerDelta> {
    if !flat.is_finite() {
        return Err(Error::NonFinite("solver output"));
    }
    Ok(LayerDelta {
        delta: problem.fold_delta(flat)?,
        report: problem.report(solver, lambda, phases),
    })
}

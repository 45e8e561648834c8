use crate::error::{Error, Result};
use crate::linalg::{Cholesky, Matrix, Mode, Tensor3};
use crate::moe::{EditBatch, MoeLayer};
use crate::timing::PhaseTimings;

use super::{DesignProblem, LayerDelta, NullSpaceProjectorSet};

/// Objective after every block update, starting with the value at `Δ = 0`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct BcdTrace {
    pub objective: Vec<f64>,
}

/// Cyclic block coordinate descent over experts in ascending order.
pub fn solve_bcd(
    batch: &EditBatch,
    layer: &MoeLayer,
    projectors: Option<&NullSpaceProjectorSet>,
    lambda: f64,
    iterations: usize,
) -> Result<LayerDelta> {
    let problem = DesignProblem::build(batch, layer, projectors)?;
    Ok(solve_bcd_traced(&problem, lambda, iterations)?.0)
}

pub fn solve_bcd_design(problem: &DesignProblem, lambda: f64, iterations: usize) -> Result<LayerDelta> {
    Ok(solve_bcd_traced(problem, lambda, iterations)?.0)
}

/// Expert `j` solves `min ‖R' − Δ_j A_j‖² + λ‖Δ_j‖²` with `R'` the residual net
/// of every other expert and `A_j` the `d_hidden × T` block of `Ψ`:
/// `Δ_j = R' A_jᵀ (A_j A_jᵀ + λI)⁻¹`.
pub fn solve_bcd_traced(problem: &DesignProblem, lambda: f64, iterations: usize) -> Result<(LayerDelta, BcdTrace)> {
    if !(lambda > 0.0) {
        return Err(Error::Config(format!("lambda must be positive, got {lambda}")));
    }
    if iterations == 0 {
        return Err(Error::Config("BCD needs at least one iteration".into()));
    }
    let (e, dh, dm) = (problem.experts, problem.d_hidden, problem.d_model());
    let mut phases = PhaseTimings::default();
    let blocks: Vec<Matrix> = (0..e)
        .map(|j| problem.psi.rows_range(j * dh, (j + 1) * dh))
        .collect();
    let active: Vec<bool> = blocks.iter().map(|a| a.max_abs() > 0.0).collect();
    let factors = phases.time("factorization", || {
        blocks
            .iter()
            .zip(&active)
            .map(|(a, on)| on.then(|| Cholesky::factor(&a.gram().add_diagonal(lambda))).transpose())
            .collect::<Result<Vec<_>>>()
    })?;
    let mut delta = Tensor3::zeros(e, dm, dh);
    let mut running = problem.residuals.clone();
    let mut penalty = 0.0;
    let mut trace = BcdTrace {
        objective: vec![running.frobenius_norm().powi(2)],
    };
    phases.time("sweeps", || -> Result<()> {
        for _ in 0..iterations {
            for j in 0..e {
                let Some(chol) = &factors[j] else { continue };
                let a = &blocks[j];
                let old = delta.slab(j);
                // R' = running + Δ_j A_j
                let net = running.add(&old.matmul(a)?)?;
                let rhs = a.matmul(&net.transpose())?;
                let new = chol.solve(&rhs)?.transpose();
                running = net.sub(&new.matmul(a)?)?;
                penalty += new.frobenius_norm().powi(2) - old.frobenius_norm().powi(2);
                delta.set_slab(j, &new)?;
                trace
                    .objective
                    .push(running.frobenius_norm().powi(2) + lambda * penalty.max(0.0));
            }
        }
        Ok(())
    })?;
    if !delta.is_finite() {
        return Err(Error::NonFinite("BCD output"));
    }
    // exact recomputation removes drift from the running penalty
    if let Some(last) = trace.objective.last_mut() {
        *last = problem.objective(&delta.unfold(Mode::Two), lambda)?;
    }
    let report = problem.report("bcd", lambda, phases);
    Ok((LayerDelta { delta, report }, trace))
}

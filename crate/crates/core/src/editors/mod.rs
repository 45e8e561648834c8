//! Closed-form and iterative single-layer edit solvers.
//!
//! Every solver targets the ridge problem
//! `min_Δ ‖R − Δ_flat Ψ‖²_F + λ‖Δ‖²_F`, where `Δ_flat ∈ ℝ^{d_model × E·d_hidden}`
//! places expert `j`'s update in column block `j`, and `Ψ` holds the gate-weighted,
//! null-space-projected keys of each fact.

mod bcd;
mod memit;
mod projector;
mod tucker_core;
mod woodbury;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::linalg::{Matrix, Mode, Tensor3};
use crate::moe::{design_matrix, expert_keys, residual_matrix, route, EditBatch, MoeLayer, PreservationSet};
use crate::timing::PhaseTimings;

pub use bcd::{solve_bcd, solve_bcd_design, solve_bcd_traced, BcdTrace};
pub use memit::solve_dense_memit;
pub use projector::{build_projectors, NullSpaceProjectorSet, DEFAULT_THRESHOLD};
pub use tucker_core::{
    compress_batch, compress_with_residuals, reconstruct_delta, solve_tucker, solve_tucker_core,
    solve_tucker_core_side, solve_tucker_with_residuals, CompressedBatch, CoreSide,
};
pub use woodbury::{
    solve_global_oracle, solve_global_oracle_design, solve_woodbury, solve_woodbury_design,
    ORACLE_MAX_DIM,
};

/// Structured record of one solver invocation.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SolverReport {
    pub solver: String,
    #[serde(rename = "T")]
    pub t: usize,
    #[serde(rename = "E")]
    pub experts: usize,
    pub d_hidden: usize,
    pub ranks: Option<[usize; 3]>,
    pub lambda: f64,
    pub phases: PhaseTimings,
    pub objective_before: Option<f64>,
    pub objective_after: Option<f64>,
}

/// An update for every expert of one layer; slab `j` is `ΔW_j`.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerDelta {
    pub delta: Tensor3,
    pub report: SolverReport,
}

impl LayerDelta {
    pub fn zeros(experts: usize, d_model: usize, d_hidden: usize, solver: &str) -> Self {
        Self {
            delta: Tensor3::zeros(experts, d_model, d_hidden),
            report: SolverReport {
                solver: solver.to_string(),
                experts,
                d_hidden,
                ..SolverReport::default()
            },
        }
    }

    /// `Δ_flat = [ΔW_1 ⋯ ΔW_E]`.
    pub fn flat(&self) -> Matrix {
        self.delta.unfold(Mode::Two)
    }

    /// Records the design objective at zero and at the solved delta.
    pub fn with_objectives(mut self, problem: &DesignProblem, lambda: f64) -> Result<Self> {
        let before = problem.residuals.frobenius_norm().powi(2);
        let after = problem.objective(&self.flat(), lambda)?;
        self.report.objective_before = Some(before);
        self.report.objective_after = Some(after);
        Ok(self)
    }
}

/// Design matrix and residuals of one batch against one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct DesignProblem {
    /// `Ψ ∈ ℝ^{E·d_hidden × T}`.
    pub psi: Matrix,
    /// `R ∈ ℝ^{d_model × T}`.
    pub residuals: Matrix,
    pub experts: usize,
    pub d_hidden: usize,
}

impl DesignProblem {
    pub fn build(
        batch: &EditBatch,
        layer: &MoeLayer,
        projectors: Option<&NullSpaceProjectorSet>,
    ) -> Result<Self> {
        let psi = design_matrix(batch, projectors)?;
        let residuals = residual_matrix(layer, batch)?;
        Self::new(psi, residuals, layer.num_experts(), layer.d_hidden())
    }

    pub fn new(psi: Matrix, residuals: Matrix, experts: usize, d_hidden: usize) -> Result<Self> {
        ensure(psi.rows() == experts * d_hidden, || {
            format!("design has {} rows, expected {}", psi.rows(), experts * d_hidden)
        })?;
        ensure(psi.cols() == residuals.cols(), || {
            format!("design has {} facts, residuals {}", psi.cols(), residuals.cols())
        })?;
        Ok(Self {
            psi,
            residuals,
            experts,
            d_hidden,
        })
    }

    pub fn t(&self) -> usize {
        self.psi.cols()
    }

    pub fn d_model(&self) -> usize {
        self.residuals.rows()
    }

    /// Same design, residuals multiplied by `c`.
    pub fn scaled(&self, c: f64) -> Self {
        Self {
            residuals: self.residuals.scale(c),
            ..self.clone()
        }
    }

    /// `‖R − Δ_flat Ψ‖² + λ‖Δ_flat‖²`, the quantity every solver minimises.
    pub fn objective(&self, delta_flat: &Matrix, lambda: f64) -> Result<f64> {
        let fit = self.residuals.sub(&delta_flat.matmul(&self.psi)?)?;
        Ok(fit.frobenius_norm().powi(2) + lambda * delta_flat.frobenius_norm().powi(2))
    }

    pub(crate) fn report(&self, solver: &str, lambda: f64, phases: PhaseTimings) -> SolverReport {
        SolverReport {
            solver: solver.to_string(),
            t: self.t(),
            experts: self.experts,
            d_hidden: self.d_hidden,
            ranks: None,
            lambda,
            phases,
            objective_before: None,
            objective_after: None,
        }
    }

    pub(crate) fn fold_delta(&self, flat: &Matrix) -> Result<Tensor3> {
        Tensor3::fold(flat, Mode::Two, [self.experts, self.d_model(), self.d_hidden])
    }
}

/// Breakdown of the three-term edit objective at a given delta.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveTerms {
    /// `Σ_f ‖r_f − Σ_j g ΔW_j P_j k‖²` with projected keys.
    pub memorization: f64,
    /// `Σ_f ‖r_f − Σ_j g ΔW_j k‖²` with raw keys.
    pub memorization_raw: f64,
    /// Squared output change on the preservation set.
    pub preservation: f64,
    /// `λ Σ_j ‖ΔW_j‖²`.
    pub penalty: f64,
}

impl ObjectiveTerms {
    /// Memorization plus penalty: what the closed forms minimise.
    pub fn solved(&self) -> f64 {
        self.memorization + self.penalty
    }

    pub fn total(&self) -> f64 {
        self.memorization_raw + self.preservation + self.penalty
    }
}

/// Evaluates the edit objective at `delta`.
///
/// Preservation uses the exact gated output change over `pres.inputs` when
/// inputs are present, otherwise `Σ_j ‖ΔW_j K_{0,j}‖²`.
pub fn objective_value(
    batch: &EditBatch,
    layer: &MoeLayer,
    delta: &Tensor3,
    projectors: Option<&NullSpaceProjectorSet>,
    pres: Option<&PreservationSet>,
    lambda: f64,
) -> Result<ObjectiveTerms> {
    ensure(
        delta.dims() == [layer.num_experts(), layer.d_model(), layer.d_hidden()],
        || format!("delta dims {:?} do not match layer", delta.dims()),
    )?;
    let flat = delta.unfold(Mode::Two);
    let residuals = residual_matrix(layer, batch)?;
    let fit = |psi: Matrix| -> Result<f64> {
        Ok(residuals.sub(&flat.matmul(&psi)?)?.frobenius_norm().powi(2))
    };
    let memorization = fit(design_matrix(batch, projectors)?)?;
    let memorization_raw = fit(design_matrix(batch, None)?)?;
    let mut preservation = 0.0;
    if let Some(p) = pres {
        if p.inputs.is_empty() {
            for (j, keys) in p.keys.iter().enumerate().filter(|(_, k)| k.cols() > 0) {
                preservation += delta.slab(j).matmul(keys)?.frobenius_norm().powi(2);
            }
        } else {
            let dm = layer.d_model();
            for x in &p.inputs {
                let gating = route(layer, x)?;
                let keys = expert_keys(layer, &gating, x)?;
                let mut out = vec![0.0; dm];
                for &j in &gating.selected {
                    let d = delta.slab(j).matvec(keys.row(j))?;
                    for (o, v) in out.iter_mut().zip(d) {
                        *o += gating.weights[j] * v;
                    }
                }
                preservation += out.iter().map(|v| v * v).sum::<f64>();
            }
        }
    }
    Ok(ObjectiveTerms {
        memorization,
        memorization_raw,
        preservation,
        penalty: lambda * delta.frobenius_norm().powi(2),
    })
}

#[cfg(test)]
pub(crate) mod test_support {
    use super::*;
    use crate::moe::{gaussian_vec, seeded_rng};

    /// Random design problem with exactly `active` nonzero blocks per fact.
    pub fn random_problem(e: usize, dh: usize, dm: usize, t: usize, active: usize, seed: u64) -> DesignProblem {
        let mut rng = seeded_rng(seed);
        let mut psi = Matrix::zeros(e * dh, t);
        for c in 0..t {
            for a in 0..active.min(e) {
                let j = (c * 7 + a * 3 + seed as usize) % e;
                let v = gaussian_vec(&mut rng, dh, 1.0);
                for (i, x) in v.into_iter().enumerate() {
                    psi[(j * dh + i, c)] = x;
                }
            }
        }
        let residuals = Matrix::from_vec(dm, t, gaussian_vec(&mut rng, dm * t, 1.0)).unwrap();
        DesignProblem::new(psi, residuals, e, dh).unwrap()
    }
}

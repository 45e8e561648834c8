//! Multi-layer edit plans and weight writeback.
//!
//! Facts are cached once at the last planned layer `L`. Residual spread solves
//! at every planned layer `ℓ` with residuals `R_L / (L − ℓ + 1)`; update spread
//! solves once at `L` and re-expresses the scaled solution through each layer's
//! own factors and projectors.

use serde::{Deserialize, Serialize};

use crate::editors::{
    build_projectors, compress_with_residuals, reconstruct_delta, solve_bcd_design,
    solve_global_oracle_design, solve_tucker_core, solve_tucker_with_residuals,
    solve_woodbury_design, DesignProblem, LayerDelta, NullSpaceProjectorSet, SolverReport,
    DEFAULT_THRESHOLD,
};
use crate::error::{ensure, Error, Result};
use crate::linalg::{Matrix, Tensor3};
use crate::moe::{design_matrix, residual_matrix, EditBatch, MoeLayer, PreservationSet};
use crate::timing::PhaseTimings;
use crate::tucker::{
    default_ranks, hooi_refine, hosvd, TuckerFactors, WhiteningConfig, WhiteningMode,
    DEFAULT_HOOI_SWEEPS, DEFAULT_WHITENING_EPSILON,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverKind {
    GlobalOracle,
    Woodbury,
    Bcd,
    Tucker,
}

impl SolverKind {
    pub const ALL: [SolverKind; 4] = [
        SolverKind::GlobalOracle,
        SolverKind::Woodbury,
        SolverKind::Bcd,
        SolverKind::Tucker,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SolverKind::GlobalOracle => "global_oracle",
            SolverKind::Woodbury => "woodbury",
            SolverKind::Bcd => "bcd",
            SolverKind::Tucker => "tucker",
        }
    }
}

impl std::str::FromStr for SolverKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SolverKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown solver '{s}'")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpreadMode {
    ResidualSpread,
    UpdateSpread,
}

impl SpreadMode {
    pub const ALL: [SpreadMode; 2] = [SpreadMode::ResidualSpread, SpreadMode::UpdateSpread];

    pub fn name(self) -> &'static str {
        match self {
            SpreadMode::ResidualSpread => "residual_spread",
            SpreadMode::UpdateSpread => "update_spread",
        }
    }
}

impl std::str::FromStr for SpreadMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SpreadMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown spread mode '{s}'")))
    }
}

fn default_true() -> bool {
    true
}
fn default_threshold() -> f64 {
    DEFAULT_THRESHOLD
}
fn default_epsilon() -> f64 {
    DEFAULT_WHITENING_EPSILON
}
fn default_sweeps() -> usize {
    DEFAULT_HOOI_SWEEPS
}
fn default_bcd_iterations() -> usize {
    4
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EditPlan {
    /// Indices into the layer stack, strictly increasing; the last is `L`.
    pub layers: Vec<usize>,
    pub solver: SolverKind,
    pub spread_mode: SpreadMode,
    pub lambda: f64,
    #[serde(default = "default_true")]
    pub null_space: bool,
    #[serde(default = "default_threshold")]
    pub null_space_threshold: f64,
    #[serde(default)]
    pub whitening: WhiteningMode,
    #[serde(default = "default_epsilon")]
    pub whitening_epsilon: f64,
    /// `(r_e, r_out, r_in)`; defaults per layer shape when absent.
    #[serde(default)]
    pub ranks: Option<[usize; 3]>,
    #[serde(default = "default_sweeps")]
    pub hooi_sweeps: usize,
    #[serde(default = "default_bcd_iterations")]
    pub bcd_iterations: usize,
    /// Residual spread only: re-route facts through each layer instead of
    /// reusing the last layer's design.
    #[serde(default)]
    pub recompute_design: bool,
    /// Reuse factors and projectors from the first batch for later batches.
    #[serde(default)]
    pub freeze_factors: bool,
}

impl EditPlan {
    pub fn new(layers: Vec<usize>, solver: SolverKind, spread_mode: SpreadMode, lambda: f64) -> Self {
        Self {
            layers,
            solver,
            spread_mode,
            lambda,
            null_space: true,
            null_space_threshold: DEFAULT_THRESHOLD,
            whitening: WhiteningMode::default(),
            whitening_epsilon: DEFAULT_WHITENING_EPSILON,
            ranks: None,
            hooi_sweeps: DEFAULT_HOOI_SWEEPS,
            bcd_iterations: default_bcd_iterations(),
            recompute_design: false,
            freeze_factors: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Config("plan needs at least one layer".into()));
        }
        if self.layers.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!(
                "plan layers must be strictly increasing, got {:?}",
                self.layers
            )));
        }
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be positive, got {}", self.lambda)));
        }
        if !(self.null_space_threshold > 0.0 && self.null_space_threshold < 1.0) {
            return Err(Error::Config(format!(
                "null-space threshold must lie in (0, 1), got {}",
                self.null_space_threshold
            )));
        }
        if !(self.whitening_epsilon > 0.0) {
            return Err(Error::Config(format!(
                "whitening epsilon must be positive, got {}",
                self.whitening_epsilon
            )));
        }
        if self.bcd_iterations == 0 {
            return Err(Error::Config("bcd_iterations must be at least 1".into()));
        }
        if let Some(r) = self.ranks {
            if r.contains(&0) {
                return Err(Error::Config(format!("ranks must be positive, got {r:?}")));
            }
        }
        Ok(())
    }

    pub fn last_layer(&self) -> usize {
        *self.layers.last().expect("validated plan")
    }
}

/// `1 / (L − ℓ + 1)` for each planned layer `ℓ`.
pub fn spread_coefficients(layers: &[usize]) -> Result<Vec<f64>> {
    if layers.is_empty() || layers.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config(format!(
            "layers must be non-empty and strictly increasing, got {layers:?}"
        )));
    }
    let last = *layers.last().expect("non-empty");
    Ok(layers.iter().map(|l| 1.0 / (last - l + 1) as f64).collect())
}

/// `R_ℓ = R_L / (L − ℓ + 1)`.
pub fn spread_residuals(r_last: &Matrix, layers: &[usize]) -> Result<Vec<Matrix>> {
    Ok(spread_coefficients(layers)?
        .into_iter()
        .map(|c| r_last.scale(c))
        .collect())
}

/// Projectors and factors derived from one layer's weights and preservation data.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedLayer {
    pub projectors: Option<NullSpaceProjectorSet>,
    pub factors: Option<TuckerFactors>,
}

/// One layer of the edited stack together with its preservation data.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerState {
    pub layer: MoeLayer,
    pub preservation: PreservationSet,
    frozen: Option<PreparedLayer>,
}

impl LayerState {
    pub fn new(layer: MoeLayer, preservation: PreservationSet) -> Result<Self> {
        ensure(
            preservation.num_experts() == layer.num_experts()
                && preservation.keys.iter().all(|k| k.rows() == layer.d_hidden()),
            || "preservation keys do not match the layer".into(),
        )?;
        Ok(Self {
            layer,
            preservation,
            frozen: None,
        })
    }

    pub fn frozen(&self) -> Option<&PreparedLayer> {
        self.frozen.as_ref()
    }
}

/// Builds projectors (when the plan enables them) and Tucker factors (for the
/// tucker solver).
pub fn prepare_layer(plan: &EditPlan, state: &LayerState) -> Result<PreparedLayer> {
    let projectors = if plan.null_space {
        Some(build_projectors(&state.preservation, plan.null_space_threshold)?)
    } else {
        None
    };
    let factors = if plan.solver == SolverKind::Tucker {
        let l = &state.layer;
        let ranks = plan
            .ranks
            .unwrap_or_else(|| default_ranks(l.num_experts(), l.d_model(), l.d_hidden()));
        let whitening = if plan.whitening == WhiteningMode::None {
            WhiteningConfig::none()
        } else {
            WhiteningConfig::from_preservation(plan.whitening, plan.whitening_epsilon, l, &state.preservation)?
        };
        let w = l.down_tensor();
        let init = hosvd(&w, ranks, &whitening)?;
        Some(hooi_refine(&w, &init, plan.hooi_sweeps, &whitening)?)
    } else {
        None
    };
    Ok(PreparedLayer { projectors, factors })
}

/// Deltas for every planned layer with run-level bookkeeping.
#[derive(Clone, Debug, PartialEq)]
pub struct SpreadOutcome {
    /// `(stack index, delta)`, in plan order.
    pub deltas: Vec<(usize, LayerDelta)>,
    /// Number of linear-system solves performed.
    pub solver_calls: usize,
    /// `prepare`, `solve`, `reconstruct`, `writeback`.
    pub phases: PhaseTimings,
}

/// Phases that count as solving, as opposed to assembling the output.
const SOLVE_PHASES: [&str; 6] = ["kernel", "factorization", "assembly", "sweeps", "compress", "core_solve"];

fn solve_time(report: &SolverReport) -> u64 {
    SOLVE_PHASES.iter().map(|p| report.phases.get(p)).sum()
}

fn check_stack(plan: &EditPlan, states: &[LayerState]) -> Result<()> {
    plan.validate()?;
    let last = plan.last_layer();
    ensure(last < states.len(), || {
        format!("plan layer {last} outside a stack of {}", states.len())
    })?;
    let shape = |l: &MoeLayer| (l.num_experts(), l.d_model(), l.d_hidden());
    let reference = shape(&states[last].layer);
    for &i in &plan.layers {
        ensure(shape(&states[i].layer) == reference, || {
            format!("layer {i} shape differs from the last planned layer")
        })?;
    }
    Ok(())
}

fn prepare_all(
    plan: &EditPlan,
    states: &mut [LayerState],
    phases: &mut PhaseTimings,
) -> Result<Vec<PreparedLayer>> {
    plan.layers
        .iter()
        .map(|&i| {
            if plan.freeze_factors {
                if let Some(p) = &states[i].frozen {
                    return Ok(p.clone());
                }
            }
            let prepared = phases.time("prepare", || prepare_layer(plan, &states[i]))?;
            if plan.freeze_factors {
                states[i].frozen = Some(prepared.clone());
            }
            Ok(prepared)
        })
        .collect()
}

fn solve_design(plan: &EditPlan, problem: &DesignProblem) -> Result<LayerDelta> {
    match plan.solver {
        SolverKind::GlobalOracle => solve_global_oracle_design(problem, plan.lambda),
        SolverKind::Woodbury => solve_woodbury_design(problem, plan.lambda),
        SolverKind::Bcd => solve_bcd_design(problem, plan.lambda, plan.bcd_iterations),
        SolverKind::Tucker => unreachable!("tucker is solved in core coordinates"),
    }
}

/// One solve per planned layer with `R_ℓ = R_L / (L − ℓ + 1)`. Does not write
/// back; see [`run_plan`].
pub fn run_residual_spread(plan: &EditPlan, states: &mut [LayerState], batch: &EditBatch) -> Result<SpreadOutcome> {
    check_stack(plan, states)?;
    let mut phases = PhaseTimings::default();
    let prepared = prepare_all(plan, states, &mut phases)?;
    let last = plan.last_layer();
    let r_last = residual_matrix(&states[last].layer, batch)?;
    let residuals = spread_residuals(&r_last, &plan.layers)?;
    let mut deltas = Vec::with_capacity(plan.layers.len());
    for ((&i, prep), r) in plan.layers.iter().zip(&prepared).zip(residuals) {
        let layer = &states[i].layer;
        let local;
        let b = if plan.recompute_design && i != last {
            local = batch.recache(layer)?;
            &local
        } else {
            batch
        };
        let proj = prep.projectors.as_ref();
        let problem = DesignProblem::new(design_matrix(b, proj)?, r, layer.num_experts(), layer.d_hidden())?;
        let delta = match plan.solver {
            SolverKind::Tucker => {
                let f = prep.factors.as_ref().expect("tucker factors prepared");
                solve_tucker_with_residuals(b, f, proj, &problem.residuals, plan.lambda)?
            }
            _ => solve_design(plan, &problem)?,
        };
        phases.add("solve", solve_time(&delta.report));
        phases.add("reconstruct", delta.report.phases.get("reconstruct"));
        deltas.push((i, delta.with_objectives(&problem, plan.lambda)?));
    }
    Ok(SpreadOutcome {
        solver_calls: deltas.len(),
        deltas,
        phases,
    })
}

/// A single solve at `L`; every planned layer receives the solution scaled by
/// `1 / (L − ℓ + 1)`, expressed through its own factors and projectors. Does not
/// write back; see [`run_plan`].
pub fn run_update_spread(plan: &EditPlan, states: &mut [LayerState], batch: &EditBatch) -> Result<SpreadOutcome> {
    check_stack(plan, states)?;
    let mut phases = PhaseTimings::default();
    let prepared = prepare_all(plan, states, &mut phases)?;
    let last = plan.last_layer();
    let last_prep = prepared.last().expect("validated plan");
    let last_layer = &states[last].layer;
    let r_last = residual_matrix(last_layer, batch)?;
    let coefficients = spread_coefficients(&plan.layers)?;
    let proj_last = last_prep.projectors.as_ref();
    let mut deltas = Vec::with_capacity(plan.layers.len());
    match plan.solver {
        SolverKind::Tucker => {
            let f_last = last_prep.factors.as_ref().expect("tucker factors prepared");
            let mut solve_phases = PhaseTimings::default();
            let c = solve_phases.time("compress", || compress_with_residuals(batch, f_last, proj_last, &r_last))?;
            let core = solve_phases.time("core_solve", || solve_tucker_core(&c, plan.lambda))?;
            phases.add("solve", solve_phases.total());
            for ((&i, prep), coef) in plan.layers.iter().zip(&prepared).zip(&coefficients) {
                let f = prep.factors.as_ref().expect("tucker factors prepared");
                ensure(f.ranks() == core.ranks(), || {
                    format!("layer {i} ranks {:?} differ from the solved core {:?}", f.ranks(), core.ranks())
                })?;
                let proj = prep.projectors.as_ref();
                let mut layer_phases = solve_phases.clone();
                let delta = layer_phases.time("reconstruct", || reconstruct_delta(&core.scale(*coef), f, proj))?;
                phases.add("reconstruct", layer_phases.get("reconstruct"));
                let l = &states[i].layer;
                let report = SolverReport {
                    solver: "tucker".into(),
                    t: batch.len(),
                    experts: l.num_experts(),
                    d_hidden: l.d_hidden(),
                    ranks: Some(f.ranks()),
                    lambda: plan.lambda,
                    phases: layer_phases,
                    objective_before: None,
                    objective_after: None,
                };
                let problem = DesignProblem::new(design_matrix(batch, proj)?, r_last.scale(*coef), l.num_experts(), l.d_hidden())?;
                deltas.push((i, LayerDelta { delta, report }.with_objectives(&problem, plan.lambda)?));
            }
        }
        _ => {
            let problem = DesignProblem::new(
                design_matrix(batch, proj_last)?,
                r_last.clone(),
                last_layer.num_experts(),
                last_layer.d_hidden(),
            )?;
            let solved = solve_design(plan, &problem)?;
            phases.add("solve", solve_time(&solved.report));
            for ((&i, prep), coef) in plan.layers.iter().zip(&prepared).zip(&coefficients) {
                let proj = prep.projectors.as_ref();
                let mut report = solved.report.clone();
                let delta = report
                    .phases
                    .time("reconstruct", || scale_and_project(&solved.delta, *coef, proj))?;
                phases.add("reconstruct", report.phases.get("reconstruct"));
                let l = &states[i].layer;
                let local = DesignProblem::new(design_matrix(batch, proj)?, r_last.scale(*coef), l.num_experts(), l.d_hidden())?;
                deltas.push((i, LayerDelta { delta, report }.with_objectives(&local, plan.lambda)?));
            }
        }
    }
    Ok(SpreadOutcome {
        deltas,
        solver_calls: 1,
        phases,
    })
}

/// `Δ^ℓ_j = c · Δ^L_j P^ℓ_j`.
fn scale_and_project(delta: &Tensor3, c: f64, proj: Option<&NullSpaceProjectorSet>) -> Result<Tensor3> {
    let mut out = delta.scale(c);
    if let Some(p) = proj {
        for j in 0..delta.dims()[0] {
            let slab = out.slab(j).matmul(p.matrix(j))?;
            out.set_slab(j, &slab)?;
        }
    }
    Ok(out)
}

/// Returns `layer` with `delta` added to every expert's down-projection.
pub fn writeback(layer: &MoeLayer, delta: &LayerDelta) -> Result<MoeLayer> {
    let mut out = layer.clone();
    writeback_in_place(&mut out, &delta.delta)?;
    Ok(out)
}

/// Standard layout adds slab `j` directly; the packed layout adds its transpose.
pub fn writeback_in_place(layer: &mut MoeLayer, delta: &Tensor3) -> Result<()> {
    ensure(
        delta.dims() == [layer.num_experts(), layer.d_model(), layer.d_hidden()],
        || format!("delta dims {:?} do not match layer", delta.dims()),
    )?;
    if !delta.is_finite() {
        return Err(Error::NonFinite("delta"));
    }
    for j in 0..layer.num_experts() {
        layer.add_to_expert_down(j, delta.slab_data(j));
    }
    Ok(())
}

/// Runs the plan's spread mode, then writes every delta back from the earliest
/// planned layer upward.
pub fn run_plan(plan: &EditPlan, states: &mut [LayerState], batch: &EditBatch) -> Result<SpreadOutcome> {
    let mut outcome = match plan.spread_mode {
        SpreadMode::ResidualSpread => run_residual_spread(plan, states, batch)?,
        SpreadMode::UpdateSpread => run_update_spread(plan, states, batch)?,
    };
    let mut wb = PhaseTimings::default();
    wb.time("writeback", || -> Result<()> {
        for (i, d) in &outcome.deltas {
            writeback_in_place(&mut states[*i].layer, &d.delta)?;
        }
        Ok(())
    })?;
    outcome.phases.merge(&wb);
    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::moe::{moe_forward, sample_inputs, synthesize_batch, Activation, LayerSpec, Layout};

    fn spec(layout: Layout) -> LayerSpec {
        LayerSpec {
            experts: 4,
            top_k: 2,
            d_model: 6,
            d_hidden: 5,
            activation: Activation::Silu,
            layout,
        }
    }

    fn stack(n: usize, shared: bool) -> Vec<LayerState> {
        (0..n)
            .map(|i| {
                let layer = MoeLayer::synthesize(&spec(Layout::Standard), if shared { 7 } else { 7 + i as u64 }).unwrap();
                let pres = PreservationSet::from_inputs(&layer, sample_inputs(6, 12, 3)).unwrap();
                LayerState::new(layer, pres).unwrap()
            })
            .collect()
    }

    #[test]
    fn coefficients() {
        assert_eq!(spread_coefficients(&[4]).unwrap(), vec![1.0]);
        assert_eq!(spread_coefficients(&[3, 5]).unwrap(), vec![1.0 / 3.0, 1.0]);
        let c = spread_coefficients(&[3, 4, 5, 6, 7]).unwrap();
        assert_eq!(c, vec![1.0 / 5.0, 1.0 / 4.0, 1.0 / 3.0, 1.0 / 2.0, 1.0]);
        let sum: f64 = c.iter().sum();
        assert!((sum - 137.0 / 60.0).abs() < 1e-15);
        assert!(spread_coefficients(&[]).is_err());
        assert!(spread_coefficients(&[2, 2]).is_err());
    }

    #[test]
    fn plan_validation_and_toml() {
        let mut p = EditPlan::new(vec![1, 2], SolverKind::Tucker, SpreadMode::UpdateSpread, 0.1);
        p.validate().unwrap();
        let text = toml::to_string(&p).unwrap();
        assert_eq!(toml::from_str::<EditPlan>(&text).unwrap(), p);
        let minimal: EditPlan =
            toml::from_str("layers = [0]\nsolver = \"woodbury\"\nspread_mode = \"residual_spread\"\nlambda = 1.0\n")
                .unwrap();
        assert!(minimal.null_space);
        assert_eq!(minimal.whitening, WhiteningMode::In);
        p.layers = vec![2, 1];
        assert!(p.validate().is_err());
        p.layers = vec![1];
        p.lambda = 0.0;
        assert!(p.validate().is_err());
    }

    #[test]
    fn call_counts() {
        let mut states = stack(3, false);
        let batch = synthesize_batch(&states[2].layer, 4, 1, 1.0, 0.1).unwrap();
        let mut plan = EditPlan::new(vec![0, 1, 2], SolverKind::Tucker, SpreadMode::ResidualSpread, 0.1);
        assert_eq!(run_residual_spread(&plan, &mut states, &batch).unwrap().solver_calls, 3);
        plan.spread_mode = SpreadMode::UpdateSpread;
        let out = run_update_spread(&plan, &mut states, &batch).unwrap();
        assert_eq!(out.solver_calls, 1);
        assert_eq!(out.deltas.len(), 3);
    }

    #[test]
    fn one_layer_modes_agree() {
        let mut states = stack(1, false);
        let batch = synthesize_batch(&states[0].layer, 4, 2, 1.0, 0.1).unwrap();
        let mut plan = EditPlan::new(vec![0], SolverKind::Tucker, SpreadMode::ResidualSpread, 0.1);
        let a = run_residual_spread(&plan, &mut states, &batch).unwrap();
        plan.spread_mode = SpreadMode::UpdateSpread;
        let b = run_update_spread(&plan, &mut states, &batch).unwrap();
        assert_eq!(a.deltas[0].1.delta, b.deltas[0].1.delta);
    }

    #[test]
    fn shared_weights_scale_linearly() {
        for solver in SolverKind::ALL {
            for mode in SpreadMode::ALL {
                let mut states = stack(2, true);
                let batch = synthesize_batch(&states[1].layer, 3, 4, 1.0, 0.2).unwrap();
                let plan = EditPlan::new(vec![0, 1], solver, mode, 0.2);
                let out = match mode {
                    SpreadMode::ResidualSpread => run_residual_spread(&plan, &mut states, &batch),
                    SpreadMode::UpdateSpread => run_update_spread(&plan, &mut states, &batch),
                }
                .unwrap();
                let half = out.deltas[1].1.delta.scale(0.5);
                let dev = out.deltas[0].1.delta.sub(&half).unwrap().frobenius_norm();
                assert!(dev <= 1e-12 * half.frobenius_norm(), "{solver:?} {mode:?}: {dev}");
            }
        }
    }

    #[test]
    fn writeback_is_layout_invariant() {
        let std_layer = MoeLayer::synthesize(&spec(Layout::Standard), 5).unwrap();
        let packed = std_layer.to_layout(Layout::TransposedPacked);
        let batch = synthesize_batch(&std_layer, 3, 6, 1.0, 0.1).unwrap();
        let d = crate::editors::solve_woodbury(&batch, &std_layer, None, 0.1).unwrap();
        let a = writeback(&std_layer, &d).unwrap();
        let b = writeback(&packed, &d).unwrap();
        for j in 0..4 {
            assert_eq!(a.expert_down(j), b.expert_down(j));
            assert_eq!(a.expert_down(j), std_layer.expert_down(j).add(&d.delta.slab(j)).unwrap());
        }
        for x in sample_inputs(6, 5, 9) {
            assert_eq!(moe_forward(&a, &x).unwrap(), moe_forward(&b, &x).unwrap());
        }
        let zero = LayerDelta::zeros(4, 6, 5, "none");
        assert_eq!(writeback(&packed, &zero).unwrap(), packed);
    }

    #[test]
    fn freeze_reuses_prepared_factors() {
        let mut states = stack(1, false);
        let mut plan = EditPlan::new(vec![0], SolverKind::Tucker, SpreadMode::UpdateSpread, 0.1);
        plan.freeze_factors = true;
        let b1 = synthesize_batch(&states[0].layer, 3, 1, 1.0, 0.1).unwrap();
        run_plan(&plan, &mut states, &b1).unwrap();
        let frozen = states[0].frozen().cloned().unwrap();
        let b2 = synthesize_batch(&states[0].layer, 3, 2, 1.0, 0.1).unwrap();
        run_plan(&plan, &mut states, &b2).unwrap();
        assert_eq!(states[0].frozen(), Some(&frozen));
        assert_ne!(prepare_layer(&plan, &states[0]).unwrap().factors, frozen.factors);
    }
}

//! Solver timing grid. Repetitions run sequentially on the calling thread.

use serde::{Deserialize, Serialize};

use crate::editors::ORACLE_MAX_DIM;
use crate::error::{Error, Result};
use crate::moe::{sample_subspace_inputs, synthesize_batch, Activation, LayerSpec, Layout, MoeLayer, PreservationSet};
use crate::spread::{run_residual_spread, run_update_spread, EditPlan, LayerState, SolverKind, SpreadMode};

use super::{derive_seed, median_u64};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchSize {
    pub experts: usize,
    pub d_hidden: usize,
    #[serde(rename = "T")]
    pub t: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchGrid {
    pub seed: u64,
    pub repetitions: usize,
    pub d_model: usize,
    pub top_k: usize,
    /// Number of planned layers `|layers|`.
    pub layers: usize,
    pub lambda: f64,
    pub null_space: bool,
    pub ranks: Option<[usize; 3]>,
    pub solvers: Vec<SolverKind>,
    pub modes: Vec<SpreadMode>,
    pub sizes: Vec<BenchSize>,
}

impl Default for BenchGrid {
    fn default() -> Self {
        Self {
            seed: 7,
            repetitions: 3,
            d_model: 16,
            top_k: 2,
            layers: 3,
            lambda: 0.1,
            null_space: true,
            ranks: None,
            solvers: SolverKind::ALL.to_vec(),
            modes: SpreadMode::ALL.to_vec(),
            sizes: vec![
                BenchSize {
                    experts: 4,
                    d_hidden: 16,
                    t: 8,
                },
                BenchSize {
                    experts: 8,
                    d_hidden: 32,
                    t: 16,
                },
            ],
        }
    }
}

impl BenchGrid {
    pub fn validate(&self) -> Result<()> {
        if self.repetitions < 3 {
            return Err(Error::Config(format!("repetitions must be at least 3, got {}", self.repetitions)));
        }
        if self.layers == 0 || self.d_model == 0 || self.top_k == 0 {
            return Err(Error::Config("layers, d_model and top_k must be positive".into()));
        }
        if !(self.lambda > 0.0) {
            return Err(Error::Config(format!("lambda must be positive, got {}", self.lambda)));
        }
        if self.solvers.is_empty() || self.modes.is_empty() || self.sizes.is_empty() {
            return Err(Error::Config("solvers, modes and sizes must be non-empty".into()));
        }
        for s in &self.sizes {
            if s.experts == 0 || s.d_hidden == 0 || s.t == 0 {
                return Err(Error::Config(format!("grid sizes must be positive, got {s:?}")));
            }
            if self.top_k > s.experts {
                return Err(Error::Config(format!(
                    "active experts K={} must satisfy 1 <= K <= E={}",
                    self.top_k, s.experts
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub solver: SolverKind,
    pub spread_mode: SpreadMode,
    #[serde(rename = "E")]
    pub experts: usize,
    pub d_hidden: usize,
    #[serde(rename = "T")]
    pub t: usize,
    pub layers: usize,
    pub repetitions: usize,
    pub solver_calls: usize,
    /// Linear-system work: kernels, factorizations, compression and core solves.
    pub median_solve_ns: u64,
    pub median_reconstruct_ns: u64,
    pub median_prepare_ns: u64,
    pub median_total_ns: u64,
    pub skipped: Option<String>,
}

/// Synthetic stack of `layers` layers sharing one shape, plus a batch cached
/// at the last layer.
pub fn bench_instance(
    grid: &BenchGrid,
    size: BenchSize,
    seed: u64,
) -> Result<(Vec<LayerState>, crate::moe::EditBatch)> {
    let spec = LayerSpec {
        experts: size.experts,
        top_k: grid.top_k,
        d_model: grid.d_model,
        d_hidden: size.d_hidden,
        activation: Activation::Silu,
        layout: Layout::Standard,
    };
    let mut states = Vec::with_capacity(grid.layers);
    for i in 0..grid.layers {
        let layer = MoeLayer::synthesize(&spec, derive_seed(seed, 10 + i as u64))?;
        let inputs = sample_subspace_inputs(grid.d_model, (grid.d_model / 4).max(1), 4 * size.experts, derive_seed(seed, 50 + i as u64));
        let pres = PreservationSet::from_inputs(&layer, inputs)?;
        states.push(LayerState::new(layer, pres)?);
    }
    let last = &states.last().expect("layers > 0").layer;
    let batch = synthesize_batch(last, size.t, derive_seed(seed, 99), 1.0, grid.lambda)?;
    Ok((states, batch))
}

pub fn run_bench(grid: &BenchGrid) -> Result<Vec<BenchRow>> {
    grid.validate()?;
    let mut rows = Vec::new();
    for (si, &size) in grid.sizes.iter().enumerate() {
        let (states, batch) = bench_instance(grid, size, derive_seed(grid.seed, si as u64))?;
        for &solver in &grid.solvers {
            for &mode in &grid.modes {
                let mut row = BenchRow {
                    solver,
                    spread_mode: mode,
                    experts: size.experts,
                    d_hidden: size.d_hidden,
                    t: size.t,
                    layers: grid.layers,
                    repetitions: grid.repetitions,
                    solver_calls: 0,
                    median_solve_ns: 0,
                    median_reconstruct_ns: 0,
                    median_prepare_ns: 0,
                    median_total_ns: 0,
                    skipped: None,
                };
                if solver == SolverKind::GlobalOracle && size.experts * size.d_hidden > ORACLE_MAX_DIM {
                    row.skipped = Some(format!("E*d_hidden exceeds oracle limit {ORACLE_MAX_DIM}"));
                    rows.push(row);
                    continue;
                }
                let mut plan = EditPlan::new((0..grid.layers).collect(), solver, mode, grid.lambda);
                plan.null_space = grid.null_space;
                plan.ranks = grid.ranks;
                let (mut solve, mut recon, mut prep, mut total) = (vec![], vec![], vec![], vec![]);
                for _ in 0..grid.repetitions {
                    let mut local = states.clone();
                    let out = match mode {
                        SpreadMode::ResidualSpread => run_residual_spread(&plan, &mut local, &batch)?,
                        SpreadMode::UpdateSpread => run_update_spread(&plan, &mut local, &batch)?,
                    };
                    row.solver_calls = out.solver_calls;
                    solve.push(out.phases.get("solve"));
                    recon.push(out.phases.get("reconstruct"));
                    prep.push(out.phases.get("prepare"));
                    total.push(out.phases.total());
                }
                row.median_solve_ns = median_u64(&mut solve);
                row.median_reconstruct_ns = median_u64(&mut recon);
                row.median_prepare_ns = median_u64(&mut prep);
                row.median_total_ns = median_u64(&mut total);
                rows.push(row);
            }
        }
    }
    Ok(rows)
}

/// One JSON object per row.
pub fn bench_json_lines(rows: &[BenchRow]) -> String {
    rows.iter().map(|r| serde_json::to_string(r).expect("plain record") + "\n").collect()
}

pub fn render_table(rows: &[BenchRow]) -> String {
    let mut s = format!(
        "{:<14} {:<16} {:>4} {:>8} {:>4} {:>6} {:>6} {:>14} {:>14} {:>14}\n",
        "solver", "mode", "E", "d_hidden", "T", "layers", "calls", "solve_ms", "reconstr_ms", "total_ms"
    );
    let ms = |ns: u64| ns as f64 / 1e6;
    for r in rows {
        if let Some(why) = &r.skipped {
            s.push_str(&format!(
                "{:<14} {:<16} {:>4} {:>8} {:>4} {:>6}  skipped: {why}\n",
                r.solver.name(),
                r.spread_mode.name(),
                r.experts,
                r.d_hidden,
                r.t,
                r.layers
            ));
            continue;
        }
        s.push_str(&format!(
            "{:<14} {:<16} {:>4} {:>8} {:>4} {:>6} {:>6} {:>14.3} {:>14.3} {:>14.3}\n",
            r.solver.name(),
            r.spread_mode.name(),
            r.experts,
            r.d_hidden,
            r.t,
            r.layers,
            r.solver_calls,
            ms(r.median_solve_ns),
            ms(r.median_reconstruct_ns),
            ms(r.median_total_ns)
        ));
    }
    s
}

//! Browser bindings. Each export returns a JSON string the page renders.

use moe_edit::harness::{generate, run_bench, run_edit, BenchGrid, BenchSize, GenerateConfig, Generated};
use moe_edit::spread::{EditPlan, SolverKind, SpreadMode};
use moe_edit::tucker::default_ranks;
use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

fn demo_config(seed: u64, lambda: f64) -> GenerateConfig {
    let mut cfg = GenerateConfig {
        seed,
        ..GenerateConfig::default()
    };
    cfg.model.layers = 3;
    cfg.model.experts = 8;
    cfg.model.top_k = 2;
    cfg.model.d_model = 16;
    cfg.model.d_hidden = 24;
    cfg.batch.facts = 8;
    cfg.batch.lambda = lambda;
    cfg
}

fn edit_row(model: &Generated, plan: &EditPlan) -> moe_edit::Result<Value> {
    let mut local = model.clone();
    let r = run_edit(plan, &mut local)?;
    Ok(json!({
        "efficacy": r.metrics.efficacy_analogue,
        "residual_ratio": r.metrics.mean_residual_ratio,
        "generalization": r.metrics.generalization_analogue,
        "specificity": r.metrics.specificity_analogue,
        "routing_similarity": r.metrics.routing_similarity_preservation,
        "total_ms": r.phases.total() as f64 / 1e6,
    }))
}

/// Tucker residual-spread edits over every layer, one row per lambda.
pub fn lambda_sweep_json(seed: u64, lambdas: &[f64]) -> moe_edit::Result<String> {
    let model = generate(&demo_config(seed, 0.1))?;
    let layers: Vec<usize> = (0..model.states.len()).collect();
    let mut rows = Vec::with_capacity(lambdas.len());
    for &lambda in lambdas {
        let plan = EditPlan::new(layers.clone(), SolverKind::Tucker, SpreadMode::ResidualSpread, lambda);
        let mut row = edit_row(&model, &plan)?;
        row["lambda"] = json!(lambda);
        rows.push(row);
    }
    Ok(Value::from(rows).to_string())
}

/// Single-layer Tucker edits with `r_out = r_in = r` for each `r` up to full rank.
pub fn rank_sweep_json(seed: u64, lambda: f64) -> moe_edit::Result<String> {
    let cfg = demo_config(seed, lambda);
    let model = generate(&cfg)?;
    let (e, dm, dh) = (cfg.model.experts, cfg.model.d_model, cfg.model.d_hidden);
    let last = model.states.len() - 1;
    let mut rows = Vec::new();
    for r in (2..=dh).step_by(2) {
        let mut plan = EditPlan::new(vec![last], SolverKind::Tucker, SpreadMode::ResidualSpread, lambda);
        let ranks = [e, r.min(dm), r];
        plan.ranks = Some(ranks);
        let mut row = edit_row(&model, &plan)?;
        row["ranks"] = json!(ranks);
        rows.push(row);
    }
    let defaults = default_ranks(e, dm, dh);
    Ok(json!({ "default_ranks": defaults, "rows": rows }).to_string())
}

/// Medians over three repetitions for both spread modes and the two fast solvers.
pub fn spread_timing_json(seed: u64, experts: usize, d_hidden: usize, facts: usize, layers: usize) -> moe_edit::Result<String> {
    let grid = BenchGrid {
        seed,
        layers,
        solvers: vec![SolverKind::Tucker, SolverKind::Woodbury],
        sizes: vec![BenchSize {
            experts,
            d_hidden,
            t: facts,
        }],
        ..BenchGrid::default()
    };
    let rows = run_bench(&grid)?;
    Ok(serde_json::to_string(&rows).expect("plain records"))
}

fn js<T>(r: moe_edit::Result<T>) -> Result<T, JsError> {
    r.map_err(|e| JsError::new(&e.to_string()))
}

#[wasm_bindgen]
pub fn lambda_sweep(seed: u64, lambdas: &[f64]) -> Result<String, JsError> {
    js(lambda_sweep_json(seed, lambdas))
}

#[wasm_bindgen]
pub fn rank_sweep(seed: u64, lambda: f64) -> Result<String, JsError> {
    js(rank_sweep_json(seed, lambda))
}

#[wasm_bindgen]
pub fn spread_timing(seed: u64, experts: usize, d_hidden: usize, facts: usize, layers: usize) -> Result<String, JsError> {
    js(spread_timing_json(seed, experts, d_hidden, facts, layers))
}

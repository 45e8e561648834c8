//! Edit-quality analogues measured on the edited linear maps.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::linalg::norm;
use crate::moe::{compute_residual, gaussian_vec, mixture_output, moe_forward, route, seeded_rng, EditBatch, MoeLayer};

/// A fact counts as edited once its residual falls below this fraction of
/// its pre-edit residual.
pub const EFFICACY_THRESHOLD: f64 = 0.1;

/// Relative key-noise scale for the generalization analogue.
pub const GENERALIZATION_NOISE: f64 = 0.05;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EfficacyStats {
    /// Fraction of facts with `‖r_after‖ < 0.1 ‖r_before‖`.
    pub fraction: f64,
    /// Mean of `‖r_after‖ / ‖r_before‖` over facts with a nonzero residual.
    pub mean_ratio: f64,
}

fn stats(pairs: impl Iterator<Item = (f64, f64)>) -> EfficacyStats {
    let (mut hits, mut count, mut ratio_sum, mut ratio_count) = (0usize, 0usize, 0.0, 0usize);
    for (before, after) in pairs {
        count += 1;
        if before > 0.0 {
            ratio_sum += after / before;
            ratio_count += 1;
            if after < EFFICACY_THRESHOLD * before {
                hits += 1;
            }
        } else if after == 0.0 {
            hits += 1;
        }
    }
    EfficacyStats {
        fraction: if count == 0 { 0.0 } else { hits as f64 / count as f64 },
        mean_ratio: if ratio_count == 0 { 0.0 } else { ratio_sum / ratio_count as f64 },
    }
}

/// Residual reduction on the edited facts, keys cached in `batch`.
pub fn efficacy(before: &MoeLayer, after: &MoeLayer, batch: &EditBatch) -> Result<EfficacyStats> {
    let pairs = batch
        .facts
        .iter()
        .map(|f| Ok((norm(&compute_residual(before, f)?), norm(&compute_residual(after, f)?))))
        .collect::<Result<Vec<_>>>()?;
    Ok(stats(pairs.into_iter()))
}

/// Efficacy with every active key perturbed by Gaussian noise of relative
/// scale `noise`; targets are unchanged.
pub fn generalization(
    before: &MoeLayer,
    after: &MoeLayer,
    batch: &EditBatch,
    noise: f64,
    seed: u64,
) -> Result<EfficacyStats> {
    let mut rng = seeded_rng(seed);
    let mut pairs = Vec::with_capacity(batch.len());
    for f in &batch.facts {
        let mut keys = f.keys.clone();
        for &j in &f.gating.selected {
            let scale = noise * norm(keys.row(j)) / (keys.cols() as f64).sqrt();
            let n = gaussian_vec(&mut rng, keys.cols(), scale);
            for (k, e) in keys.row_mut(j).iter_mut().zip(n) {
                *k += e;
            }
        }
        let resid = |layer: &MoeLayer| -> f64 {
            let out = mixture_output(layer, &f.gating, &keys);
            let r: Vec<f64> = f.target_v.iter().zip(out).map(|(v, o)| v - o).collect();
            norm(&r)
        };
        pairs.push((resid(before), resid(after)));
    }
    Ok(stats(pairs.into_iter()))
}

/// Mean relative output drift `‖f_after(x) − f_before(x)‖ / ‖f_before(x)‖`.
pub fn specificity(before: &MoeLayer, after: &MoeLayer, inputs: &[Vec<f64>]) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for x in inputs {
        let a = moe_forward(before, x)?;
        let b = moe_forward(after, x)?;
        let base = norm(&a);
        if base > 0.0 {
            let d: Vec<f64> = b.iter().zip(&a).map(|(p, q)| p - q).collect();
            total += norm(&d) / base;
            count += 1;
        }
    }
    Ok(if count == 0 { 0.0 } else { total / count as f64 })
}

/// Mean top-K overlap `|S_before ∩ S_after| / K` over `inputs`.
pub fn routing_similarity(before: &MoeLayer, after: &MoeLayer, inputs: &[Vec<f64>]) -> Result<f64> {
    ensure(
        before.num_experts() == after.num_experts() && before.top_k() == after.top_k(),
        || "routing similarity needs layers with the same E and K".into(),
    )?;
    let mut total = 0.0;
    for x in inputs {
        let a = route(before, x)?;
        let b = route(after, x)?;
        let shared = a.selected.iter().filter(|j| b.is_selected(**j)).count();
        total += shared as f64 / before.top_k() as f64;
    }
    Ok(if inputs.is_empty() { 1.0 } else { total / inputs.len() as f64 })
}

/// Top-K overlap of `router` on `x` versus `x + shift(x)`: router stability
/// under a hidden-state perturbation supplied by the caller.
pub fn routing_similarity_shifted(
    router: &MoeLayer,
    inputs: &[Vec<f64>],
    shift: impl Fn(&[f64]) -> Result<Vec<f64>>,
) -> Result<f64> {
    let mut total = 0.0;
    for x in inputs {
        let a = route(router, x)?;
        let moved: Vec<f64> = x.iter().zip(shift(x)?).map(|(p, q)| p + q).collect();
        let b = route(router, &moved)?;
        let shared = a.selected.iter().filter(|j| b.is_selected(**j)).count();
        total += shared as f64 / router.top_k() as f64;
    }
    Ok(if inputs.is_empty() { 1.0 } else { total / inputs.len() as f64 })
}

//! Identity-verification suite: every check compares two independent routes to
//! the same quantity and reports the largest relative deviation seen.

use serde::{Deserialize, Serialize};

use crate::editors::{
    build_projectors, compress_batch, reconstruct_delta, solve_global_oracle, solve_tucker, solve_tucker_core_side,
    solve_woodbury, CoreSide, ORACLE_MAX_DIM,
};
use crate::error::{Error, Result};
use crate::linalg::{push_through, Matrix, Mode, Tensor3};
use crate::moe::{
    gaussian_vec, sample_subspace_inputs, seeded_rng, synthesize_batch, Activation, LayerSpec, Layout, MoeLayer,
    PreservationSet,
};
use crate::tucker::{fit_error, hosvd, TuckerFactors, WhiteningConfig, WhiteningMode};

use super::derive_seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifyConfig {
    pub seeds: Vec<u64>,
    pub lambdas: Vec<f64>,
    pub experts: usize,
    pub top_k: usize,
    pub d_model: usize,
    pub d_hidden: usize,
    pub facts: usize,
    /// Dimensions and ranks of the random tensors used for the HOSVD check.
    pub tensor_dims: [usize; 3],
    pub tensor_ranks: [usize; 3],
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            seeds: vec![1, 2, 3],
            lambdas: vec![1e-3, 0.1, 1.0, 10.0],
            experts: 4,
            top_k: 2,
            d_model: 8,
            d_hidden: 8,
            facts: 6,
            tensor_dims: [4, 6, 5],
            tensor_ranks: [2, 3, 3],
        }
    }
}

impl VerifyConfig {
    pub fn validate(&self) -> Result<()> {
        if let Some(l) = self.lambdas.iter().find(|l| !(**l > 0.0 && l.is_finite())) {
            return Err(Error::Config(format!("lambda must be positive, got {l}")));
        }
        if self.seeds.is_empty() || self.lambdas.is_empty() {
            return Err(Error::Config("verification needs at least one seed and one lambda".into()));
        }
        if self.experts * self.d_hidden > ORACLE_MAX_DIM {
            return Err(Error::OracleGuard {
                size: self.experts * self.d_hidden,
                limit: ORACLE_MAX_DIM,
            });
        }
        if self.facts == 0 {
            return Err(Error::Config("verification needs at least one fact".into()));
        }
        self.spec().validate()?;
        for (r, d) in self.tensor_ranks.iter().zip(self.tensor_dims) {
            if *r == 0 || *r > d {
                return Err(Error::RankOutOfRange { rank: *r, max: d });
            }
        }
        Ok(())
    }

    fn spec(&self) -> LayerSpec {
        LayerSpec {
            experts: self.experts,
            top_k: self.top_k,
            d_model: self.d_model,
            d_hidden: self.d_hidden,
            activation: Activation::Silu,
            layout: Layout::Standard,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub instances: usize,
    pub max_deviation: f64,
    pub tolerance: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub checks: Vec<CheckResult>,
    pub passed: bool,
}

impl VerifyReport {
    pub fn to_json_lines(&self) -> String {
        let mut s: String = self
            .checks
            .iter()
            .map(|c| serde_json::to_string(c).expect("plain record") + "\n")
            .collect();
        s.push_str(&serde_json::json!({ "record": "summary", "passed": self.passed }).to_string());
        s.push('\n');
        s
    }

    pub fn to_table(&self) -> String {
        let mut s = format!("{:<28} {:>9} {:>14} {:>10} {:>6}\n", "check", "instances", "max_dev", "tolerance", "ok");
        for c in &self.checks {
            s.push_str(&format!(
                "{:<28} {:>9} {:>14.3e} {:>10.0e} {:>6}\n",
                c.name,
                c.instances,
                c.max_deviation,
                c.tolerance,
                if c.passed { "yes" } else { "NO" }
            ));
        }
        s
    }
}

pub(crate) fn rel_dev(a: &Matrix, b: &Matrix) -> Result<f64> {
    let scale = b.frobenius_norm().max(a.frobenius_norm());
    let diff = a.sub(b)?.frobenius_norm();
    Ok(if scale == 0.0 { diff } else { diff / scale })
}

struct Tracker {
    name: &'static str,
    tolerance: f64,
    instances: usize,
    max: f64,
}

impl Tracker {
    fn new(name: &'static str, tolerance: f64) -> Self {
        Self {
            name,
            tolerance,
            instances: 0,
            max: 0.0,
        }
    }

    fn record(&mut self, dev: f64) {
        self.instances += 1;
        // NaN must register as a breach
        self.max = if dev.is_nan() { f64::INFINITY } else { self.max.max(dev) };
    }

    fn finish(self) -> CheckResult {
        CheckResult {
            name: self.name.into(),
            instances: self.instances,
            max_deviation: self.max,
            tolerance: self.tolerance,
            passed: self.max < self.tolerance,
        }
    }
}

/// Left singular vectors of `a` by one-sided Jacobi rotations on `aᵀ`, sorted
/// by descending singular value. Independent of any Gram-matrix eigensolve.
pub fn jacobi_left_singular_vectors(a: &Matrix, r: usize) -> Result<Matrix> {
    let n = a.rows();
    if r > n {
        return Err(Error::RankOutOfRange { rank: r, max: n });
    }
    // columns of aᵀ are the rows of a
    let mut cols: Vec<Vec<f64>> = (0..n).map(|i| a.row(i).to_vec()).collect();
    let mut v = Matrix::identity(n);
    let dot = crate::linalg::dot;
    for sweep in 0.. {
        if sweep == 100 {
            return Err(Error::NoConvergence(sweep));
        }
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let alpha = dot(&cols[p], &cols[p]);
                let beta = dot(&cols[q], &cols[q]);
                let gamma = dot(&cols[p], &cols[q]);
                if gamma.abs() <= 1e-15 * (alpha * beta).sqrt() || gamma == 0.0 {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                let (lo, hi) = cols.split_at_mut(q);
                for (x, y) in lo[p].iter_mut().zip(hi[0].iter_mut()) {
                    let (xp, yq) = (*x, *y);
                    *x = c * xp - s * yq;
                    *y = s * xp + c * yq;
                }
                for i in 0..n {
                    let (xp, yq) = (v[(i, p)], v[(i, q)]);
                    v[(i, p)] = c * xp - s * yq;
                    v[(i, q)] = s * xp + c * yq;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    let sv: Vec<f64> = cols.iter().map(|c| dot(c, c)).collect();
    order.sort_by(|&i, &j| sv[j].total_cmp(&sv[i]));
    Ok(Matrix::from_fn(n, r, |i, k| v[(i, order[k])]))
}

/// HOSVD factors from per-unfolding SVDs.
pub fn svd_reference_factors(w: &Tensor3, ranks: [usize; 3]) -> Result<TuckerFactors> {
    let f = |m: Mode| jacobi_left_singular_vectors(&w.unfold(m), ranks[m.index()]);
    Ok(TuckerFactors {
        expert: f(Mode::One)?,
        output: f(Mode::Two)?,
        input: f(Mode::Three)?,
        whitening: WhiteningMode::None,
        epsilon: 0.0,
    })
}

fn random_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
    let mut rng = seeded_rng(seed);
    Matrix::from_vec(rows, cols, gaussian_vec(&mut rng, rows * cols, 1.0)).expect("shape")
}

/// Runs every identity check over all seeds and lambdas.
pub fn run_verify(cfg: &VerifyConfig) -> Result<VerifyReport> {
    cfg.validate()?;
    let spec = cfg.spec();
    let n = cfg.experts * cfg.d_hidden;
    let mut push = Tracker::new("push_through", 1e-9);
    let mut oracle = Tracker::new("woodbury_vs_global_oracle", 1e-9);
    let mut tucker = Tracker::new("tucker_full_rank_vs_woodbury", 1e-8);
    let mut sides = Tracker::new("core_solve_both_sides", 1e-10);
    let mut svd = Tracker::new("hosvd_vs_svd_reference", 1e-9);
    for &seed in &cfg.seeds {
        let layer = MoeLayer::synthesize(&spec, derive_seed(seed, 1))?;
        let batch = synthesize_batch(&layer, cfg.facts, derive_seed(seed, 2), 1.0, cfg.lambdas[0])?;
        let pres_inputs = sample_subspace_inputs(cfg.d_model, (cfg.d_model / 2).max(1), 32, derive_seed(seed, 3));
        let pres = PreservationSet::from_inputs(&layer, pres_inputs)?;
        let proj = build_projectors(&pres, crate::editors::DEFAULT_THRESHOLD)?;
        let full = hosvd(&layer.down_tensor(), [cfg.experts, cfg.d_model, cfg.d_hidden], &WhiteningConfig::none())?;
        let psi = random_matrix(n, cfg.facts, derive_seed(seed, 4));
        for &lambda in &cfg.lambdas {
            let (lhs, rhs) = push_through(&psi, lambda)?;
            push.record(rel_dev(&lhs, &rhs)?);

            let w = solve_woodbury(&batch, &layer, Some(&proj), lambda)?;
            let o = solve_global_oracle(&batch, &layer, Some(&proj), lambda)?;
            oracle.record(rel_dev(&w.flat(), &o.flat())?);

            let plain = solve_woodbury(&batch, &layer, None, lambda)?;
            let t = solve_tucker(&batch, &layer, &full, None, lambda)?;
            tucker.record(rel_dev(&t.flat(), &plain.flat())?);

            // one configuration per regime: T below and above r_e·r_in
            for ranks in [[cfg.experts, cfg.d_model, cfg.d_hidden], [1, (cfg.d_model / 2).max(1), 1]] {
                let f = hosvd(&layer.down_tensor(), ranks, &WhiteningConfig::none())?;
                let c = compress_batch(&batch, &layer, &f, Some(&proj))?;
                let a = solve_tucker_core_side(&c, lambda, CoreSide::Batch)?;
                let b = solve_tucker_core_side(&c, lambda, CoreSide::Feature)?;
                sides.record(rel_dev(&a.flat, &b.flat)?);
                // both sides must also reconstruct identically
                let da = reconstruct_delta(&a, &f, Some(&proj))?;
                let db = reconstruct_delta(&b, &f, Some(&proj))?;
                sides.record(rel_dev(&da.unfold(Mode::Two), &db.unfold(Mode::Two))?);
            }
        }
        let d = cfg.tensor_dims;
        let mut rng = seeded_rng(derive_seed(seed, 5));
        let w = Tensor3::from_vec(d, gaussian_vec(&mut rng, d.iter().product(), 1.0))?;
        let gram = fit_error(&w, &hosvd(&w, cfg.tensor_ranks, &WhiteningConfig::none())?)?;
        let reference = fit_error(&w, &svd_reference_factors(&w, cfg.tensor_ranks)?)?;
        svd.record((gram - reference).abs() / w.frobenius_norm());
    }
    let checks: Vec<CheckResult> = [push, oracle, tucker, sides, svd].into_iter().map(Tracker::finish).collect();
    let passed = checks.iter().all(|c| c.passed);
    Ok(VerifyReport { checks, passed })
}

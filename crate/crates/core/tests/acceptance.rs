//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero when any criterion fails.

use std::panic;
use std::time::{Duration, Instant};

use moe_edit::editors::{
    build_projectors, compress_batch, solve_bcd, solve_bcd_traced, solve_global_oracle, solve_tucker,
    solve_tucker_core_side, solve_woodbury, CoreSide, DesignProblem, NullSpaceProjectorSet, DEFAULT_THRESHOLD,
};
use moe_edit::harness::{generate, run_bench, run_edit, BenchGrid, BenchSize, GenerateConfig};
use moe_edit::linalg::{push_through, Matrix, Mode, Tensor3};
use moe_edit::moe::{
    moe_forward, sample_inputs, sample_subspace_inputs, synthesize_batch, Activation, EditBatch, LayerSpec, Layout,
    MoeLayer, PreservationSet,
};
use moe_edit::spread::{spread_coefficients, writeback, EditPlan, SolverKind, SpreadMode};
use moe_edit::tucker::{fit_error, hooi_refine_traced, hosvd, WhiteningConfig, WhiteningMode};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

type Verdict = Result<String, String>;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn gaussian(r: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| scale * r.sample::<f64, _>(StandardNormal))
}

fn na(m: &Matrix) -> DMatrix<f64> {
    DMatrix::from_row_slice(m.rows(), m.cols(), m.data())
}

fn from_na(m: &DMatrix<f64>) -> Matrix {
    Matrix::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)])
}

fn rel(a: &Matrix, b: &Matrix) -> f64 {
    let scale = a.frobenius_norm().max(b.frobenius_norm());
    let d = a.sub(b).expect("same shape").frobenius_norm();
    if scale == 0.0 {
        d
    } else {
        d / scale
    }
}

fn verdict(ok: bool, detail: String) -> Verdict {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn spec(e: usize, k: usize, dm: usize, dh: usize) -> LayerSpec {
    LayerSpec {
        experts: e,
        top_k: k,
        d_model: dm,
        d_hidden: dh,
        activation: Activation::Silu,
        layout: Layout::Standard,
    }
}

struct Instance {
    layer: MoeLayer,
    batch: EditBatch,
    projectors: NullSpaceProjectorSet,
}

fn instance(e: usize, k: usize, dm: usize, dh: usize, t: usize, lambda: f64, seed: u64) -> Instance {
    let layer = MoeLayer::synthesize(&spec(e, k, dm, dh), seed).unwrap();
    let batch = synthesize_batch(&layer, t, seed ^ 0xA5A5, 1.0, lambda).unwrap();
    let inputs = sample_subspace_inputs(dm, (dm / 2).max(1), 40, seed ^ 0x5A5A);
    let pres = PreservationSet::from_inputs(&layer, inputs).unwrap();
    let projectors = build_projectors(&pres, DEFAULT_THRESHOLD).unwrap();
    Instance {
        layer,
        batch,
        projectors,
    }
}

/// Design matrix and residuals assembled directly from the cached facts.
fn reference_design(inst: &Instance, projectors: Option<&NullSpaceProjectorSet>) -> (DMatrix<f64>, DMatrix<f64>) {
    let (e, dh, dm) = (inst.layer.num_experts(), inst.layer.d_hidden(), inst.layer.d_model());
    let t = inst.batch.len();
    let mut psi = DMatrix::zeros(e * dh, t);
    let mut r = DMatrix::zeros(dm, t);
    for (c, f) in inst.batch.facts.iter().enumerate() {
        for &j in &f.gating.selected {
            let key = na(&Matrix::from_vec(dh, 1, f.keys.row(j).to_vec()).unwrap());
            let projected = match projectors {
                Some(p) => na(p.matrix(j)) * key,
                None => key,
            };
            for i in 0..dh {
                psi[(j * dh + i, c)] = f.gating.weights[j] * projected[i];
            }
        }
        let out = moe_forward(&inst.layer, &f.x).unwrap();
        for i in 0..dm {
            r[(i, c)] = f.target_v[i] - out[i];
        }
    }
    (psi, r)
}

/// `Δ = RΨᵀ(ΨΨᵀ + λI)⁻¹` by LU on the full system.
fn reference_global(psi: &DMatrix<f64>, r: &DMatrix<f64>, lambda: f64) -> Matrix {
    let n = psi.nrows();
    let a = psi * psi.transpose() + DMatrix::identity(n, n) * lambda;
    let x = a.lu().solve(&(psi * r.transpose())).expect("nonsingular");
    from_na(&x.transpose())
}

fn push_through_identity() -> Verdict {
    let start = Instant::now();
    let lambdas = [1e-3, 0.1, 1.0, 10.0];
    let mut r = rng(101);
    let (mut worst_routes, mut worst_oracle) = (0.0f64, 0.0f64);
    for i in 0..200 {
        let n = r.random_range(1..=256);
        let t = r.random_range(1..=32);
        let lambda = lambdas[i % 4];
        let psi = gaussian(&mut r, n, t, 1.0 / (n as f64).sqrt());
        let (lhs, rhs) = push_through(&psi, lambda).unwrap();
        worst_routes = worst_routes.max(rel(&lhs, &rhs));
        let p = na(&psi);
        let small = p.transpose() * &p + DMatrix::identity(t, t) * lambda;
        let oracle = small.cholesky().expect("spd").solve(&p.transpose());
        worst_oracle = worst_oracle.max(rel(&lhs, &from_na(&oracle)));
    }
    let elapsed = start.elapsed();
    verdict(
        worst_routes < 1e-9 && worst_oracle < 1e-9 && elapsed < Duration::from_secs(10),
        format!("200 instances, route dev {worst_routes:.2e}, oracle dev {worst_oracle:.2e}, {elapsed:.2?}"),
    )
}

fn woodbury_matches_global_oracle() -> Verdict {
    let start = Instant::now();
    let mut r = rng(202);
    let (mut worst, mut worst_ref) = (0.0f64, 0.0f64);
    let mut sizes = Vec::new();
    for i in 0..50u64 {
        let e = [1, 2, 4, 8, 16, 32][r.random_range(0..6)];
        let dh = r.random_range(1..=(512 / e).min(64));
        let dm = r.random_range(2..=24);
        let k = r.random_range(1..=e.min(4));
        let t = r.random_range(1..=64);
        let lambda = 10f64.powf(r.random_range(-3.0..1.0));
        let inst = instance(e, k, dm, dh, t, lambda, 2000 + i);
        let proj = (i % 2 == 0).then_some(&inst.projectors);
        let w = solve_woodbury(&inst.batch, &inst.layer, proj, lambda).unwrap();
        let o = solve_global_oracle(&inst.batch, &inst.layer, proj, lambda).unwrap();
        worst = worst.max(rel(&w.flat(), &o.flat()));
        let (psi, res) = reference_design(&inst, proj);
        worst_ref = worst_ref.max(rel(&w.flat(), &reference_global(&psi, &res, lambda)));
        sizes.push(e * dh);
    }
    let elapsed = start.elapsed();
    verdict(
        worst < 1e-9 && worst_ref < 1e-9 && elapsed < Duration::from_secs(60),
        format!(
            "50 instances (E*d_hidden up to {}), oracle dev {worst:.2e}, reference dev {worst_ref:.2e}, {elapsed:.2?}",
            sizes.iter().max().unwrap()
        ),
    )
}

fn core_both_sides_agree() -> Verdict {
    let mut r = rng(303);
    let (mut worst, mut worst_ref) = (0.0f64, 0.0f64);
    let (mut below, mut above) = (0, 0);
    for i in 0..100u64 {
        let e = r.random_range(2..=8);
        let dm = r.random_range(3..=16);
        let dh = r.random_range(2..=12);
        let k = r.random_range(1..=e.min(3));
        let ranks = [r.random_range(1..=e), r.random_range(1..=dm), r.random_range(1..=dh)];
        let features = ranks[0] * ranks[2];
        let t = if i % 2 == 0 && features > 1 {
            r.random_range(1..features)
        } else {
            r.random_range(features + 1..=features + 24)
        };
        if t < features {
            below += 1;
        } else {
            above += 1;
        }
        let lambda = 10f64.powf(r.random_range(-3.0..1.0));
        let inst = instance(e, k, dm, dh, t, lambda, 3000 + i);
        let whitening = if i % 3 == 0 {
            WhiteningConfig::none()
        } else {
            let pres = PreservationSet::from_inputs(&inst.layer, sample_inputs(dm, 30, i)).unwrap();
            WhiteningConfig::from_preservation(WhiteningMode::Both, 1e-5, &inst.layer, &pres).unwrap()
        };
        let f = hosvd(&inst.layer.down_tensor(), ranks, &whitening).unwrap();
        let c = compress_batch(&inst.batch, &inst.layer, &f, Some(&inst.projectors)).unwrap();
        let a = solve_tucker_core_side(&c, lambda, CoreSide::Batch).unwrap();
        let b = solve_tucker_core_side(&c, lambda, CoreSide::Feature).unwrap();
        worst = worst.max(rel(&a.flat, &b.flat));
        let phi = na(&c.phi);
        let sys = phi.transpose() * &phi + DMatrix::identity(features, features) * lambda;
        let g = sys.lu().solve(&(phi.transpose() * na(&c.rtilde))).expect("nonsingular");
        worst_ref = worst_ref.max(rel(&a.flat, &from_na(&g.transpose())));
    }
    verdict(
        worst < 1e-10 && worst_ref < 1e-9 && below > 0 && above > 0,
        format!("100 instances ({below} with T < r_e*r_in, {above} above), side dev {worst:.2e}, reference dev {worst_ref:.2e}"),
    )
}

fn full_rank_tucker_matches_woodbury() -> Verdict {
    let mut r = rng(404);
    let mut worst = 0.0f64;
    for i in 0..30u64 {
        let e = r.random_range(1..=8);
        let dm = r.random_range(2..=16);
        let dh = r.random_range(1..=12);
        let k = r.random_range(1..=e.min(3));
        let t = r.random_range(1..=24);
        let lambda = 10f64.powf(r.random_range(-3.0..1.0));
        let inst = instance(e, k, dm, dh, t, lambda, 4000 + i);
        let f = hosvd(&inst.layer.down_tensor(), [e, dm, dh], &WhiteningConfig::none()).unwrap();
        let tk = solve_tucker(&inst.batch, &inst.layer, &f, None, lambda).unwrap();
        let wb = solve_woodbury(&inst.batch, &inst.layer, None, lambda).unwrap();
        worst = worst.max(rel(&tk.flat(), &wb.flat()));
    }
    verdict(worst < 1e-8, format!("30 instances, dev {worst:.2e}"))
}

/// `w ×₁ U₁U₁ᵀ ×₂ U₂U₂ᵀ ×₃ U₃U₃ᵀ` by explicit index loops.
fn project_tensor(w: &Tensor3, us: [&DMatrix<f64>; 3]) -> Tensor3 {
    let mut cur = w.clone();
    for (mode, u) in us.into_iter().enumerate() {
        let p = u * u.transpose();
        let d = cur.dims();
        let mut next = Tensor3::zeros(d[0], d[1], d[2]);
        for i in 0..d[0] {
            for j in 0..d[1] {
                for l in 0..d[2] {
                    let idx = [i, j, l];
                    let mut s = 0.0;
                    for a in 0..d[mode] {
                        let mut src = idx;
                        src[mode] = a;
                        s += p[(idx[mode], a)] * cur.get(src[0], src[1], src[2]);
                    }
                    next.set(i, j, l, s);
                }
            }
        }
        cur = next;
    }
    cur
}

fn hosvd_and_hooi() -> Verdict {
    let mut r = rng(505);
    let (mut worst_fit, mut worst_rise) = (0.0f64, 0.0f64);
    for _ in 0..20 {
        let dims = [r.random_range(2..=8), r.random_range(2..=10), r.random_range(2..=9)];
        let ranks = [r.random_range(1..=dims[0]), r.random_range(1..=dims[1]), r.random_range(1..=dims[2])];
        let data = (0..dims.iter().product::<usize>()).map(|_| r.sample::<f64, _>(StandardNormal)).collect();
        let w = Tensor3::from_vec(dims, data).unwrap();
        let f = hosvd(&w, ranks, &WhiteningConfig::none()).unwrap();
        let gram_err = fit_error(&w, &f).unwrap();
        let svd_factors: Vec<DMatrix<f64>> = Mode::ALL
            .iter()
            .map(|&m| {
                let svd = na(&w.unfold(m)).svd(true, false);
                let u = svd.u.expect("left vectors");
                let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
                order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
                DMatrix::from_fn(u.nrows(), ranks[m.index()], |i, c| u[(i, order[c])])
            })
            .collect();
        let approx = project_tensor(&w, [&svd_factors[0], &svd_factors[1], &svd_factors[2]]);
        let svd_err = w.sub(&approx).unwrap().frobenius_norm();
        worst_fit = worst_fit.max((gram_err - svd_err).abs() / w.frobenius_norm());

        let (_, trace) = hooi_refine_traced(&w, &f, 5, &WhiteningConfig::none()).unwrap();
        assert_eq!(trace.len(), 6);
        for pair in trace.windows(2) {
            worst_rise = worst_rise.max((pair[1] - pair[0]) / w.frobenius_norm());
        }
    }
    verdict(
        worst_fit < 1e-9 && worst_rise <= 1e-12,
        format!("20 tensors, fit dev vs SVD reference {worst_fit:.2e}, largest HOOI rise {worst_rise:.2e}"),
    )
}

fn null_space_guarantee() -> Verdict {
    let (e, k, dm, dh, t) = (6, 2, 16, 12, 8);
    let mut worst_ratio = 0.0f64;
    let mut min_gain = f64::INFINITY;
    for seed in 0..5u64 {
        let layer = MoeLayer::synthesize(&spec(e, k, dm, dh), 6000 + seed).unwrap();
        let batch = synthesize_batch(&layer, t, 6100 + seed, 1.0, 0.1).unwrap();
        let mut r = rng(6200 + seed);
        let keys: Vec<Matrix> = (0..e)
            .map(|_| {
                let basis = gaussian(&mut r, dh, 4, 1.0);
                basis.matmul(&gaussian(&mut r, 4, 60, 1.0)).unwrap()
            })
            .collect();
        let pres = PreservationSet { keys, inputs: vec![] };
        let proj = build_projectors(&pres, DEFAULT_THRESHOLD).unwrap();
        if (0..e).any(|j| proj.preserved_basis(j).cols() != 4) {
            return Err(format!("seed {seed}: preserved subspace is not 4-dimensional"));
        }
        let factors = hosvd(&layer.down_tensor(), [e, dm, dh], &WhiteningConfig::none()).unwrap();
        let solvers: [(&str, Box<dyn Fn(Option<&NullSpaceProjectorSet>) -> Tensor3>); 4] = [
            ("woodbury", Box::new(|p| solve_woodbury(&batch, &layer, p, 0.1).unwrap().delta)),
            ("global", Box::new(|p| solve_global_oracle(&batch, &layer, p, 0.1).unwrap().delta)),
            ("bcd", Box::new(|p| solve_bcd(&batch, &layer, p, 0.1, 3).unwrap().delta)),
            ("tucker", Box::new(|p| solve_tucker(&batch, &layer, &factors, p, 0.1).unwrap().delta)),
        ];
        for (name, solve) in &solvers {
            let on = solve(Some(&proj));
            let off = solve(None);
            let mut drift_on = 0.0;
            let mut drift_off = 0.0;
            for j in 0..e {
                let (w_on, w_off) = (on.slab(j), off.slab(j));
                let scale = w_on.frobenius_norm();
                let basis = proj.preserved_basis(j);
                for c in 0..basis.cols() {
                    let dir = basis.column(c);
                    let d = moe_edit::linalg::norm(&w_on.matvec(&dir).unwrap());
                    if scale > 0.0 {
                        worst_ratio = worst_ratio.max(d / scale);
                    } else if d > 0.0 {
                        return Err(format!("{name}: zero update with nonzero drift"));
                    }
                }
                for s in 0..pres.keys[j].cols() {
                    let key = pres.keys[j].column(s);
                    let kn = moe_edit::linalg::norm(&key);
                    drift_on += moe_edit::linalg::norm(&w_on.matvec(&key).unwrap()) / kn;
                    drift_off += moe_edit::linalg::norm(&w_off.matvec(&key).unwrap()) / kn;
                }
            }
            min_gain = min_gain.min(drift_off / drift_on.max(f64::MIN_POSITIVE));
        }
    }
    verdict(
        worst_ratio < 1e-8 && min_gain >= 10.0,
        format!("5 seeds x 4 solvers, max drift/||dW|| {worst_ratio:.2e}, min off/on drift ratio {min_gain:.2e}"),
    )
}

fn interpolation_regime() -> Verdict {
    let mut worst_eff = 1.0f64;
    let mut worst_ratio = 0.0f64;
    for seed in 0..10u64 {
        let mut cfg = GenerateConfig {
            seed: 7000 + seed,
            ..GenerateConfig::default()
        };
        // the residual ratio scales as λ/σ_min(Φ)², so keys need d_hidden well above T
        cfg.model.d_hidden = 32;
        cfg.batch.lambda = 1e-6;
        let mut g = generate(&cfg).unwrap();
        let m = &cfg.model;
        let mut plan = EditPlan::new(vec![0], SolverKind::Tucker, SpreadMode::ResidualSpread, 1e-6);
        plan.ranks = Some([m.experts, m.d_model, m.d_hidden]);
        assert!(cfg.batch.facts <= m.d_model);
        let report = run_edit(&plan, &mut g).unwrap();
        worst_eff = worst_eff.min(report.metrics.efficacy_analogue);
        worst_ratio = worst_ratio.max(report.metrics.mean_residual_ratio);
    }
    verdict(
        worst_eff == 1.0 && worst_ratio < 1e-6,
        format!("10 seeds, min efficacy_analogue {worst_eff}, max mean residual ratio {worst_ratio:.2e}"),
    )
}

fn speedup_structure() -> Verdict {
    let start = Instant::now();
    let grid = BenchGrid {
        seed: 8,
        repetitions: 5,
        d_model: 64,
        top_k: 4,
        layers: 5,
        lambda: 0.1,
        null_space: true,
        ranks: None,
        solvers: vec![SolverKind::Tucker, SolverKind::Woodbury],
        modes: SpreadMode::ALL.to_vec(),
        sizes: vec![BenchSize {
            experts: 32,
            d_hidden: 64,
            t: 50,
        }],
    };
    let rows = run_bench(&grid).unwrap();
    let find = |s: SolverKind, m: SpreadMode| rows.iter().find(|r| r.solver == s && r.spread_mode == m).unwrap();
    let calls_ok = rows.iter().all(|r| match r.spread_mode {
        SpreadMode::UpdateSpread => r.solver_calls == 1,
        SpreadMode::ResidualSpread => r.solver_calls == 5,
    });
    let ratio = |s| {
        find(s, SpreadMode::ResidualSpread).median_solve_ns as f64 / find(s, SpreadMode::UpdateSpread).median_solve_ns as f64
    };
    let (tucker, woodbury) = (ratio(SolverKind::Tucker), ratio(SolverKind::Woodbury));
    let elapsed = start.elapsed();
    verdict(
        calls_ok && tucker >= 3.0 && elapsed < Duration::from_secs(300),
        format!("calls 1 vs 5: {calls_ok}, tucker solve ratio {tucker:.2}x (woodbury {woodbury:.2}x), {elapsed:.2?}"),
    )
}

fn bcd_sanity() -> Verdict {
    let mut r = rng(909);
    let mut worst_rise = 0.0f64;
    for i in 0..20u64 {
        let e = r.random_range(2..=8);
        let k = r.random_range(1..=e.min(3));
        let inst = instance(e, k, r.random_range(3..=12), r.random_range(2..=10), r.random_range(2..=20), 0.1, 9000 + i);
        let problem = DesignProblem::build(&inst.batch, &inst.layer, Some(&inst.projectors)).unwrap();
        let dh = inst.layer.d_hidden();
        let active = (0..e).filter(|j| problem.psi.rows_range(j * dh, (j + 1) * dh).max_abs() > 0.0).count();
        let (_, trace) = solve_bcd_traced(&problem, 0.1, 3).unwrap();
        assert_eq!(trace.objective.len(), 1 + 3 * active);
        for pair in trace.objective.windows(2) {
            worst_rise = worst_rise.max((pair[1] - pair[0]) / trace.objective[0]);
        }
    }
    let mut worst_disjoint = 0.0f64;
    for i in 0..10u64 {
        let e = 2 + (i as usize % 6);
        let inst = instance(e, 1, 10, 6, 12, 0.05, 9500 + i);
        assert!(inst.batch.facts.iter().all(|f| f.gating.selected.len() == 1));
        let bcd = solve_bcd(&inst.batch, &inst.layer, Some(&inst.projectors), 0.05, 1).unwrap();
        let global = solve_global_oracle(&inst.batch, &inst.layer, Some(&inst.projectors), 0.05).unwrap();
        worst_disjoint = worst_disjoint.max(rel(&bcd.flat(), &global.flat()));
    }
    verdict(
        worst_rise <= 1e-12 && worst_disjoint < 1e-10,
        format!("20 traced instances, largest block rise {worst_rise:.2e}; 10 disjoint-routing instances, one-sweep dev {worst_disjoint:.2e}"),
    )
}

fn spread_schedule() -> Verdict {
    let mut sets: Vec<Vec<usize>> = vec![(3..=7).collect(), (3..=5).collect(), (3..=6).collect(), vec![0], vec![1, 4, 9]];
    let mut r = rng(1010);
    for _ in 0..50 {
        let mut s: Vec<usize> = (0..40).filter(|_| r.random_bool(0.3)).collect();
        if s.is_empty() {
            s.push(r.random_range(0..40));
        }
        sets.push(s);
    }
    for s in &sets {
        let last = *s.last().unwrap();
        let got = spread_coefficients(s).unwrap();
        let want: Vec<f64> = s.iter().map(|&l| 1.0 / (last - l + 1) as f64).collect();
        if got != want {
            return Err(format!("layers {s:?}: got {got:?}, want {want:?}"));
        }
    }
    let appendix: Vec<f64> = spread_coefficients(&[3, 4, 5, 6, 7]).unwrap();
    verdict(
        appendix == [0.2, 0.25, 1.0 / 3.0, 0.5, 1.0],
        format!("{} layer sets exact, 3..7 -> {appendix:?}", sets.len()),
    )
}

fn layout_equivalence() -> Verdict {
    let mut r = rng(1111);
    let mut worst = 0.0f64;
    for i in 0..20u64 {
        let e = r.random_range(1..=8);
        let k = r.random_range(1..=e);
        let (dm, dh) = (r.random_range(2..=16), r.random_range(1..=12));
        let inst = instance(e, k, dm, dh, r.random_range(1..=10), 0.1, 11000 + i);
        let packed = inst.layer.to_layout(Layout::TransposedPacked);
        if packed.stored_down_weights().dims() != [e, dh, dm] {
            return Err("packed layout does not transpose the stored slabs".into());
        }
        let delta = solve_woodbury(&inst.batch, &inst.layer, Some(&inst.projectors), 0.1).unwrap();
        let a = writeback(&inst.layer, &delta).unwrap();
        let b = writeback(&packed, &delta).unwrap();
        for x in sample_inputs(dm, 20, i) {
            let (ya, yb) = (moe_forward(&a, &x).unwrap(), moe_forward(&b, &x).unwrap());
            for (p, q) in ya.iter().zip(&yb) {
                worst = worst.max((p - q).abs());
            }
        }
    }
    verdict(worst < 1e-12, format!("20 layers x 20 inputs, max output difference {worst:.2e}"))
}

fn main() {
    let criteria: [(&str, fn() -> Verdict); 11] = [
        ("push-through identity", push_through_identity),
        ("woodbury equals global oracle", woodbury_matches_global_oracle),
        ("tucker core both-side agreement", core_both_sides_agree),
        ("full-rank tucker equals woodbury", full_rank_tucker_matches_woodbury),
        ("hosvd reference and hooi monotonicity", hosvd_and_hooi),
        ("null-space guarantee", null_space_guarantee),
        ("interpolation regime", interpolation_regime),
        ("update-spread speedup structure", speedup_structure),
        ("bcd sanity", bcd_sanity),
        ("spread coefficients", spread_schedule),
        ("layout equivalence", layout_equivalence),
    ];
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = panic::catch_unwind(run).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let (tag, detail) = match outcome {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!("acceptance {:>2} {tag} {name}: {detail} [{:.2?}]", i + 1, start.elapsed());
    }
    println!("acceptance summary: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}

use crate::error::{ensure, Error, Result};
use crate::linalg::{Cholesky, Matrix, Tensor3};
use crate::moe::{residual_matrix, EditBatch, MoeLayer};
use crate::timing::PhaseTimings;
use crate::tucker::{CoreTensor, TuckerFactors};

use super::{LayerDelta, NullSpaceProjectorSet, SolverReport};

/// Batch expressed in core coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct CompressedBatch {
    /// `Φ ∈ ℝ^{T × r_e·r_in}`; row `t` is `[φ_{t,1}; …; φ_{t,r_e}]`.
    pub phi: Matrix,
    /// `R̃ ∈ ℝ^{T × r_out}`; row `t` is `U_outᵀ r_t`.
    pub rtilde: Matrix,
    pub ranks: [usize; 3],
}

impl CompressedBatch {
    pub fn t(&self) -> usize {
        self.phi.rows()
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self {
            rtilde: self.rtilde.scale(c),
            ..self.clone()
        }
    }
}

pub fn compress_batch(
    batch: &EditBatch,
    layer: &MoeLayer,
    factors: &TuckerFactors,
    projectors: Option<&NullSpaceProjectorSet>,
) -> Result<CompressedBatch> {
    let residuals = residual_matrix(layer, batch)?;
    compress_with_residuals(batch, factors, projectors, &residuals)
}

/// `c_{t,j} = U_inᵀ P_j k_{t,j}`, `φ_{t,a} = Σ_j g_{t,j} U_e[j,a] c_{t,j}`,
/// `r̃_t = Qᵀ r_t` with `Q` the orthonormal output basis, for caller-supplied residuals (`d_model × T`).
pub fn compress_with_residuals(
    batch: &EditBatch,
    factors: &TuckerFactors,
    projectors: Option<&NullSpaceProjectorSet>,
    residuals: &Matrix,
) -> Result<CompressedBatch> {
    let [e, dm, dh] = factors.dims();
    let [re, ro, ri] = factors.ranks();
    let t = batch.len();
    ensure(residuals.shape() == (dm, t), || {
        format!("residuals {:?}, expected {dm}x{t}", residuals.shape())
    })?;
    if let Some(p) = projectors {
        ensure(p.num_experts() == e && p.dim() == dh, || {
            format!("projectors for {}x{}, factors need {e}x{dh}", p.num_experts(), p.dim())
        })?;
    }
    let in_t = factors.input.transpose();
    let mut phi = Matrix::zeros(t, re * ri);
    for (row, fact) in batch.facts.iter().enumerate() {
        ensure(fact.keys.shape() == (e, dh), || {
            format!("fact {row} keys {:?}, factors need {e}x{dh}", fact.keys.shape())
        })?;
        let out = phi.row_mut(row);
        for &j in &fact.gating.selected {
            let key = match projectors {
                Some(p) => p.project(j, fact.keys.row(j)),
                None => fact.keys.row(j).to_vec(),
            };
            let c = in_t.matvec(&key)?;
            let g = fact.gating.weights[j];
            for a in 0..re {
                let w = g * factors.expert[(j, a)];
                if w == 0.0 {
                    continue;
                }
                for (dst, v) in out[a * ri..(a + 1) * ri].iter_mut().zip(&c) {
                    *dst += w * v;
                }
            }
        }
    }
    let rtilde = residuals.tr_matmul(&factors.output_basis()?)?;
    debug_assert_eq!(rtilde.shape(), (t, ro));
    Ok(CompressedBatch {
        phi,
        rtilde,
        ranks: [re, ro, ri],
    })
}

/// Which Gram matrix the core solve factors.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CoreSide {
    /// `G = R̃ᵀ(ΦΦᵀ + λI_T)⁻¹Φ`.
    Batch,
    /// `G = R̃ᵀΦ(ΦᵀΦ + λI)⁻¹`.
    Feature,
}

impl CoreSide {
    /// The smaller system; ties go to the batch side.
    pub fn smaller(t: usize, features: usize) -> Self {
        if t <= features {
            CoreSide::Batch
        } else {
            CoreSide::Feature
        }
    }
}

/// Ridge solve for `G_flat`, on whichever side has the smaller inverse.
pub fn solve_tucker_core(c: &CompressedBatch, lambda: f64) -> Result<CoreTensor> {
    solve_tucker_core_side(c, lambda, CoreSide::smaller(c.t(), c.phi.cols()))
}

pub fn solve_tucker_core_side(c: &CompressedBatch, lambda: f64, side: CoreSide) -> Result<CoreTensor> {
    if !(lambda > 0.0) {
        return Err(Error::Config(format!("lambda must be positive, got {lambda}")));
    }
    let flat = match side {
        CoreSide::Batch => {
            let k = c.phi.gram().add_diagonal(lambda);
            // (ΦΦᵀ+λI) Y = R̃, G = Yᵀ Φ
            let y = Cholesky::factor(&k)?.solve(&c.rtilde)?;
            y.tr_matmul(&c.phi)?
        }
        CoreSide::Feature => {
            let k = c.phi.tr_matmul(&c.phi)?.add_diagonal(lambda);
            // (ΦᵀΦ+λI) Gᵀ = ΦᵀR̃
            let rhs = c.phi.tr_matmul(&c.rtilde)?;
            Cholesky::factor(&k)?.solve(&rhs)?.transpose()
        }
    };
    if !flat.is_finite() {
        return Err(Error::NonFinite("core solve"));
    }
    CoreTensor::from_flat(flat, c.ranks)
}

/// Slab `j` is `Q (Σ_a U_e[j,a] G_a) U_inᵀ P_j`, `Q` the orthonormal output basis.
pub fn reconstruct_delta(
    core: &CoreTensor,
    factors: &TuckerFactors,
    projectors: Option<&NullSpaceProjectorSet>,
) -> Result<Tensor3> {
    ensure(core.ranks() == factors.ranks(), || {
        format!("core ranks {:?}, factors {:?}", core.ranks(), factors.ranks())
    })?;
    let [e, dm, dh] = factors.dims();
    let [re, ro, ri] = factors.ranks();
    let slabs: Vec<Matrix> = (0..re).map(|a| core.g.slab(a)).collect();
    let in_t = factors.input.transpose();
    let out = factors.output_basis()?;
    let mut delta = Tensor3::zeros(e, dm, dh);
    for j in 0..e {
        let mut mixed = Matrix::zeros(ro, ri);
        for (a, g) in slabs.iter().enumerate() {
            let w = factors.expert[(j, a)];
            if w != 0.0 {
                mixed.add_assign(&g.scale(w))?;
            }
        }
        let mut slab = out.matmul(&mixed)?.matmul(&in_t)?;
        if let Some(p) = projectors {
            slab = slab.matmul(p.matrix(j))?;
        }
        delta.set_slab(j, &slab)?;
    }
    Ok(delta)
}

/// Compress, solve the core, and reconstruct.
pub fn solve_tucker(
    batch: &EditBatch,
    layer: &MoeLayer,
    factors: &TuckerFactors,
    projectors: Option<&NullSpaceProjectorSet>,
    lambda: f64,
) -> Result<LayerDelta> {
    let residuals = residual_matrix(layer, batch)?;
    solve_tucker_with_residuals(batch, factors, projectors, &residuals, lambda)
}

pub fn solve_tucker_with_residuals(
    batch: &EditBatch,
    factors: &TuckerFactors,
    projectors: Option<&NullSpaceProjectorSet>,
    residuals: &Matrix,
    lambda: f64,
) -> Result<LayerDelta> {
    let mut phases = PhaseTimings::default();
    let c = phases.time("compress", || compress_with_residuals(batch, factors, projectors, residuals))?;
    let core = phases.time("core_solve", || solve_tucker_core(&c, lambda))?;
    let delta = phases.time("reconstruct", || reconstruct_delta(&core, factors, projectors))?;
    let [e, _, dh] = factors.dims();
    Ok(LayerDelta {
        delta,
        report: SolverReport {
            solver: "tucker".into(),
            t: batch.len(),
            experts: e,
            d_hidden: dh,
            ranks: Some(factors.ranks()),
            lambda,
            phases,
            objective_before: None,
            objective_after: None,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::moe::{gaussian_vec, seeded_rng, synthesize_batch, Activation, LayerSpec, Layout};
    use crate::tucker::{hosvd, WhiteningConfig};

    fn layer(e: usize, dm: usize, dh: usize) -> MoeLayer {
        let spec = LayerSpec {
            experts: e,
            top_k: 2,
            d_model: dm,
            d_hidden: dh,
            activation: Activation::Silu,
            layout: Layout::Standard,
        };
        MoeLayer::synthesize(&spec, 17).unwrap()
    }

    fn random_compressed(t: usize, ranks: [usize; 3], seed: u64) -> CompressedBatch {
        let mut rng = seeded_rng(seed);
        let f = ranks[0] * ranks[2];
        CompressedBatch {
            phi: Matrix::from_vec(t, f, gaussian_vec(&mut rng, t * f, 1.0)).unwrap(),
            rtilde: Matrix::from_vec(t, ranks[1], gaussian_vec(&mut rng, t * ranks[1], 1.0)).unwrap(),
            ranks,
        }
    }

    #[test]
    fn identity_factors_reproduce_design() {
        let l = layer(3, 4, 5);
        let batch = synthesize_batch(&l, 4, 1, 1.0, 0.1).unwrap();
        let f = TuckerFactors::identity(3, 4, 5);
        let c = compress_batch(&batch, &l, &f, None).unwrap();
        let psi = crate::moe::design_matrix(&batch, None).unwrap();
        assert!(c.phi.sub(&psi.transpose()).unwrap().max_abs() < 1e-15);
    }

    #[test]
    fn recoloured_output_factor_still_fits_residuals() {
        use crate::moe::{residual_matrix, sample_inputs, PreservationSet};
        use crate::tucker::WhiteningMode;
        let l = layer(3, 6, 8);
        let batch = synthesize_batch(&l, 3, 2, 1.0, 1e-9).unwrap();
        let pres = PreservationSet::from_inputs(&l, sample_inputs(6, 40, 3)).unwrap();
        let cfg = WhiteningConfig::from_preservation(WhiteningMode::Both, 1e-5, &l, &pres).unwrap();
        let f = hosvd(&l.down_tensor(), [3, 6, 8], &cfg).unwrap();
        assert!(f.output.orthonormality_defect() > 1e-6);
        let d = solve_tucker(&batch, &l, &f, None, 1e-9).unwrap();
        let before = residual_matrix(&l, &batch).unwrap();
        let psi = crate::moe::design_matrix(&batch, None).unwrap();
        let after = before.sub(&d.flat().matmul(&psi).unwrap()).unwrap();
        assert!(after.frobenius_norm() < 1e-5 * before.frobenius_norm());
    }

    #[test]
    fn phi_matches_double_loop() {
        let l = layer(4, 6, 5);
        let batch = synthesize_batch(&l, 3, 2, 1.0, 0.1).unwrap();
        let f = hosvd(&l.down_tensor(), [2, 3, 3], &WhiteningConfig::none()).unwrap();
        let c = compress_batch(&batch, &l, &f, None).unwrap();
        for (t, fact) in batch.facts.iter().enumerate() {
            for a in 0..2 {
                for ci in 0..3 {
                    let mut s = 0.0;
                    for j in 0..4 {
                        let g = fact.gating.weights[j];
                        for h in 0..5 {
                            s += g * f.expert[(j, a)] * f.input[(h, ci)] * fact.keys[(j, h)];
                        }
                    }
                    assert!((c.phi[(t, a * 3 + ci)] - s).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn residual_outside_output_range_is_dropped() {
        let l = layer(2, 4, 3);
        let batch = synthesize_batch(&l, 1, 3, 1.0, 0.1).unwrap();
        let mut f = TuckerFactors::identity(2, 4, 3);
        f.output = Matrix::from_fn(4, 2, |i, j| if i == j { 1.0 } else { 0.0 });
        let r = Matrix::from_vec(4, 1, vec![0.0, 0.0, 1.0, -2.0]).unwrap();
        let c = compress_with_residuals(&batch, &f, None, &r).unwrap();
        assert_eq!(c.rtilde.max_abs(), 0.0);
    }

    #[test]
    fn core_solve_sides_agree() {
        for (t, seed) in [(6, 1), (12, 2), (20, 3)] {
            let c = random_compressed(t, [3, 4, 4], seed);
            let a = solve_tucker_core_side(&c, 0.7, CoreSide::Batch).unwrap();
            let b = solve_tucker_core_side(&c, 0.7, CoreSide::Feature).unwrap();
            let dev = a.flat.sub(&b.flat).unwrap().frobenius_norm() / b.flat.frobenius_norm();
            assert!(dev < 1e-10, "{t}: {dev}");
        }
        assert_eq!(CoreSide::smaller(12, 12), CoreSide::Batch);
        assert_eq!(CoreSide::smaller(13, 12), CoreSide::Feature);
    }

    #[test]
    fn single_fact_core_closed_form() {
        let c = random_compressed(1, [2, 3, 2], 9);
        let lambda = 0.4;
        let g = solve_tucker_core(&c, lambda).unwrap();
        let phi = c.phi.row(0);
        let n2: f64 = phi.iter().map(|v| v * v).sum();
        for o in 0..3 {
            for k in 0..4 {
                let expected = c.rtilde[(0, o)] * phi[k] / (n2 + lambda);
                assert!((g.flat[(o, k)] - expected).abs() < 1e-13);
            }
        }
        let zero = solve_tucker_core(&c.scaled(0.0), lambda).unwrap();
        assert_eq!(zero.flat.max_abs(), 0.0);
    }

    #[test]
    fn shared_expert_direction() {
        let e = 4;
        let mut f = TuckerFactors::identity(e, 3, 2);
        f.expert = Matrix::from_fn(e, 1, |_, _| 0.5);
        let core = CoreTensor::from_tensor(Tensor3::from_fn([1, 3, 2], |_, o, c| (o + 2 * c) as f64 + 1.0));
        let d = reconstruct_delta(&core, &f, None).unwrap();
        let expected = core.g.slab(0).scale(0.5);
        for j in 0..e {
            assert_eq!(d.slab(j), expected);
        }
    }

    #[test]
    fn reconstruction_matches_sum_oracle() {
        let l = layer(4, 6, 5);
        let f = hosvd(&l.down_tensor(), [2, 3, 3], &WhiteningConfig::none()).unwrap();
        let core = compute_random_core(&f, 5);
        let d = reconstruct_delta(&core, &f, None).unwrap();
        for j in 0..4 {
            for o in 0..6 {
                for h in 0..5 {
                    let mut s = 0.0;
                    for a in 0..2 {
                        for p in 0..3 {
                            for q in 0..3 {
                                s += f.expert[(j, a)] * f.output[(o, p)] * core.g.get(a, p, q) * f.input[(h, q)];
                            }
                        }
                    }
                    assert!((d.get(j, o, h) - s).abs() < 1e-12);
                }
            }
        }
    }

    fn compute_random_core(f: &TuckerFactors, seed: u64) -> CoreTensor {
        let mut rng = seeded_rng(seed);
        let r = f.ranks();
        CoreTensor::from_tensor(Tensor3::from_vec(r, gaussian_vec(&mut rng, r.iter().product(), 1.0)).unwrap())
    }
}

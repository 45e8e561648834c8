//! Fixed Tucker factors of the stacked down-projection tensor.
//!
//! Factors come from HOSVD computed with the Gram trick (top eigenvectors of
//! `Ŵ_(n) Ŵ_(n)ᵀ`), optionally refined by HOOI sweeps. With whitening enabled
//! the tensor is first multiplied along the hidden and/or output modes by the
//! symmetric square root of the regularised activation covariance, and the
//! recovered factors are mapped back to raw space by the inverse root. Raw-space
//! factors are then orthonormal in the metric `Σ + εI` rather than the
//! Euclidean one.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::linalg::{canonicalize_column_signs, sym_sqrt_and_inverse, top_eig_sym, Matrix, Mode, Tensor3};
use crate::moe::{moe_forward, MoeLayer, PreservationSet};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WhiteningMode {
    None,
    #[default]
    In,
    Out,
    Both,
}

impl WhiteningMode {
    pub fn whitens_in(self) -> bool {
        matches!(self, WhiteningMode::In | WhiteningMode::Both)
    }

    pub fn whitens_out(self) -> bool {
        matches!(self, WhiteningMode::Out | WhiteningMode::Both)
    }

    pub fn name(self) -> &'static str {
        match self {
            WhiteningMode::None => "none",
            WhiteningMode::In => "in",
            WhiteningMode::Out => "out",
            WhiteningMode::Both => "both",
        }
    }
}

impl std::str::FromStr for WhiteningMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(WhiteningMode::None),
            "in" => Ok(WhiteningMode::In),
            "out" => Ok(WhiteningMode::Out),
            "both" => Ok(WhiteningMode::Both),
            _ => Err(Error::Config(format!("unknown whitening mode '{s}'"))),
        }
    }
}

pub const DEFAULT_WHITENING_EPSILON: f64 = 1e-5;
pub const DEFAULT_HOOI_SWEEPS: usize = 2;

#[derive(Clone, Debug, PartialEq)]
pub struct WhiteningConfig {
    pub mode: WhiteningMode,
    pub epsilon: f64,
    /// `Σ_in`, `d_hidden × d_hidden`.
    pub cov_in: Option<Matrix>,
    /// `Σ_out`, `d_model × d_model`.
    pub cov_out: Option<Matrix>,
}

impl WhiteningConfig {
    pub fn none() -> Self {
        Self {
            mode: WhiteningMode::None,
            epsilon: DEFAULT_WHITENING_EPSILON,
            cov_in: None,
            cov_out: None,
        }
    }

    /// Estimates the mode covariances from a layer's preservation data:
    /// `Σ_in` averages the per-expert key second moments, `Σ_out` is the
    /// second moment of the layer outputs on the preservation inputs.
    pub fn from_preservation(
        mode: WhiteningMode,
        epsilon: f64,
        layer: &MoeLayer,
        pres: &PreservationSet,
    ) -> Result<Self> {
        let cov_in = mode
            .whitens_in()
            .then(|| pres.mean_key_covariance(layer.d_hidden()));
        let cov_out = if mode.whitens_out() {
            let dm = layer.d_model();
            let mut acc = Matrix::zeros(dm, dm);
            for x in &pres.inputs {
                let v = moe_forward(layer, x)?;
                for i in 0..dm {
                    for j in 0..dm {
                        acc[(i, j)] += v[i] * v[j];
                    }
                }
            }
            Some(acc.scale(1.0 / pres.inputs.len().max(1) as f64))
        } else {
            None
        };
        Ok(Self {
            mode,
            epsilon,
            cov_in,
            cov_out,
        })
    }
}

/// Whitening roots and their inverses; identity on modes that are not whitened.
#[derive(Clone, Debug, PartialEq)]
pub struct Whitener {
    pub whiten_in: Matrix,
    pub recolor_in: Matrix,
    pub whiten_out: Matrix,
    pub recolor_out: Matrix,
}

impl Whitener {
    pub fn new(cfg: &WhiteningConfig, d_model: usize, d_hidden: usize) -> Result<Self> {
        if !(cfg.epsilon > 0.0) {
            return Err(Error::Config(format!(
                "whitening epsilon must be positive, got {}",
                cfg.epsilon
            )));
        }
        let (whiten_in, recolor_in) = if cfg.mode.whitens_in() {
            let cov = cfg
                .cov_in
                .as_ref()
                .ok_or_else(|| Error::Config("in-whitening needs an input covariance".into()))?;
            ensure(cov.shape() == (d_hidden, d_hidden), || {
                format!("input covariance {:?}, expected {d_hidden}x{d_hidden}", cov.shape())
            })?;
            sym_sqrt_and_inverse(cov, cfg.epsilon)?
        } else {
            (Matrix::identity(d_hidden), Matrix::identity(d_hidden))
        };
        let (whiten_out, recolor_out) = if cfg.mode.whitens_out() {
            let cov = cfg
                .cov_out
                .as_ref()
                .ok_or_else(|| Error::Config("out-whitening needs an output covariance".into()))?;
            ensure(cov.shape() == (d_model, d_model), || {
                format!("output covariance {:?}, expected {d_model}x{d_model}", cov.shape())
            })?;
            sym_sqrt_and_inverse(cov, cfg.epsilon)?
        } else {
            (Matrix::identity(d_model), Matrix::identity(d_model))
        };
        Ok(Self {
            whiten_in,
            recolor_in,
            whiten_out,
            recolor_out,
        })
    }

    pub fn whiten(&self, w: &Tensor3) -> Result<Tensor3> {
        // roots are symmetric, so ×ₙ Sᵀ = ×ₙ S
        w.mode_product(&self.whiten_out, Mode::Two)?
            .mode_product(&self.whiten_in, Mode::Three)
    }

    pub fn recolor(&self, w: &Tensor3) -> Result<Tensor3> {
        w.mode_product(&self.recolor_out, Mode::Two)?
            .mode_product(&self.recolor_in, Mode::Three)
    }
}

/// Returns the whitened tensor with the re-colouring matrices for the hidden
/// and output modes.
pub fn whiten_tensor(w: &Tensor3, cfg: &WhiteningConfig) -> Result<(Tensor3, Matrix, Matrix)> {
    let [_, dm, dh] = w.dims();
    let wh = Whitener::new(cfg, dm, dh)?;
    Ok((wh.whiten(w)?, wh.recolor_in, wh.recolor_out))
}

#[derive(Clone, Debug, PartialEq)]
pub struct TuckerFactors {
    /// `U_e`, `E × r_e`.
    pub expert: Matrix,
    /// `U_out`, `d_model × r_out`.
    pub output: Matrix,
    /// `U_in`, `d_hidden × r_in`.
    pub input: Matrix,
    pub whitening: WhiteningMode,
    pub epsilon: f64,
}

impl TuckerFactors {
    /// Orthonormal basis of `span(U_out)`. The compressed objective measures
    /// residuals through `U_outᵀ`, which is exact only for orthonormal columns;
    /// re-coloured output factors are not.
    pub fn output_basis(&self) -> Result<Matrix> {
        if self.output.orthonormality_defect() <= 1e-10 {
            Ok(self.output.clone())
        } else {
            self.output.orthonormal_columns()
        }
    }

    pub fn ranks(&self) -> [usize; 3] {
        [self.expert.cols(), self.output.cols(), self.input.cols()]
    }

    pub fn dims(&self) -> [usize; 3] {
        [self.expert.rows(), self.output.rows(), self.input.rows()]
    }

    /// Identity factors at full rank; the Tucker parameterisation is then a
    /// plain change of basis.
    pub fn identity(experts: usize, d_model: usize, d_hidden: usize) -> Self {
        Self {
            expert: Matrix::identity(experts),
            output: Matrix::identity(d_model),
            input: Matrix::identity(d_hidden),
            whitening: WhiteningMode::None,
            epsilon: DEFAULT_WHITENING_EPSILON,
        }
    }

    pub fn by_mode(&self, mode: Mode) -> &Matrix {
        match mode {
            Mode::One => &self.expert,
            Mode::Two => &self.output,
            Mode::Three => &self.input,
        }
    }
}

/// Default ranks: `(min(E, 8), d_model / 2, d_hidden / 2)`, each at least 1.
pub fn default_ranks(experts: usize, d_model: usize, d_hidden: usize) -> [usize; 3] {
    [experts.min(8), (d_model / 2).max(1), (d_hidden / 2).max(1)]
}

fn check_ranks(dims: [usize; 3], ranks: [usize; 3]) -> Result<()> {
    for (r, d) in ranks.iter().zip(dims) {
        if *r == 0 || *r > d {
            return Err(Error::RankOutOfRange { rank: *r, max: d });
        }
    }
    Ok(())
}

fn gram_factor(t: &Tensor3, mode: Mode, rank: usize) -> Result<Matrix> {
    let unf = t.unfold(mode);
    let mut u = top_eig_sym(&unf.gram(), rank)?.vectors;
    canonicalize_column_signs(&mut u);
    Ok(u)
}

pub fn hosvd(w: &Tensor3, ranks: [usize; 3], whitening: &WhiteningConfig) -> Result<TuckerFactors> {
    check_ranks(w.dims(), ranks)?;
    let [_, dm, dh] = w.dims();
    let wh = Whitener::new(whitening, dm, dh)?;
    let white = wh.whiten(w)?;
    let u: Vec<Matrix> = Mode::ALL
        .iter()
        .zip(ranks)
        .map(|(m, r)| gram_factor(&white, *m, r))
        .collect::<Result<_>>()?;
    Ok(TuckerFactors {
        expert: u[0].clone(),
        output: wh.recolor_out.matmul(&u[1])?,
        input: wh.recolor_in.matmul(&u[2])?,
        whitening: whitening.mode,
        epsilon: whitening.epsilon,
    })
}

/// HOOI sweeps starting from `factors`. Each sweep updates every mode from the
/// top eigenvectors of the Gram matrix of the tensor contracted with the other
/// two factors. Fit is measured in the whitened geometry.
pub fn hooi_refine(
    w: &Tensor3,
    factors: &TuckerFactors,
    sweeps: usize,
    whitening: &WhiteningConfig,
) -> Result<TuckerFactors> {
    Ok(hooi_refine_traced(w, factors, sweeps, whitening)?.0)
}

/// As [`hooi_refine`], also returning the fit error before the first sweep
/// and after each sweep.
pub fn hooi_refine_traced(
    w: &Tensor3,
    factors: &TuckerFactors,
    sweeps: usize,
    whitening: &WhiteningConfig,
) -> Result<(TuckerFactors, Vec<f64>)> {
    ensure(factors.dims() == w.dims(), || {
        format!("factor dims {:?} do not match tensor {:?}", factors.dims(), w.dims())
    })?;
    let [_, dm, dh] = w.dims();
    let wh = Whitener::new(whitening, dm, dh)?;
    let white = wh.whiten(w)?;
    let mut u = [
        factors.expert.clone(),
        wh.whiten_out.matmul(&factors.output)?,
        wh.whiten_in.matmul(&factors.input)?,
    ];
    let ranks = factors.ranks();
    let mut trace = vec![orthonormal_fit_error(&white, &u)?];
    for _ in 0..sweeps {
        for mode in Mode::ALL {
            let mut y = white.clone();
            for other in Mode::ALL.iter().filter(|m| **m != mode) {
                y = y.mode_product(&u[other.index()].transpose(), *other)?;
            }
            u[mode.index()] = gram_factor(&y, mode, ranks[mode.index()])?;
        }
        trace.push(orthonormal_fit_error(&white, &u)?);
    }
    let [e, o, i] = u;
    Ok((
        TuckerFactors {
            expert: e,
            output: wh.recolor_out.matmul(&o)?,
            input: wh.recolor_in.matmul(&i)?,
            whitening: whitening.mode,
            epsilon: whitening.epsilon,
        },
        trace,
    ))
}

fn orthonormal_fit_error(w: &Tensor3, u: &[Matrix; 3]) -> Result<f64> {
    let mut core = w.clone();
    for m in Mode::ALL {
        core = core.mode_product(&u[m.index()].transpose(), m)?;
    }
    let mut recon = core;
    for m in Mode::ALL {
        recon = recon.mode_product(&u[m.index()], m)?;
    }
    Ok(w.sub(&recon)?.frobenius_norm())
}

/// Core `𝒢 ∈ ℝ^{r_e×r_out×r_in}` together with
/// `G_flat = [G_1 ⋯ G_{r_e}] ∈ ℝ^{r_out × r_e·r_in}`, where `G_a = 𝒢[a,:,:]`.
/// `G_flat` is the mode-2 unfolding under this crate's unfolding convention.
#[derive(Clone, Debug, PartialEq)]
pub struct CoreTensor {
    pub g: Tensor3,
    pub flat: Matrix,
}

impl CoreTensor {
    pub fn from_tensor(g: Tensor3) -> Self {
        let flat = g.unfold(Mode::Two);
        Self { g, flat }
    }

    pub fn from_flat(flat: Matrix, ranks: [usize; 3]) -> Result<Self> {
        let g = Tensor3::fold(&flat, Mode::Two, ranks)?;
        Ok(Self { g, flat })
    }

    pub fn ranks(&self) -> [usize; 3] {
        self.g.dims()
    }

    pub fn scale(&self, s: f64) -> Self {
        Self {
            g: self.g.scale(s),
            flat: self.flat.scale(s),
        }
    }
}

/// `𝒢 = w ×₁ U_eᵀ ×₂ U_outᵀ ×₃ U_inᵀ`.
pub fn compute_core(w: &Tensor3, factors: &TuckerFactors) -> Result<CoreTensor> {
    ensure(factors.dims() == w.dims(), || {
        format!("factor dims {:?} do not match tensor {:?}", factors.dims(), w.dims())
    })?;
    let mut g = w.clone();
    for m in Mode::ALL {
        g = g.mode_product(&factors.by_mode(m).transpose(), m)?;
    }
    Ok(CoreTensor::from_tensor(g))
}

/// `𝒢 ×₁ U_e ×₂ U_out ×₃ U_in`.
pub fn reconstruct(core: &CoreTensor, factors: &TuckerFactors) -> Result<Tensor3> {
    let mut t = core.g.clone();
    for m in Mode::ALL {
        t = t.mode_product(factors.by_mode(m), m)?;
    }
    Ok(t)
}

/// `‖w − reconstruct(compute_core(w))‖_F`, exact for orthonormal factors.
pub fn fit_error(w: &Tensor3, factors: &TuckerFactors) -> Result<f64> {
    let core = compute_core(w, factors)?;
    Ok(w.sub(&reconstruct(&core, factors)?)?.frobenius_norm())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::moe::{gaussian_vec, seeded_rng};

    fn random_tensor(dims: [usize; 3], seed: u64) -> Tensor3 {
        let mut rng = seeded_rng(seed);
        Tensor3::from_vec(dims, gaussian_vec(&mut rng, dims.iter().product(), 1.0)).unwrap()
    }

    fn random_spd(n: usize, seed: u64) -> Matrix {
        let mut rng = seeded_rng(seed);
        let a = Matrix::from_vec(n, n, gaussian_vec(&mut rng, n * n, 1.0)).unwrap();
        a.gram().add_diagonal(0.5)
    }

    #[test]
    fn rank_one_tensor_is_recovered_exactly() {
        let (a, b, c) = (vec![1.0, -2.0, 0.5], vec![3.0, 1.0], vec![0.2, 0.4, -0.1, 1.0]);
        let w = Tensor3::outer(&a, &b, &c);
        let f = hosvd(&w, [1, 1, 1], &WhiteningConfig::none()).unwrap();
        let na = crate::linalg::norm(&a);
        // largest-magnitude entry of a is -2 → sign flipped to positive
        assert!((f.expert[(1, 0)] - 2.0 / na).abs() < 1e-12);
        assert!(fit_error(&w, &f).unwrap() < 1e-12);
        let core = compute_core(&w, &f).unwrap();
        let expected = na * crate::linalg::norm(&b) * crate::linalg::norm(&c);
        assert!((core.g.get(0, 0, 0).abs() - expected).abs() < 1e-12);
    }

    #[test]
    fn full_rank_reconstruction_is_exact() {
        let w = random_tensor([3, 4, 5], 11);
        let f = hosvd(&w, [3, 4, 5], &WhiteningConfig::none()).unwrap();
        assert!(fit_error(&w, &f).unwrap() < 1e-9 * w.frobenius_norm());
        for u in [&f.expert, &f.output, &f.input] {
            assert!(u.orthonormality_defect() < 1e-10);
        }
    }

    #[test]
    fn hooi_fixed_point_and_zero_sweeps() {
        let w = Tensor3::outer(&[1.0, 2.0], &[1.0, 0.0, -1.0], &[0.5, 0.5]);
        let f = hosvd(&w, [1, 1, 1], &WhiteningConfig::none()).unwrap();
        let same = hooi_refine(&w, &f, 0, &WhiteningConfig::none()).unwrap();
        assert_eq!(same, f);
        let (refined, trace) = hooi_refine_traced(&w, &f, 2, &WhiteningConfig::none()).unwrap();
        assert!(trace.iter().all(|e| *e < 1e-12));
        assert!(refined.expert.sub(&f.expert).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn rank_errors() {
        let w = random_tensor([2, 3, 4], 1);
        assert!(matches!(
            hosvd(&w, [3, 1, 1], &WhiteningConfig::none()),
            Err(Error::RankOutOfRange { .. })
        ));
        assert!(hosvd(&w, [0, 1, 1], &WhiteningConfig::none()).is_err());
    }

    #[test]
    fn whitening_none_is_identity() {
        let w = random_tensor([2, 3, 4], 5);
        let (white, rin, rout) = whiten_tensor(&w, &WhiteningConfig::none()).unwrap();
        assert_eq!(white, w);
        assert_eq!(rin, Matrix::identity(4));
        assert_eq!(rout, Matrix::identity(3));
    }

    #[test]
    fn isotropic_whitening_scales() {
        let w = random_tensor([2, 3, 4], 6);
        let eps = 1e-3;
        let cfg = WhiteningConfig {
            mode: WhiteningMode::In,
            epsilon: eps,
            cov_in: Some(Matrix::identity(4)),
            cov_out: None,
        };
        let (white, rin, _) = whiten_tensor(&w, &cfg).unwrap();
        let expected = w.scale((1.0 + eps).sqrt());
        assert!(white.sub(&expected).unwrap().frobenius_norm() < 1e-12);
        let back = white.mode_product(&rin, Mode::Three).unwrap();
        assert!(back.sub(&w).unwrap().frobenius_norm() < 1e-8);
    }

    #[test]
    fn whitening_roundtrip_all_modes() {
        let w = random_tensor([3, 4, 5], 7);
        for mode in [WhiteningMode::None, WhiteningMode::In, WhiteningMode::Out, WhiteningMode::Both] {
            let cfg = WhiteningConfig {
                mode,
                epsilon: 1e-2,
                cov_in: Some(random_spd(5, 8)),
                cov_out: Some(random_spd(4, 9)),
            };
            let wh = Whitener::new(&cfg, 4, 5).unwrap();
            let back = wh.recolor(&wh.whiten(&w).unwrap()).unwrap();
            assert!(back.sub(&w).unwrap().frobenius_norm() <= 1e-8 * w.frobenius_norm(), "{mode:?}");
        }
    }

    #[test]
    fn whitened_factors_orthonormal_in_metric() {
        let w = random_tensor([3, 4, 5], 12);
        let cov = random_spd(5, 13);
        let cfg = WhiteningConfig {
            mode: WhiteningMode::In,
            epsilon: 1e-2,
            cov_in: Some(cov.clone()),
            cov_out: None,
        };
        let f = hosvd(&w, [2, 3, 3], &cfg).unwrap();
        let metric = cov.add_diagonal(1e-2);
        let g = f.input.tr_matmul(&metric.matmul(&f.input).unwrap()).unwrap();
        assert!(g.sub(&Matrix::identity(3)).unwrap().frobenius_norm() < 1e-8);
        assert!(f.output.orthonormality_defect() < 1e-10);
    }

    #[test]
    fn missing_covariance_is_rejected() {
        let w = random_tensor([2, 3, 4], 2);
        let cfg = WhiteningConfig {
            mode: WhiteningMode::In,
            ..WhiteningConfig::none()
        };
        assert!(hosvd(&w, [1, 1, 1], &cfg).is_err());
        let bad = WhiteningConfig {
            mode: WhiteningMode::In,
            epsilon: 1e-6,
            cov_in: Some(Matrix::diagonal(&[1.0, 1.0, -1.0, 1.0])),
            cov_out: None,
        };
        assert!(matches!(hosvd(&w, [1, 1, 1], &bad), Err(Error::NotPositiveDefinite { .. })));
    }

    #[test]
    fn core_flat_layout() {
        let g = Tensor3::from_fn([2, 3, 2], |a, o, c| (100 * a + 10 * o + c) as f64);
        let core = CoreTensor::from_tensor(g.clone());
        assert_eq!(core.flat.shape(), (3, 4));
        // G_flat[o, a*r_in + c] = g[a, o, c]
        assert_eq!(core.flat[(2, 2 + 1)], 121.0);
        assert_eq!(CoreTensor::from_flat(core.flat.clone(), [2, 3, 2]).unwrap().g, g);
    }
}

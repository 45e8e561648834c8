//! Synthetic mixture-of-experts layer: top-K router, gated experts, forward pass,
//! and extraction of the per-fact quantities consumed by the editors
//! (gating weights, per-expert keys, design vectors, residuals).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::editors::NullSpaceProjectorSet;
use crate::error::{ensure, Error, Result};
use crate::linalg::{norm, Matrix, Mode, Tensor3};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Silu,
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Silu => v / (1.0 + (-v).exp()),
            Activation::Identity => v,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Silu => "silu",
            Activation::Identity => "identity",
        }
    }
}

/// Storage layout of the stacked down-projections.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layout {
    /// `E × d_model × d_hidden`, slab `j` is `W_j`.
    Standard,
    /// `E × d_hidden × d_model`, slab `j` is `W_jᵀ`.
    TransposedPacked,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MoeLayer {
    top_k: usize,
    activation: Activation,
    layout: Layout,
    expert_embeddings: Matrix,
    gate_w: Tensor3,
    up_w: Tensor3,
    down_w: Tensor3,
}

impl MoeLayer {
    /// `down_w` is given in the storage order implied by `layout`.
    pub fn from_parts(
        top_k: usize,
        activation: Activation,
        layout: Layout,
        expert_embeddings: Matrix,
        gate_w: Tensor3,
        up_w: Tensor3,
        down_w: Tensor3,
    ) -> Result<Self> {
        let (e, d_model) = expert_embeddings.shape();
        if e == 0 || top_k == 0 || top_k > e {
            return Err(Error::Config(format!(
                "active experts K={top_k} must satisfy 1 <= K <= E={e}"
            )));
        }
        let d_hidden = gate_w.dims()[1];
        ensure(gate_w.dims() == [e, d_hidden, d_model], || {
            format!("gate weights {:?}, expected [{e}, {d_hidden}, {d_model}]", gate_w.dims())
        })?;
        ensure(up_w.dims() == gate_w.dims(), || {
            format!("up weights {:?} differ from gate {:?}", up_w.dims(), gate_w.dims())
        })?;
        let expected = match layout {
            Layout::Standard => [e, d_model, d_hidden],
            Layout::TransposedPacked => [e, d_hidden, d_model],
        };
        ensure(down_w.dims() == expected, || {
            format!("down weights {:?}, expected {expected:?} for {layout:?}", down_w.dims())
        })?;
        if !(expert_embeddings.is_finite() && gate_w.is_finite() && up_w.is_finite() && down_w.is_finite()) {
            return Err(Error::NonFinite("layer weights"));
        }
        Ok(Self {
            top_k,
            activation,
            layout,
            expert_embeddings,
            gate_w,
            up_w,
            down_w,
        })
    }

    pub fn num_experts(&self) -> usize {
        self.expert_embeddings.rows()
    }

    pub fn top_k(&self) -> usize {
        self.top_k
    }

    pub fn d_model(&self) -> usize {
        self.expert_embeddings.cols()
    }

    pub fn d_hidden(&self) -> usize {
        self.gate_w.dims()[1]
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn layout(&self) -> Layout {
        self.layout
    }

    pub fn expert_embeddings(&self) -> &Matrix {
        &self.expert_embeddings
    }

    pub fn gate_weights(&self) -> &Tensor3 {
        &self.gate_w
    }

    pub fn up_weights(&self) -> &Tensor3 {
        &self.up_w
    }

    /// Down-projections exactly as stored (layout-dependent shape).
    pub fn stored_down_weights(&self) -> &Tensor3 {
        &self.down_w
    }

    pub fn with_expert_embeddings(mut self, emb: Matrix) -> Result<Self> {
        ensure(emb.shape() == self.expert_embeddings.shape(), || {
            format!("router embeddings {:?}, expected {:?}", emb.shape(), self.expert_embeddings.shape())
        })?;
        self.expert_embeddings = emb;
        Ok(self)
    }

    /// `W_j` as a `d_model × d_hidden` matrix regardless of layout.
    pub fn expert_down(&self, j: usize) -> Matrix {
        match self.layout {
            Layout::Standard => self.down_w.slab(j),
            Layout::TransposedPacked => self.down_w.slab(j).transpose(),
        }
    }

    /// The stacked tensor `𝒲 ∈ ℝ^{E×d_model×d_hidden}` in standard orientation.
    pub fn down_tensor(&self) -> Tensor3 {
        match self.layout {
            Layout::Standard => self.down_w.clone(),
            Layout::TransposedPacked => {
                let slabs: Vec<Matrix> = (0..self.num_experts()).map(|j| self.expert_down(j)).collect();
                Tensor3::from_slabs(&slabs).expect("equal slab shapes")
            }
        }
    }

    /// Same weights re-stored in another layout.
    pub fn to_layout(&self, layout: Layout) -> MoeLayer {
        if layout == self.layout {
            return self.clone();
        }
        let slabs: Vec<Matrix> = (0..self.num_experts())
            .map(|j| {
                let w = self.expert_down(j);
                match layout {
                    Layout::Standard => w,
                    Layout::TransposedPacked => w.transpose(),
                }
            })
            .collect();
        MoeLayer {
            layout,
            down_w: Tensor3::from_slabs(&slabs).expect("equal slab shapes"),
            ..self.clone()
        }
    }

    /// Adds a `d_model × d_hidden` increment to `W_j`, transposing it first for
    /// the packed layout.
    pub(crate) fn add_to_expert_down(&mut self, j: usize, delta: &[f64]) {
        let (dm, dh) = (self.d_model(), self.d_hidden());
        debug_assert_eq!(delta.len(), dm * dh);
        let slab = self.down_w.slab_data_mut(j);
        match self.layout {
            Layout::Standard => {
                for (w, d) in slab.iter_mut().zip(delta) {
                    *w += d;
                }
            }
            Layout::TransposedPacked => {
                for o in 0..dm {
                    for h in 0..dh {
                        slab[h * dm + o] += delta[o * dh + h];
                    }
                }
            }
        }
    }
}

/// Sparse gating for one hidden state.
#[derive(Clone, Debug, PartialEq)]
pub struct GatingResult {
    /// Selected experts in ascending index order.
    pub selected: Vec<usize>,
    /// Length-E gate weights, zero outside `selected`.
    pub weights: Vec<f64>,
}

impl GatingResult {
    pub fn is_selected(&self, j: usize) -> bool {
        self.selected.binary_search(&j).is_ok()
    }
}

pub fn router_logits(layer: &MoeLayer, x: &[f64]) -> Result<Vec<f64>> {
    layer.expert_embeddings.matvec(x)
}

/// Top-K routing with softmax renormalised over the selected logits. Ties are
/// broken towards the lower expert index.
pub fn route(layer: &MoeLayer, x: &[f64]) -> Result<GatingResult> {
    let logits = router_logits(layer, x)?;
    Ok(gate_from_logits(&logits, layer.top_k))
}

pub fn gate_from_logits(logits: &[f64], k: usize) -> GatingResult {
    let mut order: Vec<usize> = (0..logits.len()).collect();
    order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
    let mut selected: Vec<usize> = order[..k].to_vec();
    let max = logits[selected[0]];
    let exps: Vec<f64> = selected.iter().map(|&j| (logits[j] - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    let mut weights = vec![0.0; logits.len()];
    for (&j, e) in selected.iter().zip(&exps) {
        weights[j] = e / total;
    }
    selected.sort_unstable();
    GatingResult { selected, weights }
}

/// `k_j = σ(W_gate^{(j)} x) ⊙ (W_up^{(j)} x)`.
pub fn expert_key(layer: &MoeLayer, j: usize, x: &[f64]) -> Result<Vec<f64>> {
    ensure(j < layer.num_experts(), || format!("expert {j} of {}", layer.num_experts()))?;
    ensure(x.len() == layer.d_model(), || {
        format!("hidden state of length {}, d_model is {}", x.len(), layer.d_model())
    })?;
    let dm = layer.d_model();
    let gate = layer.gate_w.slab_data(j);
    let up = layer.up_w.slab_data(j);
    Ok((0..layer.d_hidden())
        .map(|h| {
            let g: f64 = gate[h * dm..(h + 1) * dm].iter().zip(x).map(|(a, b)| a * b).sum();
            let u: f64 = up[h * dm..(h + 1) * dm].iter().zip(x).map(|(a, b)| a * b).sum();
            layer.activation.apply(g) * u
        })
        .collect())
}

/// Keys for the selected experts; rows of unselected experts stay zero.
pub fn expert_keys(layer: &MoeLayer, gating: &GatingResult, x: &[f64]) -> Result<Matrix> {
    let mut keys = Matrix::zeros(layer.num_experts(), layer.d_hidden());
    for &j in &gating.selected {
        keys.row_mut(j).copy_from_slice(&expert_key(layer, j, x)?);
    }
    Ok(keys)
}

/// `Σ_{j∈S} g_j W_j k_j` for explicit gating and keys.
pub fn mixture_output(layer: &MoeLayer, gating: &GatingResult, keys: &Matrix) -> Vec<f64> {
    let mut out = vec![0.0; layer.d_model()];
    for &j in &gating.selected {
        let g = gating.weights[j];
        let w = layer.expert_down(j);
        let v = w.matvec(keys.row(j)).expect("key length");
        for (o, vi) in out.iter_mut().zip(v) {
            *o += g * vi;
        }
    }
    out
}

pub fn moe_forward(layer: &MoeLayer, x: &[f64]) -> Result<Vec<f64>> {
    let gating = route(layer, x)?;
    let keys = expert_keys(layer, &gating, x)?;
    Ok(mixture_output(layer, &gating, &keys))
}

/// A fact to edit with its routing and keys cached against one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct Fact {
    pub x: Vec<f64>,
    pub target_v: Vec<f64>,
    pub gating: GatingResult,
    /// `E × d_hidden`; row `j` is `k_{f,j}`, zero for unselected experts.
    pub keys: Matrix,
}

impl Fact {
    pub fn cache(layer: &MoeLayer, x: Vec<f64>, target_v: Vec<f64>) -> Result<Self> {
        ensure(target_v.len() == layer.d_model(), || {
            format!("target of length {}, d_model is {}", target_v.len(), layer.d_model())
        })?;
        let gating = route(layer, &x)?;
        let keys = expert_keys(layer, &gating, &x)?;
        Ok(Self {
            x,
            target_v,
            gating,
            keys,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EditBatch {
    pub facts: Vec<Fact>,
    pub lambda: f64,
}

impl EditBatch {
    pub fn new(facts: Vec<Fact>, lambda: f64) -> Result<Self> {
        if facts.is_empty() {
            return Err(Error::Config("edit batch needs at least one fact".into()));
        }
        if !(lambda > 0.0) {
            return Err(Error::Config(format!("lambda must be positive, got {lambda}")));
        }
        let (e, dh) = facts[0].keys.shape();
        for (i, f) in facts.iter().enumerate() {
            ensure(f.keys.shape() == (e, dh) && f.target_v.len() == f.x.len(), || {
                format!("fact {i} has inconsistent dimensions")
            })?;
        }
        Ok(Self { facts, lambda })
    }

    pub fn len(&self) -> usize {
        self.facts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.facts.is_empty()
    }

    /// Re-routes every fact's hidden state through `layer`, keeping targets.
    pub fn recache(&self, layer: &MoeLayer) -> Result<EditBatch> {
        let facts = self
            .facts
            .iter()
            .map(|f| Fact::cache(layer, f.x.clone(), f.target_v.clone()))
            .collect::<Result<_>>()?;
        Ok(EditBatch {
            facts,
            lambda: self.lambda,
        })
    }
}

/// Preservation keys grouped per expert (`d_hidden × M_j` each), together with
/// the hidden states they were drawn from when known.
#[derive(Clone, Debug, PartialEq)]
pub struct PreservationSet {
    pub keys: Vec<Matrix>,
    pub inputs: Vec<Vec<f64>>,
}

impl PreservationSet {
    pub fn empty(experts: usize, d_hidden: usize) -> Self {
        Self {
            keys: vec![Matrix::zeros(d_hidden, 0); experts],
            inputs: vec![],
        }
    }

    /// Routes each input and files the key under every selected expert.
    /// Unselected experts contribute nothing.
    pub fn from_inputs(layer: &MoeLayer, inputs: Vec<Vec<f64>>) -> Result<Self> {
        let mut cols: Vec<Vec<Vec<f64>>> = vec![vec![]; layer.num_experts()];
        for x in &inputs {
            let gating = route(layer, x)?;
            for &j in &gating.selected {
                cols[j].push(expert_key(layer, j, x)?);
            }
        }
        let keys = cols
            .iter()
            .map(|c| Matrix::from_columns(layer.d_hidden(), c))
            .collect::<Result<_>>()?;
        Ok(Self { keys, inputs })
    }

    pub fn num_experts(&self) -> usize {
        self.keys.len()
    }

    pub fn sample_count(&self) -> usize {
        self.keys.iter().map(Matrix::cols).sum()
    }

    /// Per-expert key covariances averaged over experts that have samples.
    pub fn mean_key_covariance(&self, d_hidden: usize) -> Matrix {
        let mut acc = Matrix::zeros(d_hidden, d_hidden);
        let mut used = 0usize;
        for k in self.keys.iter().filter(|k| k.cols() > 0) {
            let cov = k.gram().scale(1.0 / k.cols() as f64);
            acc.add_assign(&cov).expect("d_hidden square");
            used += 1;
        }
        if used > 0 {
            acc = acc.scale(1.0 / used as f64);
        }
        acc
    }
}

/// `ψ_f`: block `j` is `g_{f,j}·P_j k_{f,j}` (or `g_{f,j}·k_{f,j}` without
/// projectors), zero for unselected experts.
pub fn build_design_vector(fact: &Fact, projectors: Option<&NullSpaceProjectorSet>) -> Result<Vec<f64>> {
    let (e, dh) = fact.keys.shape();
    if let Some(p) = projectors {
        ensure(p.num_experts() == e && p.dim() == dh, || {
            format!(
                "projector set for {} experts of dim {}, fact has {e} x {dh}",
                p.num_experts(),
                p.dim()
            )
        })?;
    }
    let mut psi = vec![0.0; e * dh];
    for &j in &fact.gating.selected {
        let g = fact.gating.weights[j];
        let key = fact.keys.row(j);
        let block = &mut psi[j * dh..(j + 1) * dh];
        match projectors {
            Some(p) => {
                let pk = p.project(j, key);
                for (b, v) in block.iter_mut().zip(pk) {
                    *b = g * v;
                }
            }
            None => {
                for (b, v) in block.iter_mut().zip(key) {
                    *b = g * v;
                }
            }
        }
    }
    Ok(psi)
}

/// `Ψ ∈ ℝ^{E·d_hidden × T}`, one design vector per column.
pub fn design_matrix(batch: &EditBatch, projectors: Option<&NullSpaceProjectorSet>) -> Result<Matrix> {
    let cols = batch
        .facts
        .iter()
        .map(|f| build_design_vector(f, projectors))
        .collect::<Result<Vec<_>>>()?;
    let n = cols.first().map_or(0, Vec::len);
    Matrix::from_columns(n, &cols)
}

/// `r_f = v_f − Σ_j g_{f,j} W_j k_{f,j}` using the cached gating and keys.
pub fn compute_residual(layer: &MoeLayer, fact: &Fact) -> Result<Vec<f64>> {
    ensure(fact.keys.shape() == (layer.num_experts(), layer.d_hidden()), || {
        format!("fact keys {:?} do not match layer", fact.keys.shape())
    })?;
    let out = mixture_output(layer, &fact.gating, &fact.keys);
    Ok(fact.target_v.iter().zip(out).map(|(v, o)| v - o).collect())
}

/// `R ∈ ℝ^{d_model × T}`.
pub fn residual_matrix(layer: &MoeLayer, batch: &EditBatch) -> Result<Matrix> {
    let cols = batch
        .facts
        .iter()
        .map(|f| compute_residual(layer, f))
        .collect::<Result<Vec<_>>>()?;
    Matrix::from_columns(layer.d_model(), &cols)
}

pub(crate) fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub(crate) fn gaussian_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
}

fn gaussian_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    Matrix::from_vec(rows, cols, gaussian_vec(rng, rows * cols, scale)).expect("shape")
}

/// Shape and nonlinearity of a synthetic layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub experts: usize,
    pub top_k: usize,
    pub d_model: usize,
    pub d_hidden: usize,
    pub activation: Activation,
    pub layout: Layout,
}

impl LayerSpec {
    pub fn validate(&self) -> Result<()> {
        if self.experts == 0 || self.d_model == 0 || self.d_hidden == 0 {
            return Err(Error::Config("layer dimensions must be positive".into()));
        }
        if self.top_k == 0 || self.top_k > self.experts {
            return Err(Error::Config(format!(
                "active experts K={} must satisfy 1 <= K <= E={}",
                self.top_k, self.experts
            )));
        }
        Ok(())
    }
}

impl MoeLayer {
    /// Random layer whose down-projections share low-multilinear-rank structure
    /// across experts plus a small unstructured component.
    pub fn synthesize(spec: &LayerSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = seeded_rng(seed);
        let LayerSpec {
            experts: e,
            d_model: dm,
            d_hidden: dh,
            ..
        } = *spec;
        let emb = gaussian_matrix(&mut rng, e, dm, 1.0 / (dm as f64).sqrt());
        let in_scale = 1.0 / (dm as f64).sqrt();
        let gate = Tensor3::from_vec([e, dh, dm], gaussian_vec(&mut rng, e * dh * dm, in_scale))?;
        let up = Tensor3::from_vec([e, dh, dm], gaussian_vec(&mut rng, e * dh * dm, in_scale))?;

        let ranks = [e.min(4).max(1), (dm / 2).max(1), (dh / 2).max(1)];
        let core = Tensor3::from_vec(ranks, gaussian_vec(&mut rng, ranks.iter().product(), 1.0))?;
        let factors = [
            gaussian_matrix(&mut rng, e, ranks[0], 1.0 / (ranks[0] as f64).sqrt()),
            gaussian_matrix(&mut rng, dm, ranks[1], 1.0 / (ranks[1] as f64).sqrt()),
            gaussian_matrix(&mut rng, dh, ranks[2], 1.0 / (ranks[2] as f64).sqrt()),
        ];
        let mut down = core;
        for (mode, f) in Mode::ALL.iter().zip(&factors) {
            down = down.mode_product(f, *mode)?;
        }
        let structured = down.frobenius_norm() / ((e * dm * dh) as f64).sqrt();
        let target = 1.0 / (dh as f64).sqrt();
        let noise = gaussian_vec(&mut rng, e * dm * dh, 0.2 * target);
        for (w, n) in down.data_mut().iter_mut().zip(noise) {
            *w = *w * target / structured.max(1e-300) + n;
        }

        let layer = MoeLayer::from_parts(spec.top_k, spec.activation, Layout::Standard, emb, gate, up, down)?;
        Ok(layer.to_layout(spec.layout))
    }
}

/// Hidden states `x ~ N(0, I)`.
pub fn sample_inputs(d_model: usize, count: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = seeded_rng(seed);
    (0..count).map(|_| gaussian_vec(&mut rng, d_model, 1.0)).collect()
}

/// Hidden states confined to a random `dim`-dimensional subspace, mimicking a
/// generic-corpus activation distribution that occupies only part of the space.
pub fn sample_subspace_inputs(d_model: usize, dim: usize, count: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = seeded_rng(seed);
    let basis = gaussian_matrix(&mut rng, d_model, dim.max(1), 1.0 / (dim.max(1) as f64).sqrt());
    (0..count)
        .map(|_| {
            let z = gaussian_vec(&mut rng, dim.max(1), 1.0);
            basis.matvec(&z).expect("basis shape")
        })
        .collect()
}

/// Facts whose targets sit at distance `residual_scale` from the current output
/// along a random direction.
pub fn synthesize_batch(
    layer: &MoeLayer,
    count: usize,
    seed: u64,
    residual_scale: f64,
    lambda: f64,
) -> Result<EditBatch> {
    if count == 0 {
        return Err(Error::Config("batch size T must be at least 1".into()));
    }
    let mut rng = seeded_rng(seed);
    let dm = layer.d_model();
    let mut facts = Vec::with_capacity(count);
    for _ in 0..count {
        let x = gaussian_vec(&mut rng, dm, 1.0);
        let mut dir = gaussian_vec(&mut rng, dm, 1.0);
        let n = norm(&dir);
        dir.iter_mut().for_each(|d| *d *= residual_scale / n);
        let out = moe_forward(layer, &x)?;
        let target = out.iter().zip(&dir).map(|(o, d)| o + d).collect();
        facts.push(Fact::cache(layer, x, target)?);
    }
    EditBatch::new(facts, lambda)
}

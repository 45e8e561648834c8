//! Synthetic artifact sets: per-layer weights and preservation inputs, one edit
//! batch, and a TOML manifest, all arrays stored as `MTE1` containers.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::linalg::container::{load, save, Array};
use crate::linalg::{Matrix, Tensor3};
use crate::moe::{
    sample_inputs, sample_subspace_inputs, synthesize_batch, Activation, EditBatch, Fact, LayerSpec, Layout,
    MoeLayer, PreservationSet,
};
use crate::spread::LayerState;

use super::derive_seed;

pub const MANIFEST_NAME: &str = "manifest.toml";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub layers: usize,
    pub experts: usize,
    pub top_k: usize,
    pub d_model: usize,
    pub d_hidden: usize,
    pub activation: Activation,
    pub layout: Layout,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            layers: 1,
            experts: 4,
            top_k: 2,
            d_model: 16,
            d_hidden: 8,
            activation: Activation::Silu,
            layout: Layout::Standard,
        }
    }
}

impl ModelConfig {
    pub fn layer_spec(&self) -> LayerSpec {
        LayerSpec {
            experts: self.experts,
            top_k: self.top_k,
            d_model: self.d_model,
            d_hidden: self.d_hidden,
            activation: self.activation,
            layout: self.layout,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BatchConfig {
    pub facts: usize,
    /// Distance of each target from the current last-layer output.
    pub residual_scale: f64,
    pub lambda: f64,
}

impl Default for BatchConfig {
    fn default() -> Self {
        Self {
            facts: 10,
            residual_scale: 1.0,
            lambda: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreservationConfig {
    pub samples: usize,
    /// Dimension of the input subspace preservation states are drawn from;
    /// `0` draws from the whole space.
    pub subspace_dim: usize,
}

impl Default for PreservationConfig {
    fn default() -> Self {
        Self {
            samples: 64,
            subspace_dim: 4,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerateConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub batch: BatchConfig,
    pub preservation: PreservationConfig,
}

impl GenerateConfig {
    pub fn validate(&self) -> Result<()> {
        if self.model.layers == 0 {
            return Err(Error::Config("at least one layer is required".into()));
        }
        self.model.layer_spec().validate()?;
        if self.batch.facts == 0 {
            return Err(Error::Config("batch size T must be at least 1".into()));
        }
        if !(self.batch.lambda > 0.0) {
            return Err(Error::Config(format!("lambda must be positive, got {}", self.batch.lambda)));
        }
        if !(self.batch.residual_scale >= 0.0 && self.batch.residual_scale.is_finite()) {
            return Err(Error::Config("residual_scale must be finite and non-negative".into()));
        }
        if self.preservation.subspace_dim > self.model.d_model {
            return Err(Error::Config(format!(
                "preservation subspace_dim {} exceeds d_model {}",
                self.preservation.subspace_dim, self.model.d_model
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerFiles {
    pub index: usize,
    pub embeddings: String,
    pub gate: String,
    pub up: String,
    pub down: String,
    pub down_dims: [usize; 3],
    pub preservation: String,
    pub preservation_samples: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchFiles {
    pub facts: usize,
    pub d_model: usize,
    pub lambda: f64,
    /// Layer the targets were computed against.
    pub target_layer: usize,
    pub inputs: String,
    pub targets: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub config: GenerateConfig,
    pub batch: BatchFiles,
    pub layers: Vec<LayerFiles>,
}

/// A loaded or freshly generated artifact set.
#[derive(Clone, Debug, PartialEq)]
pub struct Generated {
    pub config: GenerateConfig,
    pub states: Vec<LayerState>,
    /// `T × d_model`.
    pub inputs: Matrix,
    /// `T × d_model`.
    pub targets: Matrix,
}

pub fn generate(config: &GenerateConfig) -> Result<Generated> {
    config.validate()?;
    let spec = config.model.layer_spec();
    let mut states = Vec::with_capacity(config.model.layers);
    for i in 0..config.model.layers {
        let layer = MoeLayer::synthesize(&spec, derive_seed(config.seed, 1 + i as u64))?;
        let p = &config.preservation;
        let pseed = derive_seed(config.seed, 1000 + i as u64);
        let inputs = if p.subspace_dim == 0 {
            sample_inputs(spec.d_model, p.samples, pseed)
        } else {
            sample_subspace_inputs(spec.d_model, p.subspace_dim, p.samples, pseed)
        };
        let pres = PreservationSet::from_inputs(&layer, inputs)?;
        states.push(LayerState::new(layer, pres)?);
    }
    let last = &states.last().expect("at least one layer").layer;
    let b = &config.batch;
    let batch = synthesize_batch(last, b.facts, derive_seed(config.seed, 999), b.residual_scale, b.lambda)?;
    let rows = |f: &dyn Fn(&Fact) -> &Vec<f64>| -> Result<Matrix> {
        let data = batch.facts.iter().flat_map(|x| f(x).iter().copied()).collect();
        Matrix::from_vec(batch.len(), spec.d_model, data)
    };
    Ok(Generated {
        config: config.clone(),
        inputs: rows(&|f| &f.x)?,
        targets: rows(&|f| &f.target_v)?,
        states,
    })
}

fn rows_of(m: &Matrix) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|i| m.row(i).to_vec()).collect()
}

impl Generated {
    /// Facts routed and keyed against `layer`.
    pub fn batch_for(&self, layer: &MoeLayer, lambda: f64) -> Result<EditBatch> {
        let facts = (0..self.inputs.rows())
            .map(|i| Fact::cache(layer, self.inputs.row(i).to_vec(), self.targets.row(i).to_vec()))
            .collect::<Result<_>>()?;
        EditBatch::new(facts, lambda)
    }

    pub fn manifest(&self) -> Manifest {
        let layers = self
            .states
            .iter()
            .enumerate()
            .map(|(i, s)| LayerFiles {
                index: i,
                embeddings: format!("layer{i}_embeddings.mte"),
                gate: format!("layer{i}_gate.mte"),
                up: format!("layer{i}_up.mte"),
                down: format!("layer{i}_down.mte"),
                down_dims: s.layer.stored_down_weights().dims(),
                preservation: format!("layer{i}_preservation.mte"),
                preservation_samples: s.preservation.inputs.len(),
            })
            .collect();
        Manifest {
            format: "MTE1".into(),
            config: self.config.clone(),
            batch: BatchFiles {
                facts: self.inputs.rows(),
                d_model: self.inputs.cols(),
                lambda: self.config.batch.lambda,
                target_layer: self.states.len() - 1,
                inputs: "batch_inputs.mte".into(),
                targets: "batch_targets.mte".into(),
            },
            layers,
        }
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let manifest = self.manifest();
        for (files, state) in manifest.layers.iter().zip(&self.states) {
            let l = &state.layer;
            save(&dir.join(&files.embeddings), &Array::from(l.expert_embeddings()))?;
            save(&dir.join(&files.gate), &Array::from(l.gate_weights()))?;
            save(&dir.join(&files.up), &Array::from(l.up_weights()))?;
            save(&dir.join(&files.down), &Array::from(l.stored_down_weights()))?;
            let pres = if state.preservation.inputs.is_empty() {
                Matrix::zeros(0, l.d_model())
            } else {
                Matrix::from_columns(l.d_model(), &state.preservation.inputs)?.transpose()
            };
            save(&dir.join(&files.preservation), &Array::from(&pres))?;
        }
        save(&dir.join(&manifest.batch.inputs), &Array::from(&self.inputs))?;
        save(&dir.join(&manifest.batch.targets), &Array::from(&self.targets))?;
        let text = toml::to_string(&manifest).map_err(|e| Error::Format(e.to_string()))?;
        fs::write(dir.join(MANIFEST_NAME), text)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let text = fs::read_to_string(dir.join(MANIFEST_NAME))?;
        let manifest: Manifest = toml::from_str(&text).map_err(|e| Error::Format(e.to_string()))?;
        if manifest.format != "MTE1" {
            return Err(Error::Format(format!("unsupported format '{}'", manifest.format)));
        }
        let m = &manifest.config.model;
        let mut states = Vec::with_capacity(manifest.layers.len());
        for files in &manifest.layers {
            let emb = load(&dir.join(&files.embeddings))?.into_matrix()?;
            let gate = load(&dir.join(&files.gate))?.into_tensor()?;
            let up = load(&dir.join(&files.up))?.into_tensor()?;
            let down: Tensor3 = load(&dir.join(&files.down))?.into_tensor()?;
            ensure(down.dims() == files.down_dims, || {
                format!("{} has dims {:?}, manifest says {:?}", files.down, down.dims(), files.down_dims)
            })?;
            let layer = MoeLayer::from_parts(m.top_k, m.activation, m.layout, emb, gate, up, down)?;
            ensure(
                (layer.num_experts(), layer.d_model(), layer.d_hidden()) == (m.experts, m.d_model, m.d_hidden),
                || format!("layer {} dims disagree with the manifest", files.index),
            )?;
            let pres_inputs = load(&dir.join(&files.preservation))?.into_matrix()?;
            ensure(pres_inputs.cols() == m.d_model, || {
                format!("{} has {} columns, d_model is {}", files.preservation, pres_inputs.cols(), m.d_model)
            })?;
            let pres = PreservationSet::from_inputs(&layer, rows_of(&pres_inputs))?;
            states.push(LayerState::new(layer, pres)?);
        }
        let inputs = load(&dir.join(&manifest.batch.inputs))?.into_matrix()?;
        let targets = load(&dir.join(&manifest.batch.targets))?.into_matrix()?;
        ensure(
            inputs.shape() == (manifest.batch.facts, m.d_model) && targets.shape() == inputs.shape(),
            || "batch arrays disagree with the manifest".into(),
        )?;
        Ok(Self {
            config: manifest.config,
            states,
            inputs,
            targets,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_through_disk() {
        let cfg = GenerateConfig {
            seed: 42,
            model: ModelConfig {
                layers: 2,
                layout: Layout::TransposedPacked,
                ..ModelConfig::default()
            },
            ..GenerateConfig::default()
        };
        let g = generate(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        g.write(dir.path()).unwrap();
        let back = Generated::load(dir.path()).unwrap();
        assert_eq!(back, g);
    }

    #[test]
    fn rejects_bad_configs() {
        let mut cfg = GenerateConfig::default();
        cfg.model.top_k = 5;
        let err = generate(&cfg).unwrap_err().to_string();
        assert!(err.contains("K=5"), "{err}");
        let mut cfg = GenerateConfig::default();
        cfg.batch.lambda = 0.0;
        assert!(generate(&cfg).is_err());
        assert!(toml::from_str::<GenerateConfig>("bogus = 1").is_err());
    }
}

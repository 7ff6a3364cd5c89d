use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, OnceLock};

use serde::{Deserialize, Serialize};

use super::config::{names, ModelConfig};
use super::engine::Compiled;
use crate::quant::QuantState;
use crate::tensor::Tensor;
use crate::{Error, Result};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

fn next_id() -> u64 {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    Full,
    MixedQuantized,
}

/// Transformer weights plus configuration and optional quantization state.
///
/// Bundles are immutable. Edits produce a new bundle that shares every
/// untouched tensor with its parent.
#[derive(Debug, Clone)]
pub struct ModelBundle {
    config: ModelConfig,
    tensors: BTreeMap<String, Arc<Tensor>>,
    precision: Precision,
    quant: Option<QuantState>,
    id: u64,
    compiled: OnceLock<Arc<Compiled>>,
}

impl ModelBundle {
    /// Full-precision bundle. Every tensor named by the config must be present
    /// with the expected shape, and nothing else.
    pub fn new(config: ModelConfig, tensors: BTreeMap<String, Tensor>) -> Result<Self> {
        Self::assemble(config, tensors, Precision::Full, None)
    }

    pub(crate) fn assemble(
        config: ModelConfig,
        tensors: BTreeMap<String, Tensor>,
        precision: Precision,
        quant: Option<QuantState>,
    ) -> Result<Self> {
        config.validate()?;
        let expected = config.tensor_shapes();
        if tensors.len() != expected.len() {
            let extra: Vec<_> = tensors.keys().filter(|k| !expected.iter().any(|(n, _)| n == *k)).collect();
            if !extra.is_empty() {
                return Err(Error::Config(format!("unexpected tensors {extra:?}")));
            }
        }
        for (name, shape) in &expected {
            let t = tensors.get(name).ok_or_else(|| Error::Config(format!("missing tensor {name}")))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Config(format!("tensor {name} has shape {:?}, expected {shape:?}", t.shape())));
            }
        }
        match (&precision, &quant) {
            (Precision::Full, Some(_)) => return Err(Error::Config("full-precision bundle with quant state".into())),
            (Precision::MixedQuantized, None) => {
                return Err(Error::Config("quantized bundle without quant state".into()))
            }
            (Precision::MixedQuantized, Some(q)) => q.validate(&config)?,
            _ => {}
        }
        if precision == Precision::Full && tensors.values().any(|t| t.is_quantized()) {
            return Err(Error::Config("full-precision bundle holds int8 tensors".into()));
        }
        Ok(ModelBundle {
            config,
            tensors: tensors.into_iter().map(|(k, v)| (k, Arc::new(v))).collect(),
            precision,
            quant,
            id: next_id(),
            compiled: OnceLock::new(),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn quant(&self) -> Option<&QuantState> {
        self.quant.as_ref()
    }

    /// Identity of this weight set. Caches built against one bundle are
    /// rejected by any other.
    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name).map(|t| t.as_ref())
    }

    pub fn tensors(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v.as_ref()))
    }

    /// True when both bundles hold the same allocation for `name`.
    pub fn shares_tensor(&self, other: &ModelBundle, name: &str) -> bool {
        match (self.tensors.get(name), other.tensors.get(name)) {
            (Some(a), Some(b)) => Arc::ptr_eq(a, b),
            _ => false,
        }
    }

    /// Total payload bytes of stored tensors.
    pub fn storage_bytes(&self) -> usize {
        self.tensors.values().map(|t| t.nbytes()).sum()
    }

    /// The down-projection of `layer` as an f64 `[d_model, d_mlp]` row-major
    /// matrix.
    pub fn down_proj(&self, layer: usize) -> Result<Vec<f64>> {
        self.config.check_layer(layer)?;
        Ok(self.tensors[&names::down_proj(layer)].to_f64())
    }

    /// Returns a copy of the bundle with the down-projection of `layer`
    /// replaced. All other tensors are shared with `self`.
    pub fn replace_downproj(&self, layer: usize, new_matrix: &[f64]) -> Result<ModelBundle> {
        self.config.check_layer(layer)?;
        let name = names::down_proj(layer);
        let old = &self.tensors[&name];
        if new_matrix.len() != old.len() {
            return Err(Error::Config(format!(
                "replacement for {name} has {} elements, expected {:?}",
                new_matrix.len(),
                old.shape()
            )));
        }
        if old.is_quantized() {
            return Err(Error::Config(format!(
                "{name} is stored as int8; the edit layer must be in the floating-point island"
            )));
        }
        let data = new_matrix.iter().map(|&x| x as f32).collect();
        let replacement = Tensor::f32(old.shape().to_vec(), data)?;
        let mut tensors = self.tensors.clone();
        tensors.insert(name, Arc::new(replacement));
        Ok(ModelBundle {
            config: self.config.clone(),
            tensors,
            precision: self.precision,
            quant: self.quant.clone(),
            id: next_id(),
            compiled: OnceLock::new(),
        })
    }

    pub(crate) fn tensor_map(&self) -> &BTreeMap<String, Arc<Tensor>> {
        &self.tensors
    }

    pub(crate) fn compiled(&self) -> Result<&Arc<Compiled>> {
        if let Some(c) = self.compiled.get() {
            return Ok(c);
        }
        let c = Arc::new(Compiled::build(self)?);
        Ok(self.compiled.get_or_init(|| c))
    }
}

impl ModelBundle {
    /// Randomly initialized full-precision bundle: N(0, std^2) matrices and
    /// embeddings, unit norm gains, zero norm biases.
    pub fn random(config: ModelConfig, seed: u64, std: f64) -> Result<Self> {
        use rand::SeedableRng;
        use rand_distr::{Distribution, Normal};
        config.validate()?;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
        let mut tensors = BTreeMap::new();
        for (name, shape) in config.tensor_shapes() {
            let n: usize = shape.iter().product();
            let data: Vec<f32> = if name.ends_with(".gain") {
                vec![1.0; n]
            } else if name.ends_with(".bias") {
                vec![0.0; n]
            } else {
                (0..n).map(|_| normal.sample(&mut rng) as f32).collect()
            };
            tensors.insert(name, Tensor::f32(shape, data)?);
        }
        ModelBundle::new(config, tensors)
    }
}

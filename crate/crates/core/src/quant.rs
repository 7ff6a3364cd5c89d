//! Static W8A16 post-training quantization.
//!
//! Weights are stored as symmetric per-tensor int8. Activations are quantized
//! to int16 at block boundaries with scales fixed by a calibration pass.
//! A [`MixedPrecisionPolicy`] keeps the edit layer's MLP matrices and the
//! value path in floating point.

use std::collections::{BTreeMap, BTreeSet};
use std::hash::{Hash, Hasher};

use serde::{Deserialize, Serialize};

use crate::model::{self, names, ModelBundle, ModelConfig, Precision, Site, SiteKind};
use crate::tensor::Tensor;
use crate::{Error, Result, TokenId};

pub const WEIGHT_QMAX: f64 = 127.0;
pub const ACT_QMAX: f64 = 32767.0;

/// Scales for every quantized tensor and activation site.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantSpec {
    pub weight_bits: u32,
    pub activation_bits: u32,
    pub per_tensor_scales: BTreeMap<String, f32>,
    pub activation_scales: BTreeMap<String, f32>,
}

impl QuantSpec {
    pub fn validate(&self) -> Result<()> {
        if self.weight_bits != 8 || self.activation_bits != 16 {
            return Err(Error::Config(format!(
                "only W8A16 is supported, got W{}A{}",
                self.weight_bits, self.activation_bits
            )));
        }
        for (name, s) in self.per_tensor_scales.iter().chain(&self.activation_scales) {
            check_scale(name, *s)?;
        }
        Ok(())
    }
}

fn check_scale(name: &str, s: f32) -> Result<()> {
    if s > 0.0 && s.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!("scale for {name} must be positive and finite, got {s}")))
    }
}

/// Which tensors and activation sites stay in floating point.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MixedPrecisionPolicy {
    pub edit_layer: usize,
    pub fp_tensors: BTreeSet<String>,
    pub fp_sites: BTreeSet<String>,
}

impl MixedPrecisionPolicy {
    /// The edit layer's up- and down-projection in f32, and its MLP
    /// activation and output sites unquantized.
    pub fn for_edit_layer(edit_layer: usize) -> Self {
        MixedPrecisionPolicy {
            edit_layer,
            fp_tensors: [names::up_proj(edit_layer), names::down_proj(edit_layer)].into(),
            fp_sites: [
                Site::Layer(edit_layer, SiteKind::MlpAct).name(),
                Site::Layer(edit_layer, SiteKind::MlpOut).name(),
            ]
            .into(),
        }
    }

    /// Keeps everything in floating point.
    pub fn all_fp(config: &ModelConfig, edit_layer: usize) -> Self {
        MixedPrecisionPolicy {
            edit_layer,
            fp_tensors: config.tensor_shapes().into_iter().map(|(n, _)| n).collect(),
            fp_sites: config.sites().iter().map(Site::name).collect(),
        }
    }

    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        config.check_layer(self.edit_layer)?;
        if self.fp_tensors.is_empty() {
            return Err(Error::Config("mixed-precision policy keeps no tensor in f32".into()));
        }
        let known: BTreeSet<String> = config.tensor_shapes().into_iter().map(|(n, _)| n).collect();
        if let Some(bad) = self.fp_tensors.iter().find(|n| !known.contains(*n)) {
            return Err(Error::Config(format!("policy names unknown tensor {bad}")));
        }
        let sites: BTreeSet<String> = config.sites().iter().map(Site::name).collect();
        if let Some(bad) = self.fp_sites.iter().find(|n| !sites.contains(*n)) {
            return Err(Error::Config(format!("policy names unknown site {bad}")));
        }
        Ok(())
    }
}

/// Quantization state carried by a mixed-quantized bundle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantState {
    pub policy: MixedPrecisionPolicy,
    pub activation_scales: BTreeMap<String, f32>,
}

impl QuantState {
    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        self.policy.validate(config)?;
        for site in config.sites() {
            let name = site.name();
            if self.policy.fp_sites.contains(&name) {
                continue;
            }
            let s = self
                .activation_scales
                .get(&name)
                .ok_or_else(|| Error::Config(format!("missing activation scale for site {name}")))?;
            check_scale(&name, *s)?;
        }
        Ok(())
    }
}

/// Running per-site max-abs activation values.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CalibrationStats {
    pub site_max_abs: BTreeMap<String, f64>,
    pub sample_count: usize,
}

impl CalibrationStats {
    /// Adds one sequence. The model must be full precision.
    pub fn observe(&mut self, model: &ModelBundle, tokens: &[TokenId]) -> Result<()> {
        if model.precision() != Precision::Full {
            return Err(Error::Config("calibration needs a full-precision model".into()));
        }
        model::observe_site_ranges(model, tokens, &mut self.site_max_abs)?;
        self.sample_count += 1;
        Ok(())
    }

    /// Symmetric int16 scale per site, `max_abs / 32767`.
    pub fn activation_scales(&self) -> Result<BTreeMap<String, f32>> {
        if self.sample_count == 0 {
            return Err(Error::Config("no calibration samples".into()));
        }
        Ok(self.site_max_abs.iter().map(|(k, &m)| (k.clone(), symmetric_scale(m, ACT_QMAX))).collect())
    }
}

/// Scale mapping `[-max_abs, max_abs]` onto `[-qmax, qmax]`, rounded up to
/// the next f32 so the range is always covered.
fn symmetric_scale(max_abs: f64, qmax: f64) -> f32 {
    if max_abs <= 0.0 || !max_abs.is_finite() {
        return 1.0;
    }
    let s = max_abs / qmax;
    let f = s as f32;
    if (f as f64) < s {
        f32::from_bits(f.to_bits() + 1)
    } else {
        f
    }
}

pub fn calibrate(model: &ModelBundle, corpus: &[Vec<TokenId>]) -> Result<CalibrationStats> {
    if corpus.is_empty() {
        return Err(Error::Input("calibration corpus is empty".into()));
    }
    let mut stats = CalibrationStats::default();
    for seq in corpus {
        stats.observe(model, seq)?;
    }
    Ok(stats)
}

/// Symmetric int8 quantization of `data` with a max-abs scale.
pub fn quantize_tensor(shape: Vec<usize>, data: &[f32]) -> Tensor {
    let max_abs = data.iter().fold(0.0f64, |m, &x| m.max((x as f64).abs()));
    quantize_with_scale(shape, data, symmetric_scale(max_abs, WEIGHT_QMAX))
}

fn quantize_with_scale(shape: Vec<usize>, data: &[f32], scale: f32) -> Tensor {
    let s = scale as f64;
    let q = data.iter().map(|&x| (x as f64 / s).round().clamp(-WEIGHT_QMAX, WEIGHT_QMAX) as i8).collect();
    Tensor::I8 { shape, data: q, scale }
}

/// Derives a [`QuantSpec`] from calibration stats and the model's weights.
pub fn derive_spec(model: &ModelBundle, stats: &CalibrationStats, policy: &MixedPrecisionPolicy) -> Result<QuantSpec> {
    let per_tensor_scales = model
        .tensors()
        .filter(|(n, _)| !policy.fp_tensors.contains(*n))
        .map(|(n, t)| {
            let data = t.as_f32().ok_or_else(|| Error::Config(format!("{n} is already quantized")))?;
            let max_abs = data.iter().fold(0.0f64, |m, &x| m.max((x as f64).abs()));
            Ok((n.to_string(), symmetric_scale(max_abs, WEIGHT_QMAX)))
        })
        .collect::<Result<_>>()?;
    let all = stats.activation_scales()?;
    let activation_scales = model
        .config()
        .sites()
        .iter()
        .map(Site::name)
        .filter(|n| !policy.fp_sites.contains(n))
        .filter_map(|n| all.get(&n).map(|s| (n, *s)))
        .collect();
    Ok(QuantSpec { weight_bits: 8, activation_bits: 16, per_tensor_scales, activation_scales })
}

/// Quantizes a full-precision model with explicit scales.
pub fn quantize_with_spec(model: &ModelBundle, spec: &QuantSpec, policy: &MixedPrecisionPolicy) -> Result<ModelBundle> {
    spec.validate()?;
    policy.validate(model.config())?;
    if model.precision() != Precision::Full {
        return Err(Error::Config("model is already quantized".into()));
    }
    let mut tensors = BTreeMap::new();
    for (name, t) in model.tensors() {
        let data = t.as_f32().expect("full-precision bundle");
        let out = if policy.fp_tensors.contains(name) {
            t.clone()
        } else {
            let scale = spec
                .per_tensor_scales
                .get(name)
                .ok_or_else(|| Error::Config(format!("missing scale for tensor {name}")))?;
            quantize_with_scale(t.shape().to_vec(), data, *scale)
        };
        tensors.insert(name.to_string(), out);
    }
    let state = QuantState { policy: policy.clone(), activation_scales: spec.activation_scales.clone() };
    ModelBundle::assemble(model.config().clone(), tensors, Precision::MixedQuantized, Some(state))
}

/// Calibrated W8A16 copy of `model` under `policy`.
pub fn quantize_model(
    model: &ModelBundle,
    stats: &CalibrationStats,
    policy: &MixedPrecisionPolicy,
) -> Result<ModelBundle> {
    let spec = derive_spec(model, stats, policy)?;
    quantize_with_spec(model, &spec, policy)
}

/// Largest `|dequant(quant(x)) - x|` over a tensor, with its scale.
pub fn round_trip_error(original: &Tensor, quantized: &Tensor) -> Option<(f64, f64)> {
    let scale = quantized.scale()? as f64;
    let orig = original.to_f64();
    let deq = quantized.to_f64();
    let err = orig.iter().zip(&deq).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    Some((err, scale))
}

/// Hash over every weight and activation scale of a bundle. Constant across
/// an edit run since quantization is static.
pub fn scale_fingerprint(model: &ModelBundle) -> u64 {
    let mut h = std::collections::hash_map::DefaultHasher::new();
    for (name, t) in model.tensors() {
        if let Some(s) = t.scale() {
            name.hash(&mut h);
            s.to_bits().hash(&mut h);
        }
    }
    if let Some(q) = model.quant() {
        for (name, s) in &q.activation_scales {
            name.hash(&mut h);
            s.to_bits().hash(&mut h);
        }
    }
    h.finish()
}

/// Matmul FLOPs of one forward pass, split by the precision of the weight
/// operand.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlopBreakdown {
    pub fp_linear_flops: u64,
    pub int_linear_flops: u64,
    /// Score and mixing products of attention, kept in floating point.
    pub attention_flops: u64,
    /// `fp_linear_flops` over all linear FLOPs.
    pub fp_fraction: f64,
}

pub fn flop_breakdown(model: &ModelBundle, seq_len: usize) -> FlopBreakdown {
    let cfg = model.config();
    let n = seq_len as u64;
    let (mut fp, mut int) = (0u64, 0u64);
    for (name, t) in model.tensors() {
        let matmul = name == names::UNEMBED || [".attn.", ".mlp."].iter().any(|p| name.contains(p));
        if !matmul {
            continue;
        }
        let flops = 2 * n * (t.shape()[0] * t.shape()[1]) as u64;
        if t.is_quantized() {
            int += flops;
        } else {
            fp += flops;
        }
    }
    let pairs = n * (n + 1) / 2;
    let attention_flops = 4 * pairs * (cfg.d_model * cfg.n_layers) as u64;
    FlopBreakdown {
        fp_linear_flops: fp,
        int_linear_flops: int,
        attention_flops,
        fp_fraction: fp as f64 / (fp + int).max(1) as f64,
    }
}

//! The compiled execution form of a [`ModelBundle`] and the instrumented
//! forward pass.
//!
//! All arithmetic runs in f64. Quantized tensors are kept as integer-valued
//! f64 matrices so that an int8 x int16 product accumulates exactly (every
//! partial sum stays far below 2^53) before being rescaled.

use std::collections::BTreeMap;

use ndarray::{s, Array1, Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use super::bundle::ModelBundle;
use super::config::{names, ModelConfig, Site, SiteKind};
use crate::telemetry;
use crate::tensor::Tensor;
use crate::{Error, Result, TokenId};

const ACT_QMAX: f64 = 32767.0;

#[derive(Debug)]
pub(crate) enum Linear {
    Float(Array2<f64>),
    Int { q: Array2<f64>, scale: f64 },
}

impl Linear {
    fn from_tensor(t: &Tensor) -> Self {
        let shape = (t.shape()[0], t.shape()[1]);
        match t {
            Tensor::F32 { data, .. } => Linear::Float(
                Array2::from_shape_vec(shape, data.iter().map(|&x| x as f64).collect())
                    .expect("shape checked at bundle construction"),
            ),
            Tensor::I8 { data, scale, .. } => Linear::Int {
                q: Array2::from_shape_vec(shape, data.iter().map(|&x| x as f64).collect())
                    .expect("shape checked at bundle construction"),
                scale: *scale as f64,
            },
        }
    }

    fn out_dim(&self) -> usize {
        match self {
            Linear::Float(w) | Linear::Int { q: w, .. } => w.nrows(),
        }
    }

    fn in_dim(&self) -> usize {
        match self {
            Linear::Float(w) | Linear::Int { q: w, .. } => w.ncols(),
        }
    }

    fn apply(&self, x: &Act) -> Array2<f64> {
        telemetry::record_flops(2 * (x.vals.nrows() * self.in_dim() * self.out_dim()) as u64);
        match (self, x.scale) {
            (Linear::Float(w), None) => x.vals.dot(&w.t()),
            (Linear::Float(w), Some(sa)) => (&x.vals * sa).dot(&w.t()),
            (Linear::Int { q, scale }, Some(sa)) => {
                let mut y = x.vals.dot(&q.t());
                y *= sa * scale;
                y
            }
            (Linear::Int { q, scale }, None) => {
                let mut y = x.vals.dot(&q.t());
                y *= *scale;
                y
            }
        }
    }
}

/// An activation, integer-valued with a scale when its site is quantized.
struct Act {
    vals: Array2<f64>,
    scale: Option<f64>,
}

impl Act {
    fn at_site(x: Array2<f64>, scale: Option<f64>) -> Act {
        match scale {
            None => Act { vals: x, scale: None },
            Some(s) => Act { vals: x.mapv(|v| (v / s).round().clamp(-ACT_QMAX, ACT_QMAX)), scale: Some(s) },
        }
    }

    fn dequant(self) -> Array2<f64> {
        match self.scale {
            None => self.vals,
            Some(s) => self.vals * s,
        }
    }

    fn row(&self, i: usize) -> Vec<f64> {
        let s = self.scale.unwrap_or(1.0);
        self.vals.row(i).iter().map(|&v| v * s).collect()
    }
}

#[derive(Debug)]
struct Norm {
    gain: Array1<f64>,
    bias: Array1<f64>,
}

impl Norm {
    fn apply(&self, x: &Array2<f64>, eps: f64) -> Array2<f64> {
        let d = x.ncols() as f64;
        let mut out = Array2::zeros(x.raw_dim());
        for (row, mut o) in x.rows().into_iter().zip(out.rows_mut()) {
            let mean = row.sum() / d;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
            let inv = 1.0 / (var + eps).sqrt();
            for j in 0..row.len() {
                o[j] = (row[j] - mean) * inv * self.gain[j] + self.bias[j];
            }
        }
        out
    }
}

#[derive(Debug, Default, Clone, Copy)]
struct LayerSites {
    attn_in: Option<f64>,
    attn_ctx: Option<f64>,
    attn_out: Option<f64>,
    mlp_in: Option<f64>,
    mlp_act: Option<f64>,
    mlp_out: Option<f64>,
}

#[derive(Debug)]
pub(crate) struct Layer {
    ln1: Norm,
    pub(crate) wq: Linear,
    pub(crate) wk: Linear,
    pub(crate) wv: Linear,
    pub(crate) wo: Linear,
    ln2: Norm,
    pub(crate) up: Linear,
    pub(crate) down: Linear,
    sites: LayerSites,
}

#[derive(Debug)]
pub(crate) struct Compiled {
    pub(crate) config: ModelConfig,
    tok_emb: Array2<f64>,
    pos_emb: Array2<f64>,
    pub(crate) layers: Vec<Layer>,
    ln_f: Norm,
    pub(crate) unembed: Linear,
    final_in: Option<f64>,
}

fn vec1(t: &Tensor) -> Array1<f64> {
    Array1::from_vec(t.to_f64())
}

fn mat(t: &Tensor) -> Array2<f64> {
    Array2::from_shape_vec((t.shape()[0], t.shape()[1]), t.to_f64()).expect("shape checked at bundle construction")
}

impl Compiled {
    pub(crate) fn build(bundle: &ModelBundle) -> Result<Self> {
        let t = bundle.tensor_map();
        let get = |name: &str| -> &Tensor { t[name].as_ref() };
        let config = bundle.config().clone();
        let mut scales: BTreeMap<String, f64> = BTreeMap::new();
        if let Some(q) = bundle.quant() {
            for site in config.sites() {
                let name = site.name();
                if q.policy.fp_sites.contains(&name) {
                    continue;
                }
                let s = q
                    .activation_scales
                    .get(&name)
                    .ok_or_else(|| Error::Config(format!("missing activation scale for site {name}")))?;
                scales.insert(name, *s as f64);
            }
        }
        let site = |s: Site| scales.get(&s.name()).copied();
        let layers = (0..config.n_layers)
            .map(|l| Layer {
                ln1: Norm { gain: vec1(get(&names::ln1_gain(l))), bias: vec1(get(&names::ln1_bias(l))) },
                wq: Linear::from_tensor(get(&names::wq(l))),
                wk: Linear::from_tensor(get(&names::wk(l))),
                wv: Linear::from_tensor(get(&names::wv(l))),
                wo: Linear::from_tensor(get(&names::wo(l))),
                ln2: Norm { gain: vec1(get(&names::ln2_gain(l))), bias: vec1(get(&names::ln2_bias(l))) },
                up: Linear::from_tensor(get(&names::up_proj(l))),
                down: Linear::from_tensor(get(&names::down_proj(l))),
                sites: LayerSites {
                    attn_in: site(Site::Layer(l, SiteKind::AttnIn)),
                    attn_ctx: site(Site::Layer(l, SiteKind::AttnCtx)),
                    attn_out: site(Site::Layer(l, SiteKind::AttnOut)),
                    mlp_in: site(Site::Layer(l, SiteKind::MlpIn)),
                    mlp_act: site(Site::Layer(l, SiteKind::MlpAct)),
                    mlp_out: site(Site::Layer(l, SiteKind::MlpOut)),
                },
            })
            .collect();
        Ok(Compiled {
            tok_emb: mat(get(names::TOK_EMB)),
            pos_emb: mat(get(names::POS_EMB)),
            layers,
            ln_f: Norm { gain: vec1(get(names::LNF_GAIN)), bias: vec1(get(names::LNF_BIAS)) },
            unembed: Linear::from_tensor(get(names::UNEMBED)),
            final_in: site(Site::FinalIn),
            config,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TapSite {
    /// GELU output of the MLP (length `d_mlp`): the key space.
    MlpPostActivation,
    /// MLP block output before the residual addition (length `d_model`).
    MlpOutput,
    /// Concatenated q, k and v projections (length `3 * d_model`).
    AttentionQkv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TapPosition {
    Index(usize),
    /// Final token of the subject span `[start, end)`.
    LastSubjectToken {
        start: usize,
        end: usize,
    },
}

impl TapPosition {
    fn resolve(&self) -> Result<usize> {
        match *self {
            TapPosition::Index(i) => Ok(i),
            TapPosition::LastSubjectToken { start, end } => {
                if end <= start {
                    return Err(Error::Input(format!("empty subject span {start}..{end}")));
                }
                Ok(end - 1)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TapRequest {
    pub layer: usize,
    pub site: TapSite,
    pub position: TapPosition,
}

/// Replaces the MLP block output at `(layer, position)` before it is added
/// to the residual stream.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueOverride {
    pub layer: usize,
    pub position: usize,
    pub vector: Vec<f64>,
}

/// Attention keys and values of a fixed token prefix.
#[derive(Debug, Clone)]
pub struct PrefixCache {
    tokens: Vec<TokenId>,
    keys: Vec<Array2<f64>>,
    values: Vec<Array2<f64>>,
    model_id: u64,
    build_step: usize,
    valid: bool,
}

impl PrefixCache {
    /// First position not covered by the cache.
    pub fn boundary(&self) -> usize {
        self.tokens.len()
    }

    pub fn tokens(&self) -> &[TokenId] {
        &self.tokens
    }

    pub fn build_step(&self) -> usize {
        self.build_step
    }

    pub fn set_build_step(&mut self, step: usize) {
        self.build_step = step;
    }

    pub fn is_valid(&self) -> bool {
        self.valid
    }

    pub fn invalidate(&mut self) {
        self.valid = false;
    }

    fn check(&self, model: &ModelBundle, tokens: &[TokenId]) -> Result<()> {
        if !self.valid {
            return Err(Error::CacheInvalid("cache was invalidated".into()));
        }
        if self.model_id != model.id() {
            return Err(Error::CacheInvalid("cache was built for a different model".into()));
        }
        let b = self.boundary();
        if tokens.len() <= b {
            return Err(Error::Input(format!(
                "sequence of length {} has no tokens past the cached prefix of {b}",
                tokens.len()
            )));
        }
        if tokens[..b] != self.tokens[..] {
            return Err(Error::CacheInvalid("sequence prefix differs from the cached tokens".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// Logits for positions `first_position..`, one row per position.
    pub logits: Array2<f64>,
    pub first_position: usize,
    /// Tapped vectors in request order.
    pub tapped: Vec<(TapRequest, Vec<f64>)>,
}

impl ForwardOutput {
    pub fn logits_at(&self, position: usize) -> Option<ArrayView1<'_, f64>> {
        position.checked_sub(self.first_position).filter(|&i| i < self.logits.nrows()).map(|i| self.logits.row(i))
    }

    pub fn last_logits(&self) -> ArrayView1<'_, f64> {
        self.logits.row(self.logits.nrows() - 1)
    }

    pub fn tap(&self, request: &TapRequest) -> Option<&[f64]> {
        self.tapped.iter().find(|(r, _)| r == request).map(|(_, v)| v.as_slice())
    }
}

/// Runs the model over `tokens`.
///
/// With a cache, positions below `cache.boundary()` are not recomputed and
/// logits are returned only for the remaining positions. Taps and the
/// override must then address uncached positions.
pub fn forward(
    model: &ModelBundle,
    tokens: &[TokenId],
    taps: &[TapRequest],
    value_override: Option<&ValueOverride>,
    cache: Option<&PrefixCache>,
) -> Result<ForwardOutput> {
    let c = model.compiled()?;
    validate_tokens(&c.config, tokens)?;
    if let Some(cache) = cache {
        cache.check(model, tokens)?;
    }
    let start = cache.map_or(0, |c| c.boundary());
    let mut resolved = Vec::with_capacity(taps.len());
    for tap in taps {
        c.config.check_layer(tap.layer)?;
        let pos = tap.position.resolve()?;
        if pos >= tokens.len() {
            return Err(Error::Input(format!("tap position {pos} beyond sequence length {}", tokens.len())));
        }
        if pos < start {
            return Err(Error::Input(format!("tap position {pos} lies inside the cached prefix")));
        }
        resolved.push(pos);
    }
    if let Some(o) = value_override {
        c.config.check_layer(o.layer)?;
        if o.vector.len() != c.config.d_model {
            return Err(Error::Config(format!(
                "override vector has length {}, expected {}",
                o.vector.len(),
                c.config.d_model
            )));
        }
        if o.position >= tokens.len() || o.position < start {
            return Err(Error::Input(format!(
                "override position {} outside computed range {start}..{}",
                o.position,
                tokens.len()
            )));
        }
    }
    let run = run(c, tokens, start, cache, Some((taps, &resolved)), value_override, false, true, None)?;
    telemetry::record_forward();
    Ok(ForwardOutput {
        logits: run.logits.expect("logits requested"),
        first_position: start,
        tapped: taps.iter().copied().zip(run.tapped).collect(),
    })
}

/// Computes and stores the attention keys/values for `prefix`.
pub fn build_prefix_cache(model: &ModelBundle, prefix: &[TokenId]) -> Result<PrefixCache> {
    let c = model.compiled()?;
    if prefix.is_empty() {
        return Err(Error::Input("prefix must not be empty".into()));
    }
    validate_tokens(&c.config, prefix)?;
    let run = run(c, prefix, 0, None, None, None, true, false, None)?;
    telemetry::record_forward();
    let (keys, values) = run.kv.expect("kv requested").into_iter().unzip();
    Ok(PrefixCache { tokens: prefix.to_vec(), keys, values, model_id: model.id(), build_step: 0, valid: true })
}

/// Runs `tokens` through the model and raises `ranges[site]` to the largest
/// absolute pre-quantization activation seen at every site.
pub(crate) fn observe_site_ranges(
    model: &ModelBundle,
    tokens: &[TokenId],
    ranges: &mut BTreeMap<String, f64>,
) -> Result<()> {
    let c = model.compiled()?;
    validate_tokens(&c.config, tokens)?;
    run(c, tokens, 0, None, None, None, false, true, Some(ranges))?;
    telemetry::record_forward();
    Ok(())
}

fn validate_tokens(config: &ModelConfig, tokens: &[TokenId]) -> Result<()> {
    if tokens.is_empty() {
        return Err(Error::Input("token sequence is empty".into()));
    }
    if tokens.len() > config.max_seq_len {
        return Err(Error::Input(format!(
            "sequence length {} exceeds max_seq_len {}",
            tokens.len(),
            config.max_seq_len
        )));
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= config.vocab_size) {
        return Err(Error::Input(format!("token {bad} outside vocabulary of {}", config.vocab_size)));
    }
    Ok(())
}

struct RunOutput {
    logits: Option<Array2<f64>>,
    tapped: Vec<Vec<f64>>,
    kv: Option<Vec<(Array2<f64>, Array2<f64>)>>,
}

fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn check_finite(x: &Array2<f64>, layer: usize, what: &str) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric { layer: Some(layer), what: what.into() })
    }
}

/// Causal multi-head attention for queries at absolute positions
/// `start..start + q.nrows()` over keys `0..start + q.nrows()`.
fn attention(q: &Array2<f64>, keys: &Array2<f64>, values: &Array2<f64>, start: usize, n_heads: usize) -> Array2<f64> {
    let (n, d) = q.dim();
    let hd = d / n_heads;
    let inv_sqrt = 1.0 / (hd as f64).sqrt();
    let mut ctx = Array2::zeros((n, d));
    let mut scores = vec![0.0f64; keys.nrows()];
    for h in 0..n_heads {
        let cols = h * hd..(h + 1) * hd;
        for i in 0..n {
            let qi = q.slice(s![i, cols.clone()]);
            let visible = start + i + 1;
            let mut max = f64::NEG_INFINITY;
            for (j, score) in scores.iter_mut().enumerate().take(visible) {
                let kj = keys.slice(s![j, cols.clone()]);
                *score = qi.dot(&kj) * inv_sqrt;
                max = max.max(*score);
            }
            let mut denom = 0.0;
            for score in scores.iter_mut().take(visible) {
                *score = (*score - max).exp();
                denom += *score;
            }
            let mut out = ctx.slice_mut(s![i, cols.clone()]);
            for (j, score) in scores.iter().enumerate().take(visible) {
                let w = score / denom;
                out.scaled_add(w, &values.slice(s![j, cols.clone()]));
            }
        }
    }
    let pairs: usize = (0..n).map(|i| start + i + 1).sum();
    telemetry::record_flops(4 * (pairs * d) as u64);
    ctx
}

#[allow(clippy::too_many_arguments)]
fn run(
    c: &Compiled,
    tokens: &[TokenId],
    start: usize,
    cache: Option<&PrefixCache>,
    taps: Option<(&[TapRequest], &[usize])>,
    value_override: Option<&ValueOverride>,
    collect_kv: bool,
    want_logits: bool,
    mut ranges: Option<&mut BTreeMap<String, f64>>,
) -> Result<RunOutput> {
    let cfg = &c.config;
    let n = tokens.len() - start;
    let eps = cfg.norm_epsilon;
    let mut x = Array2::<f64>::zeros((n, cfg.d_model));
    for (i, mut row) in x.rows_mut().into_iter().enumerate() {
        let pos = start + i;
        row.assign(&c.tok_emb.row(tokens[pos] as usize));
        row += &c.pos_emb.row(pos);
    }
    let (tap_reqs, tap_pos) = taps.unwrap_or((&[], &[]));
    let mut tapped = vec![Vec::new(); tap_reqs.len()];
    let mut kv = collect_kv.then(Vec::new);
    let mut observe = |site: Site, x: &Array2<f64>| {
        if let Some(r) = ranges.as_deref_mut() {
            let m = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let e = r.entry(site.name()).or_insert(0.0);
            *e = e.max(m);
        }
    };

    for (l, layer) in c.layers.iter().enumerate() {
        let sites = layer.sites;
        let a1 = layer.ln1.apply(&x, eps);
        observe(Site::Layer(l, SiteKind::AttnIn), &a1);
        let a1 = Act::at_site(a1, sites.attn_in);
        let q = layer.wq.apply(&a1);
        let k = layer.wk.apply(&a1);
        let v = layer.wv.apply(&a1);
        let ctx = match cache {
            Some(cache) => {
                let keys = ndarray::concatenate(Axis(0), &[cache.keys[l].view(), k.view()]).expect("matching widths");
                let values =
                    ndarray::concatenate(Axis(0), &[cache.values[l].view(), v.view()]).expect("matching widths");
                attention(&q, &keys, &values, start, cfg.n_heads)
            }
            None => attention(&q, &k, &v, 0, cfg.n_heads),
        };
        observe(Site::Layer(l, SiteKind::AttnCtx), &ctx);
        let ctx = Act::at_site(ctx, sites.attn_ctx);
        let o = layer.wo.apply(&ctx);
        observe(Site::Layer(l, SiteKind::AttnOut), &o);
        let o = Act::at_site(o, sites.attn_out).dequant();
        x += &o;

        let a2 = layer.ln2.apply(&x, eps);
        observe(Site::Layer(l, SiteKind::MlpIn), &a2);
        let a2 = Act::at_site(a2, sites.mlp_in);
        let act = layer.up.apply(&a2).mapv(gelu);
        observe(Site::Layer(l, SiteKind::MlpAct), &act);
        let act = Act::at_site(act, sites.mlp_act);
        let m = layer.down.apply(&act);
        observe(Site::Layer(l, SiteKind::MlpOut), &m);
        let mut m = Act::at_site(m, sites.mlp_out).dequant();
        if let Some(ov) = value_override.filter(|o| o.layer == l) {
            m.row_mut(ov.position - start).assign(&ArrayView1::from(ov.vector.as_slice()));
        }
        x += &m;
        check_finite(&x, l, "residual stream")?;

        for ((req, &pos), slot) in tap_reqs.iter().zip(tap_pos).zip(tapped.iter_mut()) {
            if req.layer != l {
                continue;
            }
            let i = pos - start;
            *slot = match req.site {
                TapSite::MlpPostActivation => act.row(i),
                TapSite::MlpOutput => m.row(i).to_vec(),
                TapSite::AttentionQkv => {
                    q.row(i).iter().chain(k.row(i).iter()).chain(v.row(i).iter()).copied().collect()
                }
            };
        }
        if let Some(kv) = kv.as_mut() {
            kv.push((k, v));
        }
    }

    let logits = if want_logits {
        let f = c.ln_f.apply(&x, eps);
        observe(Site::FinalIn, &f);
        let f = Act::at_site(f, c.final_in);
        let logits = c.unembed.apply(&f);
        check_finite(&logits, cfg.n_layers - 1, "logits")?;
        Some(logits)
    } else {
        None
    };
    Ok(RunOutput { logits, tapped, kv })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::testutil::random_bundle;

    #[test]
    fn single_token_tap_has_d_mlp_entries() {
        let m = random_bundle(3);
        let tap = TapRequest { layer: 0, site: TapSite::MlpPostActivation, position: TapPosition::Index(0) };
        let out = forward(&m, &[4], &[tap], None, None).unwrap();
        assert_eq!(out.tap(&tap).unwrap().len(), m.config().d_mlp);
        assert_eq!(out.logits.dim(), (1, m.config().vocab_size));
        assert!(out.logits.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn cached_forward_matches_uncached() {
        let m = random_bundle(5);
        let tokens = [1, 5, 2, 9, 3, 7, 7, 0];
        let full = forward(&m, &tokens, &[], None, None).unwrap();
        for k in 1..tokens.len() {
            let cache = build_prefix_cache(&m, &tokens[..k]).unwrap();
            assert_eq!(cache.boundary(), k);
            let cached = forward(&m, &tokens, &[], None, Some(&cache)).unwrap();
            for pos in k..tokens.len() {
                let a = full.logits_at(pos).unwrap();
                let b = cached.logits_at(pos).unwrap();
                let diff = a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
                assert!(diff <= 1e-6, "k={k} pos={pos} diff={diff}");
            }
            assert!(cached.logits_at(k - 1).is_none());
        }
    }

    #[test]
    fn override_leaves_earlier_positions_untouched() {
        let m = random_bundle(7);
        let tokens = [3, 1, 4, 1, 5, 9];
        let base = forward(&m, &tokens, &[], None, None).unwrap();
        let ov = ValueOverride { layer: 1, position: 3, vector: vec![2.5; m.config().d_model] };
        let edited = forward(&m, &tokens, &[], Some(&ov), None).unwrap();
        for pos in 0..3 {
            assert_eq!(base.logits_at(pos).unwrap(), edited.logits_at(pos).unwrap());
        }
        assert_ne!(base.logits_at(3).unwrap(), edited.logits_at(3).unwrap());
    }

    #[test]
    fn override_replaces_mlp_output() {
        let m = random_bundle(8);
        let tokens = [3, 1, 4];
        let tap = TapRequest { layer: 0, site: TapSite::MlpOutput, position: TapPosition::Index(2) };
        let v: Vec<f64> = (0..m.config().d_model).map(|i| i as f64 * 0.1 - 0.3).collect();
        let ov = ValueOverride { layer: 0, position: 2, vector: v.clone() };
        let out = forward(&m, &tokens, &[tap], Some(&ov), None).unwrap();
        assert_eq!(out.tap(&tap).unwrap(), v.as_slice());
    }

    #[test]
    fn altered_prefix_is_rejected() {
        let m = random_bundle(2);
        let cache = build_prefix_cache(&m, &[1, 2, 3, 4, 5]).unwrap();
        assert_eq!(cache.boundary(), 5);
        let err = forward(&m, &[1, 2, 0, 4, 5, 6], &[], None, Some(&cache)).unwrap_err();
        assert!(matches!(err, Error::CacheInvalid(_)), "{err}");
    }

    #[test]
    fn cache_from_other_model_or_invalidated_is_rejected() {
        let m = random_bundle(2);
        let other = random_bundle(2);
        let mut cache = build_prefix_cache(&m, &[1, 2]).unwrap();
        assert!(matches!(forward(&other, &[1, 2, 3], &[], None, Some(&cache)), Err(Error::CacheInvalid(_))));
        cache.invalidate();
        assert!(matches!(forward(&m, &[1, 2, 3], &[], None, Some(&cache)), Err(Error::CacheInvalid(_))));
    }

    #[test]
    fn rejects_bad_inputs() {
        let m = random_bundle(1);
        let cfg = m.config().clone();
        assert!(matches!(forward(&m, &[], &[], None, None), Err(Error::Input(_))));
        let long = vec![0; cfg.max_seq_len + 1];
        assert!(matches!(forward(&m, &long, &[], None, None), Err(Error::Input(_))));
        assert!(matches!(forward(&m, &[cfg.vocab_size as u32], &[], None, None), Err(Error::Input(_))));
        let ov = ValueOverride { layer: 0, position: 0, vector: vec![0.0; 3] };
        assert!(matches!(forward(&m, &[1], &[], Some(&ov), None), Err(Error::Config(_))));
        let tap = TapRequest { layer: 9, site: TapSite::MlpOutput, position: TapPosition::Index(0) };
        assert!(matches!(forward(&m, &[1], &[tap], None, None), Err(Error::Config(_))));
        assert!(matches!(build_prefix_cache(&m, &[]), Err(Error::Input(_))));
        assert!(matches!(build_prefix_cache(&m, &long), Err(Error::Input(_))));
    }

    #[test]
    fn non_finite_weights_report_layer() {
        use crate::tensor::Tensor;
        let m = random_bundle(1);
        let mut tensors: std::collections::BTreeMap<String, Tensor> =
            m.tensors().map(|(k, v)| (k.to_string(), v.clone())).collect();
        let name = names::down_proj(1);
        let shape = tensors[&name].shape().to_vec();
        let n = tensors[&name].len();
        tensors.insert(name, Tensor::f32(shape, vec![f32::NAN; n]).unwrap());
        let bad = ModelBundle::new(m.config().clone(), tensors).unwrap();
        match forward(&bad, &[1, 2], &[], None, None) {
            Err(Error::Numeric { layer: Some(1), .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn last_subject_token_resolves_to_span_end() {
        let m = random_bundle(4);
        let tokens = [1, 2, 3, 4];
        let a = TapRequest {
            layer: 1,
            site: TapSite::AttentionQkv,
            position: TapPosition::LastSubjectToken { start: 1, end: 3 },
        };
        let b = TapRequest { position: TapPosition::Index(2), ..a };
        let out = forward(&m, &tokens, &[a, b], None, None).unwrap();
        assert_eq!(out.tap(&a).unwrap().len(), 3 * m.config().d_model);
        assert_eq!(out.tap(&a), out.tap(&b));
    }
}

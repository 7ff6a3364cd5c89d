//! Reference next-token trainer with a self-contained reverse-mode pass.
//!
//! The trainer mirrors the inference engine's architecture exactly (pre-norm
//! blocks, tanh-approximated GELU, untied unembedding) so a trained bundle
//! behaves identically under [`crate::model::forward`]. Every backward pass
//! increments the global backward counter; the editor asserts that counter
//! does not move during an edit.

use std::collections::BTreeMap;

use ndarray::{s, Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::model::{names, ModelBundle, ModelConfig, Precision};
use crate::tensor::Tensor;
use crate::{telemetry, Error, Result, TokenId};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// Global gradient norm clip; 0 disables clipping.
    pub clip_norm: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { steps: 600, batch_size: 32, lr: 3e-3, beta1: 0.9, beta2: 0.999, clip_norm: 1.0, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub losses: Vec<f64>,
    pub initial_loss: f64,
    pub final_loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
struct LayerParams {
    ln1_g: Array1<f64>,
    ln1_b: Array1<f64>,
    wq: Array2<f64>,
    wk: Array2<f64>,
    wv: Array2<f64>,
    wo: Array2<f64>,
    ln2_g: Array1<f64>,
    ln2_b: Array1<f64>,
    up: Array2<f64>,
    down: Array2<f64>,
}

/// Model parameters in f64. Gradients and optimizer moments use the same
/// layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    config: ModelConfig,
    tok_emb: Array2<f64>,
    pos_emb: Array2<f64>,
    layers: Vec<LayerParams>,
    lnf_g: Array1<f64>,
    lnf_b: Array1<f64>,
    unembed: Array2<f64>,
}

fn mat_of(t: &Tensor) -> Array2<f64> {
    Array2::from_shape_vec((t.shape()[0], t.shape()[1]), t.to_f64()).expect("bundle shapes are validated")
}

fn vec_of(t: &Tensor) -> Array1<f64> {
    Array1::from_vec(t.to_f64())
}

impl Params {
    pub fn from_bundle(bundle: &ModelBundle) -> Result<Self> {
        if bundle.precision() != Precision::Full {
            return Err(Error::Config("training needs a full-precision bundle".into()));
        }
        let t = |n: &str| bundle.tensor(n).expect("bundle holds every named tensor");
        let layers = (0..bundle.config().n_layers)
            .map(|l| LayerParams {
                ln1_g: vec_of(t(&names::ln1_gain(l))),
                ln1_b: vec_of(t(&names::ln1_bias(l))),
                wq: mat_of(t(&names::wq(l))),
                wk: mat_of(t(&names::wk(l))),
                wv: mat_of(t(&names::wv(l))),
                wo: mat_of(t(&names::wo(l))),
                ln2_g: vec_of(t(&names::ln2_gain(l))),
                ln2_b: vec_of(t(&names::ln2_bias(l))),
                up: mat_of(t(&names::up_proj(l))),
                down: mat_of(t(&names::down_proj(l))),
            })
            .collect();
        Ok(Params {
            config: bundle.config().clone(),
            tok_emb: mat_of(t(names::TOK_EMB)),
            pos_emb: mat_of(t(names::POS_EMB)),
            layers,
            lnf_g: vec_of(t(names::LNF_GAIN)),
            lnf_b: vec_of(t(names::LNF_BIAS)),
            unembed: mat_of(t(names::UNEMBED)),
        })
    }

    pub fn to_bundle(&self) -> Result<ModelBundle> {
        fn f32s<'a>(it: impl Iterator<Item = &'a f64>) -> Vec<f32> {
            it.map(|&x| x as f32).collect()
        }
        let mut tensors = BTreeMap::new();
        let mut put_m = |name: String, a: &Array2<f64>| {
            tensors.insert(name, Tensor::F32 { shape: vec![a.nrows(), a.ncols()], data: f32s(a.iter()) });
        };
        put_m(names::TOK_EMB.into(), &self.tok_emb);
        put_m(names::POS_EMB.into(), &self.pos_emb);
        put_m(names::UNEMBED.into(), &self.unembed);
        for (l, p) in self.layers.iter().enumerate() {
            put_m(names::wq(l), &p.wq);
            put_m(names::wk(l), &p.wk);
            put_m(names::wv(l), &p.wv);
            put_m(names::wo(l), &p.wo);
            put_m(names::up_proj(l), &p.up);
            put_m(names::down_proj(l), &p.down);
        }
        let mut put_v = |name: String, a: &Array1<f64>| {
            tensors.insert(name, Tensor::F32 { shape: vec![a.len()], data: f32s(a.iter()) });
        };
        put_v(names::LNF_GAIN.into(), &self.lnf_g);
        put_v(names::LNF_BIAS.into(), &self.lnf_b);
        for (l, p) in self.layers.iter().enumerate() {
            put_v(names::ln1_gain(l), &p.ln1_g);
            put_v(names::ln1_bias(l), &p.ln1_b);
            put_v(names::ln2_gain(l), &p.ln2_g);
            put_v(names::ln2_bias(l), &p.ln2_b);
        }
        ModelBundle::new(self.config.clone(), tensors)
    }

    fn zeros_like(&self) -> Params {
        let mut z = self.clone();
        for s in z.slices_mut() {
            s.fill(0.0);
        }
        z
    }

    fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = vec![
            self.tok_emb.as_slice_mut().unwrap(),
            self.pos_emb.as_slice_mut().unwrap(),
            self.lnf_g.as_slice_mut().unwrap(),
            self.lnf_b.as_slice_mut().unwrap(),
            self.unembed.as_slice_mut().unwrap(),
        ];
        for p in &mut self.layers {
            out.push(p.ln1_g.as_slice_mut().unwrap());
            out.push(p.ln1_b.as_slice_mut().unwrap());
            out.push(p.wq.as_slice_mut().unwrap());
            out.push(p.wk.as_slice_mut().unwrap());
            out.push(p.wv.as_slice_mut().unwrap());
            out.push(p.wo.as_slice_mut().unwrap());
            out.push(p.ln2_g.as_slice_mut().unwrap());
            out.push(p.ln2_b.as_slice_mut().unwrap());
            out.push(p.up.as_slice_mut().unwrap());
            out.push(p.down.as_slice_mut().unwrap());
        }
        out
    }

    pub fn n_values(&self) -> usize {
        self.clone().slices_mut().iter().map(|s| s.len()).sum()
    }

    pub fn nbytes(&self) -> usize {
        self.n_values() * std::mem::size_of::<f64>()
    }
}

/// Bundle with scaled normal initialization: embeddings and input
/// projections at `1/sqrt(d)`, residual output projections further scaled
/// by `1/sqrt(2 n_layers)`.
pub fn init_bundle(config: &ModelConfig, seed: u64) -> Result<ModelBundle> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tensors = BTreeMap::new();
    let resid = (2.0 * config.n_layers as f64).sqrt();
    for (name, shape) in config.tensor_shapes() {
        let n: usize = shape.iter().product();
        let data: Vec<f32> = if name.ends_with(".gain") {
            vec![1.0; n]
        } else if name.ends_with(".bias") {
            vec![0.0; n]
        } else {
            let fan_in = shape[1] as f64;
            let mut std = 1.0 / fan_in.sqrt();
            if name.ends_with(".wo") || name.ends_with(".down") {
                std /= resid;
            }
            if name == names::POS_EMB {
                std *= 0.1;
            }
            let normal = Normal::new(0.0, std).expect("positive std");
            (0..n).map(|_| normal.sample(&mut rng) as f32).collect()
        };
        tensors.insert(name, Tensor::f32(shape, data)?);
    }
    ModelBundle::new(config.clone(), tensors)
}

const GELU_C: f64 = 0.797_884_560_802_865_4;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

struct NormTape {
    xhat: Array2<f64>,
    inv: Array1<f64>,
}

fn norm_forward(x: &Array2<f64>, g: &Array1<f64>, b: &Array1<f64>, eps: f64) -> (Array2<f64>, NormTape) {
    let d = x.ncols() as f64;
    let mut xhat = Array2::zeros(x.raw_dim());
    let mut inv = Array1::zeros(x.nrows());
    for (i, row) in x.rows().into_iter().enumerate() {
        let mean = row.sum() / d;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
        let iv = 1.0 / (var + eps).sqrt();
        inv[i] = iv;
        xhat.row_mut(i).assign(&row.mapv(|v| (v - mean) * iv));
    }
    let y = &xhat * g + b;
    (y, NormTape { xhat, inv })
}

fn norm_backward(
    dy: &Array2<f64>,
    t: &NormTape,
    g: &Array1<f64>,
    dg: &mut Array1<f64>,
    db: &mut Array1<f64>,
) -> Array2<f64> {
    *dg += &(dy * &t.xhat).sum_axis(Axis(0));
    *db += &dy.sum_axis(Axis(0));
    let dxhat = dy * g;
    let d = dy.ncols() as f64;
    let mut dx = Array2::zeros(dy.raw_dim());
    for i in 0..dy.nrows() {
        let r = dxhat.row(i);
        let xh = t.xhat.row(i);
        let s1 = r.sum();
        let s2 = r.dot(&xh);
        let iv = t.inv[i];
        dx.row_mut(i).assign(&((&r * d - s1 - &xh * s2) * (iv / d)));
    }
    dx
}

struct LayerTape {
    n1: NormTape,
    a1: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    /// Attention weights per (segment, head).
    probs: Vec<Array2<f64>>,
    ctx: Array2<f64>,
    n2: NormTape,
    a2: Array2<f64>,
    h: Array2<f64>,
    act: Array2<f64>,
}

impl LayerTape {
    fn nbytes(&self) -> usize {
        let mats = [
            &self.n1.xhat,
            &self.a1,
            &self.q,
            &self.k,
            &self.v,
            &self.ctx,
            &self.n2.xhat,
            &self.a2,
            &self.h,
            &self.act,
        ];
        let n: usize = mats.iter().map(|m| m.len()).sum::<usize>()
            + self.probs.iter().map(|p| p.len()).sum::<usize>()
            + self.n1.inv.len()
            + self.n2.inv.len();
        n * std::mem::size_of::<f64>()
    }
}

struct Tape {
    layers: Vec<LayerTape>,
    nf: NormTape,
    f: Array2<f64>,
    probs: Array2<f64>,
}

impl Tape {
    fn nbytes(&self) -> usize {
        self.layers.iter().map(LayerTape::nbytes).sum::<usize>()
            + (self.nf.xhat.len() + self.nf.inv.len() + self.f.len() + self.probs.len()) * std::mem::size_of::<f64>()
    }
}

/// Sequences stacked row-wise; attention stays within each segment.
struct Batch {
    tokens: Vec<TokenId>,
    positions: Vec<usize>,
    segments: Vec<(usize, usize)>,
    targets: Vec<Option<TokenId>>,
}

impl Batch {
    fn new(seqs: &[&Vec<TokenId>], config: &ModelConfig) -> Result<Self> {
        let mut b = Batch { tokens: Vec::new(), positions: Vec::new(), segments: Vec::new(), targets: Vec::new() };
        for s in seqs {
            if s.len() < 2 || s.len() > config.max_seq_len {
                return Err(Error::Input(format!("training sequence of length {} is unusable", s.len())));
            }
            if s.iter().any(|&t| t as usize >= config.vocab_size) {
                return Err(Error::Input("training token outside vocabulary".into()));
            }
            b.segments.push((b.tokens.len(), s.len()));
            b.tokens.extend_from_slice(s);
            b.positions.extend(0..s.len());
            b.targets.extend(s[1..].iter().map(|&t| Some(t)));
            b.targets.push(None);
        }
        Ok(b)
    }

    fn n_targets(&self) -> usize {
        self.targets.iter().filter(|t| t.is_some()).count()
    }
}

fn linear(x: &Array2<f64>, w: &Array2<f64>) -> Array2<f64> {
    x.dot(&w.t())
}

fn attention_forward(
    q: &Array2<f64>,
    k: &Array2<f64>,
    v: &Array2<f64>,
    segments: &[(usize, usize)],
    n_heads: usize,
) -> (Array2<f64>, Vec<Array2<f64>>) {
    let d = q.ncols();
    let hd = d / n_heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let mut ctx = Array2::zeros(q.raw_dim());
    let mut probs = Vec::with_capacity(segments.len() * n_heads);
    for &(start, len) in segments {
        for h in 0..n_heads {
            let cols = s![start..start + len, h * hd..(h + 1) * hd];
            let (qh, kh, vh) = (q.slice(cols), k.slice(cols), v.slice(cols));
            let mut p = qh.dot(&kh.t()) * scale;
            for i in 0..len {
                let mut row = p.row_mut(i);
                let max = row.iter().take(i + 1).fold(f64::NEG_INFINITY, |m, &x| m.max(x));
                let mut denom = 0.0;
                for j in 0..len {
                    row[j] = if j <= i { (row[j] - max).exp() } else { 0.0 };
                    denom += row[j];
                }
                row /= denom;
            }
            ctx.slice_mut(cols).assign(&p.dot(&vh));
            probs.push(p);
        }
    }
    (ctx, probs)
}

fn forward(p: &Params, batch: &Batch) -> (f64, Tape) {
    let cfg = &p.config;
    let eps = cfg.norm_epsilon;
    let n = batch.tokens.len();
    let mut x = Array2::<f64>::zeros((n, cfg.d_model));
    for i in 0..n {
        let mut row = x.row_mut(i);
        row.assign(&p.tok_emb.row(batch.tokens[i] as usize));
        row += &p.pos_emb.row(batch.positions[i]);
    }
    let mut layers = Vec::with_capacity(cfg.n_layers);
    for lp in &p.layers {
        let (a1, n1) = norm_forward(&x, &lp.ln1_g, &lp.ln1_b, eps);
        let q = linear(&a1, &lp.wq);
        let k = linear(&a1, &lp.wk);
        let v = linear(&a1, &lp.wv);
        let (ctx, probs) = attention_forward(&q, &k, &v, &batch.segments, cfg.n_heads);
        x += &linear(&ctx, &lp.wo);
        let (a2, n2) = norm_forward(&x, &lp.ln2_g, &lp.ln2_b, eps);
        let h = linear(&a2, &lp.up);
        let act = h.mapv(gelu);
        x += &linear(&act, &lp.down);
        layers.push(LayerTape { n1, a1, q, k, v, probs, ctx, n2, a2, h, act });
    }
    let (f, nf) = norm_forward(&x, &p.lnf_g, &p.lnf_b, eps);
    let mut probs = linear(&f, &p.unembed);
    let mut loss = 0.0;
    for (i, mut row) in probs.rows_mut().into_iter().enumerate() {
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
        row.mapv_inplace(|z| (z - max).exp());
        let sum = row.sum();
        row /= sum;
        if let Some(t) = batch.targets[i] {
            loss -= row[t as usize].ln();
        }
    }
    (loss / batch.n_targets() as f64, Tape { layers, nf, f, probs })
}

fn attention_backward(
    dctx: &Array2<f64>,
    t: &LayerTape,
    segments: &[(usize, usize)],
    n_heads: usize,
) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
    let d = dctx.ncols();
    let hd = d / n_heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let mut dq = Array2::zeros(dctx.raw_dim());
    let mut dk = Array2::zeros(dctx.raw_dim());
    let mut dv = Array2::zeros(dctx.raw_dim());
    let mut idx = 0;
    for &(start, len) in segments {
        for h in 0..n_heads {
            let cols = s![start..start + len, h * hd..(h + 1) * hd];
            let p = &t.probs[idx];
            idx += 1;
            let dc = dctx.slice(cols);
            dv.slice_mut(cols).assign(&p.t().dot(&dc));
            let dp = dc.dot(&t.v.slice(cols).t());
            let mut ds = &dp * p;
            for i in 0..len {
                let rowsum = ds.row(i).sum();
                for j in 0..=i {
                    ds[(i, j)] -= p[(i, j)] * rowsum;
                }
            }
            ds *= scale;
            dq.slice_mut(cols).assign(&ds.dot(&t.k.slice(cols)));
            dk.slice_mut(cols).assign(&ds.t().dot(&t.q.slice(cols)));
        }
    }
    (dq, dk, dv)
}

fn accumulate_linear(dw: &mut Array2<f64>, dy: &Array2<f64>, x: &Array2<f64>) {
    dw.zip_mut_with(&dy.t().dot(x), |a, b| *a += b);
}

fn backward(p: &Params, batch: &Batch, tape: &Tape, grads: &mut Params) {
    telemetry::record_backward();
    let cfg = &p.config;
    let nt = batch.n_targets() as f64;
    let mut dlogits = tape.probs.clone();
    for (i, mut row) in dlogits.rows_mut().into_iter().enumerate() {
        match batch.targets[i] {
            Some(t) => {
                row[t as usize] -= 1.0;
                row /= nt;
            }
            None => row.fill(0.0),
        }
    }
    accumulate_linear(&mut grads.unembed, &dlogits, &tape.f);
    let df = dlogits.dot(&p.unembed);
    let mut dx = norm_backward(&df, &tape.nf, &p.lnf_g, &mut grads.lnf_g, &mut grads.lnf_b);

    for (l, lp) in p.layers.iter().enumerate().rev() {
        let t = &tape.layers[l];
        let g = &mut grads.layers[l];
        // MLP block: x += down(gelu(up(ln2(x)))).
        accumulate_linear(&mut g.down, &dx, &t.act);
        let dact = dx.dot(&lp.down);
        let dh = &dact * &t.h.mapv(gelu_grad);
        accumulate_linear(&mut g.up, &dh, &t.a2);
        let da2 = dh.dot(&lp.up);
        dx += &norm_backward(&da2, &t.n2, &lp.ln2_g, &mut g.ln2_g, &mut g.ln2_b);
        // Attention block.
        accumulate_linear(&mut g.wo, &dx, &t.ctx);
        let dctx = dx.dot(&lp.wo);
        let (dq, dk, dv) = attention_backward(&dctx, t, &batch.segments, cfg.n_heads);
        accumulate_linear(&mut g.wq, &dq, &t.a1);
        accumulate_linear(&mut g.wk, &dk, &t.a1);
        accumulate_linear(&mut g.wv, &dv, &t.a1);
        let da1 = dq.dot(&lp.wq) + dk.dot(&lp.wk) + dv.dot(&lp.wv);
        dx += &norm_backward(&da1, &t.n1, &lp.ln1_g, &mut g.ln1_g, &mut g.ln1_b);
    }
    for i in 0..batch.tokens.len() {
        let row = dx.row(i);
        let mut te = grads.tok_emb.row_mut(batch.tokens[i] as usize);
        te += &row;
        let mut pe = grads.pos_emb.row_mut(batch.positions[i]);
        pe += &row;
    }
}

/// Reference trainer state: parameters, gradients and Adam moments.
pub struct Trainer {
    params: Params,
    grads: Params,
    m: Params,
    v: Params,
    t: u64,
    config: TrainConfig,
    /// Bytes held by the activation tape of the last step.
    pub last_tape_bytes: usize,
}

impl Trainer {
    pub fn new(bundle: &ModelBundle, config: TrainConfig) -> Result<Self> {
        let params = Params::from_bundle(bundle)?;
        let grads = params.zeros_like();
        Ok(Trainer { m: grads.clone(), v: grads.clone(), grads, params, t: 0, config, last_tape_bytes: 0 })
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    /// Bytes of parameters, gradients and both Adam moments.
    pub fn state_bytes(&self) -> usize {
        4 * self.params.nbytes()
    }

    /// Mean next-token loss over `seqs` without updating anything.
    pub fn loss(&self, seqs: &[Vec<TokenId>]) -> Result<f64> {
        let refs: Vec<&Vec<TokenId>> = seqs.iter().collect();
        let batch = Batch::new(&refs, &self.params.config)?;
        Ok(forward(&self.params, &batch).0)
    }

    /// One forward, backward and Adam update on `seqs`. Returns the loss
    /// before the update.
    pub fn step(&mut self, seqs: &[&Vec<TokenId>]) -> Result<f64> {
        let batch = Batch::new(seqs, &self.params.config)?;
        let (loss, tape) = forward(&self.params, &batch);
        self.last_tape_bytes = tape.nbytes();
        for s in self.grads.slices_mut() {
            s.fill(0.0);
        }
        backward(&self.params, &batch, &tape, &mut self.grads);
        drop(tape);
        self.adam();
        Ok(loss)
    }

    fn adam(&mut self) {
        let c = &self.config;
        self.t += 1;
        let mut gs = self.grads.slices_mut();
        let norm = gs.iter().flat_map(|s| s.iter()).map(|g| g * g).sum::<f64>().sqrt();
        let clip = if c.clip_norm > 0.0 && norm > c.clip_norm { c.clip_norm / norm } else { 1.0 };
        let b1t = 1.0 - c.beta1.powi(self.t as i32);
        let b2t = 1.0 - c.beta2.powi(self.t as i32);
        let ps = self.params.slices_mut();
        let ms = self.m.slices_mut();
        let vs = self.v.slices_mut();
        for (((p, g), m), v) in ps.into_iter().zip(gs.iter_mut()).zip(ms).zip(vs) {
            for i in 0..p.len() {
                let gi = g[i] * clip;
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * gi;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * gi * gi;
                p[i] -= c.lr * (m[i] / b1t) / ((v[i] / b2t).sqrt() + 1e-8);
            }
        }
    }
}

/// Trains `initial` on `corpus` for `config.steps` minibatch steps.
///
/// Batches are drawn by shuffling the corpus once per epoch. Fails with
/// [`Error::TrainingFailure`] if the final loss is not below the initial
/// loss.
pub fn train(
    initial: &ModelBundle,
    corpus: &[Vec<TokenId>],
    config: &TrainConfig,
) -> Result<(ModelBundle, TrainReport)> {
    if corpus.is_empty() {
        return Err(Error::Input("training corpus is empty".into()));
    }
    if config.steps == 0 {
        return Ok((initial.clone(), TrainReport { losses: Vec::new(), initial_loss: f64::NAN, final_loss: f64::NAN }));
    }
    let mut trainer = Trainer::new(initial, config.clone())?;
    let initial_loss = trainer.loss(corpus)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut cursor = order.len();
    let bs = config.batch_size.clamp(1, corpus.len());
    let mut losses = Vec::with_capacity(config.steps);
    for _ in 0..config.steps {
        if cursor + bs > order.len() {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let batch: Vec<&Vec<TokenId>> = order[cursor..cursor + bs].iter().map(|&i| &corpus[i]).collect();
        cursor += bs;
        losses.push(trainer.step(&batch)?);
    }
    let final_loss = trainer.loss(corpus)?;
    if !(final_loss < initial_loss) {
        return Err(Error::TrainingFailure { initial: initial_loss, last: final_loss });
    }
    Ok((trainer.params.to_bundle()?, TrainReport { losses, initial_loss, final_loss }))
}

/// Gradient of the mean loss over `seqs` at `bundle`, flattened in a fixed
/// parameter order. Exposed for gradient checking.
pub fn loss_and_gradient(bundle: &ModelBundle, seqs: &[Vec<TokenId>]) -> Result<(f64, Vec<f64>)> {
    let p = Params::from_bundle(bundle)?;
    let refs: Vec<&Vec<TokenId>> = seqs.iter().collect();
    let batch = Batch::new(&refs, &p.config)?;
    let (loss, tape) = forward(&p, &batch);
    let mut g = p.zeros_like();
    backward(&p, &batch, &tape, &mut g);
    Ok((loss, g.slices_mut().into_iter().flat_map(|s| s.iter().copied()).collect()))
}

/// Mean loss with parameter `index` (in [`loss_and_gradient`] order)
/// shifted by `h`.
pub fn loss_with_shift(bundle: &ModelBundle, seqs: &[Vec<TokenId>], index: usize, h: f64) -> Result<f64> {
    let mut p = Params::from_bundle(bundle)?;
    let mut left = index;
    for s in p.slices_mut() {
        if left < s.len() {
            s[left] += h;
            break;
        }
        left -= s.len();
    }
    let refs: Vec<&Vec<TokenId>> = seqs.iter().collect();
    let batch = Batch::new(&refs, &p.config)?;
    Ok(forward(&p, &batch).0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::testutil::tiny_config;
    use crate::model::{forward as engine_forward, log_softmax};

    fn seqs() -> Vec<Vec<TokenId>> {
        vec![vec![1, 4, 2, 9, 3], vec![5, 5, 0, 7], vec![2, 8]]
    }

    #[test]
    fn gradients_match_finite_differences() {
        let bundle = init_bundle(&tiny_config(), 3).unwrap();
        let (_, grad) = loss_and_gradient(&bundle, &seqs()).unwrap();
        let h = 1e-5;
        let n = grad.len();
        for idx in (0..n).step_by(7).chain([n - 1]) {
            let up = loss_with_shift(&bundle, &seqs(), idx, h).unwrap();
            let down = loss_with_shift(&bundle, &seqs(), idx, -h).unwrap();
            let fd = (up - down) / (2.0 * h);
            assert!((fd - grad[idx]).abs() <= 1e-6 + 1e-4 * fd.abs(), "param {idx}: fd {fd} vs {}", grad[idx]);
        }
    }

    #[test]
    fn trainer_forward_matches_engine() {
        let bundle = init_bundle(&tiny_config(), 4).unwrap();
        let p = Params::from_bundle(&bundle).unwrap();
        let seq = vec![1, 4, 2, 9, 3];
        let batch = Batch::new(&[&seq], &p.config).unwrap();
        let (_, tape) = forward(&p, &batch);
        let out = engine_forward(&bundle, &seq, &[], None, None).unwrap();
        for i in 0..seq.len() {
            let lp = log_softmax(out.logits.row(i));
            for (j, l) in lp.iter().enumerate() {
                assert!((l.exp() - tape.probs[(i, j)]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn zero_steps_returns_initial_bundle() {
        let bundle = init_bundle(&tiny_config(), 5).unwrap();
        let cfg = TrainConfig { steps: 0, ..Default::default() };
        let (out, _) = train(&bundle, &seqs(), &cfg).unwrap();
        assert_eq!(out.id(), bundle.id());
    }

    #[test]
    fn loss_decreases_and_counts_backward_passes() {
        let bundle = init_bundle(&tiny_config(), 6).unwrap();
        let before = telemetry::snapshot();
        let cfg = TrainConfig { steps: 40, batch_size: 3, lr: 1e-2, ..Default::default() };
        let (_, report) = train(&bundle, &seqs(), &cfg).unwrap();
        assert!(report.final_loss < report.initial_loss);
        assert_eq!(telemetry::snapshot().since(&before).backward_passes, 40);
    }

    #[test]
    fn export_round_trip() {
        let bundle = init_bundle(&tiny_config(), 7).unwrap();
        let back = Params::from_bundle(&bundle).unwrap().to_bundle().unwrap();
        for (name, t) in bundle.tensors() {
            assert_eq!(Some(t), back.tensor(name), "{name}");
        }
    }
}

use serde::{Deserialize, Serialize};

use crate::{Error, Result, TokenId};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub d_mlp: usize,
    pub n_heads: usize,
    pub vocab_size: usize,
    pub norm_epsilon: f64,
    pub max_seq_len: usize,
    /// Token prepended to every prompt by the editor and evaluator.
    #[serde(default)]
    pub bos_token: Option<TokenId>,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("d_mlp", self.d_mlp),
            ("n_heads", self.n_heads),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(self.norm_epsilon > 0.0 && self.norm_epsilon.is_finite()) {
            return Err(Error::Config("norm_epsilon must be positive".into()));
        }
        if let Some(b) = self.bos_token {
            if b as usize >= self.vocab_size {
                return Err(Error::Config(format!("bos token {b} outside vocab")));
            }
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn check_layer(&self, layer: usize) -> Result<()> {
        if layer >= self.n_layers {
            return Err(Error::Config(format!("layer {layer} out of range for {} layers", self.n_layers)));
        }
        Ok(())
    }

    /// Every tensor the model carries, with its shape. Matrices are stored
    /// `[out, in]`.
    pub fn tensor_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (d, m, v) = (self.d_model, self.d_mlp, self.vocab_size);
        let mut out =
            vec![(names::TOK_EMB.to_string(), vec![v, d]), (names::POS_EMB.to_string(), vec![self.max_seq_len, d])];
        for l in 0..self.n_layers {
            out.push((names::ln1_gain(l), vec![d]));
            out.push((names::ln1_bias(l), vec![d]));
            out.push((names::wq(l), vec![d, d]));
            out.push((names::wk(l), vec![d, d]));
            out.push((names::wv(l), vec![d, d]));
            out.push((names::wo(l), vec![d, d]));
            out.push((names::ln2_gain(l), vec![d]));
            out.push((names::ln2_bias(l), vec![d]));
            out.push((names::up_proj(l), vec![m, d]));
            out.push((names::down_proj(l), vec![d, m]));
        }
        out.push((names::LNF_GAIN.to_string(), vec![d]));
        out.push((names::LNF_BIAS.to_string(), vec![d]));
        out.push((names::UNEMBED.to_string(), vec![v, d]));
        out
    }

    pub fn n_params(&self) -> usize {
        self.tensor_shapes().iter().map(|(_, s)| s.iter().product::<usize>()).sum()
    }

    /// Every activation site that can carry a static quantization scale.
    pub fn sites(&self) -> Vec<Site> {
        let mut out = Vec::with_capacity(self.n_layers * SiteKind::ALL.len() + 1);
        for l in 0..self.n_layers {
            for kind in SiteKind::ALL {
                out.push(Site::Layer(l, kind));
            }
        }
        out.push(Site::FinalIn);
        out
    }
}

/// Activation sites at block boundaries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum SiteKind {
    /// Normalized input to the q/k/v projections.
    AttnIn,
    /// Attention context, input to the output projection.
    AttnCtx,
    /// Attention block output before the residual addition.
    AttnOut,
    /// Normalized input to the MLP up-projection.
    MlpIn,
    /// MLP post-activation, input to the down-projection.
    MlpAct,
    /// MLP block output before the residual addition.
    MlpOut,
}

impl SiteKind {
    pub const ALL: [SiteKind; 6] =
        [SiteKind::AttnIn, SiteKind::AttnCtx, SiteKind::AttnOut, SiteKind::MlpIn, SiteKind::MlpAct, SiteKind::MlpOut];

    fn as_str(self) -> &'static str {
        match self {
            SiteKind::AttnIn => "attn_in",
            SiteKind::AttnCtx => "attn_ctx",
            SiteKind::AttnOut => "attn_out",
            SiteKind::MlpIn => "mlp_in",
            SiteKind::MlpAct => "mlp_act",
            SiteKind::MlpOut => "mlp_out",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Site {
    Layer(usize, SiteKind),
    /// Normalized input to the unembedding.
    FinalIn,
}

impl Site {
    pub fn name(&self) -> String {
        match self {
            Site::Layer(l, k) => format!("layers.{l}.{}", k.as_str()),
            Site::FinalIn => "final_in".into(),
        }
    }
}

pub mod names {
    pub const TOK_EMB: &str = "tok_emb";
    pub const POS_EMB: &str = "pos_emb";
    pub const LNF_GAIN: &str = "ln_f.gain";
    pub const LNF_BIAS: &str = "ln_f.bias";
    pub const UNEMBED: &str = "unembed";

    pub fn ln1_gain(l: usize) -> String {
        format!("layers.{l}.ln1.gain")
    }
    pub fn ln1_bias(l: usize) -> String {
        format!("layers.{l}.ln1.bias")
    }
    pub fn wq(l: usize) -> String {
        format!("layers.{l}.attn.wq")
    }
    pub fn wk(l: usize) -> String {
        format!("layers.{l}.attn.wk")
    }
    pub fn wv(l: usize) -> String {
        format!("layers.{l}.attn.wv")
    }
    pub fn wo(l: usize) -> String {
        format!("layers.{l}.attn.wo")
    }
    pub fn ln2_gain(l: usize) -> String {
        format!("layers.{l}.ln2.gain")
    }
    pub fn ln2_bias(l: usize) -> String {
        format!("layers.{l}.ln2.bias")
    }
    pub fn up_proj(l: usize) -> String {
        format!("layers.{l}.mlp.up")
    }
    pub fn down_proj(l: usize) -> String {
        format!("layers.{l}.mlp.down")
    }
}

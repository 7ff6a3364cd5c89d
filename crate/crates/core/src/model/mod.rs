//! Minimal pre-norm decoder-only transformer with activation taps, value
//! overrides at MLP outputs and a prefix key/value cache.

mod bundle;
pub mod checkpoint;
mod config;
mod engine;
mod ops;

pub use bundle::{ModelBundle, Precision};
pub use config::{names, ModelConfig, Site, SiteKind};
pub(crate) use engine::observe_site_ranges;
pub use engine::{
    build_prefix_cache, forward, ForwardOutput, PrefixCache, TapPosition, TapRequest, TapSite, ValueOverride,
};
pub use ops::{argmax, greedy_decode, kl_divergence, log_prob, log_softmax, score_continuation, ContinuationScore};

#[cfg(test)]
pub(crate) mod testutil {
    use super::{ModelBundle, ModelConfig};

    pub(crate) fn tiny_config() -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            d_model: 8,
            d_mlp: 16,
            n_heads: 2,
            vocab_size: 11,
            norm_epsilon: 1e-5,
            max_seq_len: 16,
            bos_token: None,
        }
    }

    pub(crate) fn random_bundle(seed: u64) -> ModelBundle {
        ModelBundle::random(tiny_config(), seed, 0.5).unwrap()
    }
}

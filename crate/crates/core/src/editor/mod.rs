//! Forward-only locate-and-edit pipeline.
//!
//! A fact `(subject, prompt, target)` is written into the down-projection of
//! one MLP layer in two stages. First the key `k*` is the mean MLP
//! post-activation at the final subject token over a set of random prefixes.
//! Then a value vector `v` that makes the model emit the target is found by
//! zeroth-order optimization of the edit loss, and `W` is updated in closed
//! form so that `W k* = v*`.

mod covariance;
mod key;
pub mod linalg;
mod loss;
mod optimize;
mod pipeline;
mod prefixes;
mod rank_one;
mod request;
mod zo;

pub use covariance::{estimate_covariance, CovarianceEstimate};
pub use key::{compute_key, KeyVector};
pub use loss::{edit_loss, LossContext, LossValue};
pub use optimize::{
    initial_value, optimize_value, success_check, CacheStaleness, LrSchedule, StopReason, SuccessCheck, ValueState,
    ZOConfig,
};
pub use pipeline::{edit, predicted_forward_passes, EditReport};
pub use prefixes::{sample_prefixes, PrefixSet, PrefixSource};
pub use rank_one::{rank_one_update, RankOneResult};
pub use request::{EditRequest, LossRecord};
pub use zo::{direction_seed, zo_gradient, DirectionSample};

use crate::model::ModelConfig;
use crate::TokenId;

/// `[bos] + prefix + body`, with the offset at which `body` starts.
pub(crate) fn with_prefix(config: &ModelConfig, prefix: &[TokenId], body: &[TokenId]) -> (Vec<TokenId>, usize) {
    let mut out = Vec::with_capacity(1 + prefix.len() + body.len());
    out.extend(config.bos_token);
    out.extend_from_slice(prefix);
    let offset = out.len();
    out.extend_from_slice(body);
    (out, offset)
}

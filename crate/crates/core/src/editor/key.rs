use serde::{Deserialize, Serialize};

use super::{with_prefix, EditRequest, PrefixSet};
use crate::model::{forward, ModelBundle, TapPosition, TapRequest, TapSite};
use crate::{Error, Result};

/// Mean MLP post-activation at the final subject token.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeyVector {
    pub k_star: Vec<f64>,
    pub layer: usize,
    pub samples_used: usize,
}

/// Averages the edit-layer key over `[bos] + x_j + subject` for every prefix.
pub fn compute_key(model: &ModelBundle, request: &EditRequest, prefixes: &PrefixSet) -> Result<KeyVector> {
    let cfg = model.config();
    request.validate(cfg)?;
    let mut sum = vec![0.0; cfg.d_mlp];
    for prefix in &prefixes.prefixes {
        let (tokens, offset) = with_prefix(cfg, prefix, &request.subject);
        let tap = TapRequest {
            layer: request.edit_layer,
            site: TapSite::MlpPostActivation,
            position: TapPosition::LastSubjectToken { start: offset, end: tokens.len() },
        };
        let out = forward(model, &tokens, &[tap], None, None)?;
        let k = out.tap(&tap).expect("tap requested");
        for (s, x) in sum.iter_mut().zip(k) {
            *s += x;
        }
    }
    let n = prefixes.count() as f64;
    let k_star: Vec<f64> = sum.into_iter().map(|s| s / n).collect();
    if !k_star.iter().all(|x| x.is_finite()) {
        return Err(Error::Numeric { layer: Some(request.edit_layer), what: "key vector".into() });
    }
    Ok(KeyVector { k_star, layer: request.edit_layer, samples_used: prefixes.count() })
}

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use super::{with_prefix, EditRequest, PrefixSet};
use crate::model::{build_prefix_cache, forward, kl_divergence, log_prob, ModelBundle, PrefixCache, ValueOverride};
use crate::{Result, TokenId};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossValue {
    pub total: f64,
    pub nll: f64,
    pub kl: f64,
}

#[derive(Debug, Clone)]
struct Case {
    /// `[bos] + x_j`, the part shared by both prompts.
    prefix: Vec<TokenId>,
    /// `[bos] + x_j + p + target[..-1]`.
    fact: Vec<TokenId>,
    fact_subject: usize,
    /// Position whose logits predict `target[0]`.
    first_target: usize,
    /// `[bos] + x_j + p'`.
    preserve: Vec<TokenId>,
    preserve_subject: usize,
    reference: Array1<f64>,
    cache: Option<PrefixCache>,
}

/// Everything needed to evaluate the edit loss repeatedly for one request:
/// the tokenized prompts per prefix, the unedited model's distribution on
/// each preservation prompt, and optionally a prefix cache per prompt.
#[derive(Debug, Clone)]
pub struct LossContext {
    cases: Vec<Case>,
    target: Vec<TokenId>,
    layer: usize,
    kl_weight: f64,
}

impl LossContext {
    /// Tokenizes the prompts and runs one forward per prefix for the
    /// reference distribution.
    pub fn new(model: &ModelBundle, request: &EditRequest, prefixes: &PrefixSet, kl_weight: f64) -> Result<Self> {
        let cfg = model.config();
        request.validate(cfg)?;
        let fact_subject = request.subject_end(&request.fact_prompt).expect("validated") - 1;
        let preserve_subject = request.subject_end(&request.preservation_prompt).expect("validated") - 1;
        let mut body = request.fact_prompt.clone();
        body.extend_from_slice(&request.target[..request.target.len() - 1]);
        let mut cases = Vec::with_capacity(prefixes.count());
        for x in &prefixes.prefixes {
            let (fact, offset) = with_prefix(cfg, x, &body);
            let (preserve, _) = with_prefix(cfg, x, &request.preservation_prompt);
            let reference = forward(model, &preserve, &[], None, None)?.last_logits().to_owned();
            cases.push(Case {
                prefix: fact[..offset].to_vec(),
                fact_subject: offset + fact_subject,
                first_target: offset + request.fact_prompt.len() - 1,
                fact,
                preserve_subject: offset + preserve_subject,
                preserve,
                reference,
                cache: None,
            });
        }
        Ok(LossContext { cases, target: request.target.clone(), layer: request.edit_layer, kl_weight })
    }

    /// (Re)builds the prefix caches. Prefixes with no tokens get none.
    /// Returns the number of caches built.
    pub fn build_caches(&mut self, model: &ModelBundle, step: usize) -> Result<usize> {
        let mut built = 0;
        for case in &mut self.cases {
            case.cache = None;
            if case.prefix.is_empty() {
                continue;
            }
            let mut cache = build_prefix_cache(model, &case.prefix)?;
            cache.set_build_step(step);
            case.cache = Some(cache);
            built += 1;
        }
        Ok(built)
    }

    pub fn clear_caches(&mut self) {
        for case in &mut self.cases {
            case.cache = None;
        }
    }

    /// Total tokens and cached tokens over all prompts of one loss evaluation.
    pub fn token_counts(&self) -> (usize, usize) {
        let total = self.cases.iter().map(|c| c.fact.len() + c.preserve.len()).sum();
        let cached = self.cases.iter().map(|c| 2 * c.prefix.len()).sum();
        (total, cached)
    }

    /// Mean over prefixes of the target NLL plus the weighted KL drift.
    /// Runs two forwards per prefix.
    pub fn evaluate(&self, model: &ModelBundle, v: &[f64]) -> Result<LossValue> {
        let (mut nll, mut kl) = (0.0, 0.0);
        for case in &self.cases {
            let ov = ValueOverride { layer: self.layer, position: case.fact_subject, vector: v.to_vec() };
            let out = forward(model, &case.fact, &[], Some(&ov), case.cache.as_ref())?;
            for (i, &t) in self.target.iter().enumerate() {
                let logits = out.logits_at(case.first_target + i).expect("target positions are computed");
                nll -= log_prob(logits, t)?;
            }
            let ov = ValueOverride { position: case.preserve_subject, ..ov };
            let out = forward(model, &case.preserve, &[], Some(&ov), case.cache.as_ref())?;
            kl += kl_divergence(out.last_logits(), case.reference.view())?;
        }
        let n = self.cases.len() as f64;
        let (nll, kl) = (nll / n, kl / n);
        Ok(LossValue { total: nll + self.kl_weight * kl, nll, kl })
    }
}

/// One-shot edit loss. Builds a fresh [`LossContext`].
pub fn edit_loss(
    model: &ModelBundle,
    v: &[f64],
    request: &EditRequest,
    prefixes: &PrefixSet,
    kl_weight: f64,
) -> Result<LossValue> {
    LossContext::new(model, request, prefixes, kl_weight)?.evaluate(model, v)
}

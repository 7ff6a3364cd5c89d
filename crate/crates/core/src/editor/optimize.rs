use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::loss::LossContext;
use super::zo::estimate;
use super::{with_prefix, EditRequest, LossRecord, PrefixSet};
use crate::model::{argmax, forward, log_prob, ModelBundle, TapPosition, TapRequest, TapSite, ValueOverride};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrSchedule {
    Static {
        lr: f64,
    },
    /// Anneals from `lr_max` to `lr_min` over `horizon` steps, then holds.
    Cosine {
        lr_max: f64,
        lr_min: f64,
        horizon: usize,
    },
}

impl LrSchedule {
    /// Learning rate of step `step` (1-based).
    pub fn lr(&self, step: usize) -> f64 {
        match *self {
            LrSchedule::Static { lr } => lr,
            LrSchedule::Cosine { lr_max, lr_min, horizon } => {
                let t = (step.saturating_sub(1)).min(horizon) as f64 / horizon.max(1) as f64;
                lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (PI * t).cos())
            }
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match *self {
            LrSchedule::Static { lr } => lr > 0.0 && lr.is_finite(),
            LrSchedule::Cosine { lr_max, lr_min, horizon } => {
                lr_max.is_finite() && lr_min >= 0.0 && lr_max >= lr_min && lr_max > 0.0 && horizon >= 1
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid learning rate schedule {self:?}")))
        }
    }
}

/// The prefix cache is rebuilt when the loss has not dropped by `loss_delta`
/// over the last `window` steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CacheStaleness {
    pub loss_delta: f64,
    pub window: usize,
}

impl Default for CacheStaleness {
    fn default() -> Self {
        CacheStaleness { loss_delta: 1e-3, window: 3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ZOConfig {
    pub mu: f64,
    /// Scale `mu` by the norm of the initial value vector.
    pub mu_relative: bool,
    pub n_directions: usize,
    pub lr_schedule: LrSchedule,
    pub max_steps: usize,
    pub check_period: usize,
    pub success_threshold: f64,
    pub kl_weight: f64,
    pub cache_staleness: CacheStaleness,
    pub rng_seed: u64,
    /// Run the periodic success check and stop at the first success.
    pub early_stop: bool,
    /// Reuse prefix attention states across loss evaluations.
    pub prefix_cache: bool,
}

impl Default for ZOConfig {
    fn default() -> Self {
        ZOConfig {
            mu: 1e-3,
            mu_relative: true,
            n_directions: 5,
            lr_schedule: LrSchedule::Cosine { lr_max: 0.5, lr_min: 0.01, horizon: 300 },
            max_steps: 300,
            check_period: 20,
            success_threshold: 0.5,
            kl_weight: 1.0,
            cache_staleness: CacheStaleness::default(),
            rng_seed: 0,
            early_stop: true,
            prefix_cache: true,
        }
    }
}

impl ZOConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.mu > 0.0 && self.mu.is_finite()) {
            return Err(Error::Config(format!("mu must be positive, got {}", self.mu)));
        }
        if self.n_directions == 0 {
            return Err(Error::Config("n_directions must be at least 1".into()));
        }
        if self.check_period == 0 {
            return Err(Error::Config("check_period must be at least 1".into()));
        }
        if !(self.success_threshold > 0.0 && self.success_threshold < 1.0) {
            return Err(Error::Config(format!("success_threshold must lie in (0, 1), got {}", self.success_threshold)));
        }
        if !(self.kl_weight >= 0.0) {
            return Err(Error::Config("kl_weight must be nonnegative".into()));
        }
        if self.cache_staleness.window == 0 {
            return Err(Error::Config("cache staleness window must be at least 1".into()));
        }
        self.lr_schedule.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Success,
    /// Budget exhausted while the loss was still improving.
    MaxSteps,
    /// Budget exhausted and the loss over the last window is no better than
    /// at the first step.
    Plateau,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SuccessCheck {
    pub step: usize,
    pub success: bool,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueState {
    pub v: Vec<f64>,
    pub step: usize,
    pub loss_trace: Vec<LossRecord>,
    pub stop_reason: StopReason,
    pub checks: Vec<SuccessCheck>,
    /// Absolute perturbation scale actually used.
    pub mu: f64,
    /// Prefix caches built, counting every rebuild.
    pub cache_builds: usize,
    pub cache_rebuilds: usize,
}

/// Mean MLP output of the edit layer at the final subject token of
/// `[bos] + x_j + prompt`.
pub fn initial_value(model: &ModelBundle, request: &EditRequest, prefixes: &PrefixSet) -> Result<Vec<f64>> {
    let cfg = model.config();
    request.validate(cfg)?;
    let end = request.subject_end(&request.fact_prompt).expect("validated");
    let mut sum = vec![0.0; cfg.d_model];
    for x in &prefixes.prefixes {
        let (tokens, offset) = with_prefix(cfg, x, &request.fact_prompt);
        let tap = TapRequest {
            layer: request.edit_layer,
            site: TapSite::MlpOutput,
            position: TapPosition::Index(offset + end - 1),
        };
        let out = forward(model, &tokens, &[tap], None, None)?;
        for (s, x) in sum.iter_mut().zip(out.tap(&tap).expect("tap requested")) {
            *s += x;
        }
    }
    let n = prefixes.count() as f64;
    Ok(sum.into_iter().map(|s| s / n).collect())
}

/// Decodes the target after `[bos] + prompt` with `v` injected at the final
/// subject token. Success requires every target token to be the argmax and
/// the joint probability to reach `threshold`. One forward pass.
pub fn success_check(model: &ModelBundle, v: &[f64], request: &EditRequest, threshold: f64) -> Result<(bool, f64)> {
    let cfg = model.config();
    request.validate(cfg)?;
    let mut body = request.fact_prompt.clone();
    body.extend_from_slice(&request.target[..request.target.len() - 1]);
    let (tokens, offset) = with_prefix(cfg, &[], &body);
    let end = request.subject_end(&request.fact_prompt).expect("validated");
    let ov = ValueOverride { layer: request.edit_layer, position: offset + end - 1, vector: v.to_vec() };
    let out = forward(model, &tokens, &[], Some(&ov), None)?;
    let first = offset + request.fact_prompt.len() - 1;
    let mut all_argmax = true;
    let mut lp = 0.0;
    for (i, &t) in request.target.iter().enumerate() {
        let logits = out.logits.row(first + i);
        all_argmax &= argmax(logits) == t;
        lp += log_prob(logits, t)?;
    }
    let confidence = lp.exp();
    Ok((all_argmax && confidence >= threshold, confidence))
}

const DIVERGENCE_FACTOR: f64 = 10.0;
const DIVERGENCE_PATIENCE: usize = 10;

/// Zeroth-order descent on the edit loss.
///
/// Each step draws `n_directions` directions, evaluates the loss at
/// `v +- mu u_i` and moves `v` against the estimate. The recorded loss of a
/// step is the mean over those `2N` evaluations, so no extra forwards are
/// spent on bookkeeping.
pub fn optimize_value(
    model: &ModelBundle,
    request: &EditRequest,
    prefixes: &PrefixSet,
    config: &ZOConfig,
) -> Result<ValueState> {
    config.validate()?;
    let mut ctx = LossContext::new(model, request, prefixes, config.kl_weight)?;
    let mut v = initial_value(model, request, prefixes)?;
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mu = if config.mu_relative && norm > 0.0 { config.mu * norm } else { config.mu };

    let mut state = ValueState {
        v: Vec::new(),
        step: 0,
        loss_trace: Vec::new(),
        stop_reason: StopReason::MaxSteps,
        checks: Vec::new(),
        mu,
        cache_builds: 0,
        cache_rebuilds: 0,
    };
    let mut last_build = 0;
    let mut above = 0;
    for step in 1..=config.max_steps {
        if config.prefix_cache && step == 1 {
            state.cache_builds += ctx.build_caches(model, step)?;
            last_build = step;
        }
        let (g, mean) =
            estimate(|x| ctx.evaluate(model, x), &v, mu, config.n_directions, config.rng_seed, step as u64)?;
        let lr = config.lr_schedule.lr(step);
        for (vi, gi) in v.iter_mut().zip(&g) {
            *vi -= lr * gi;
        }
        if !v.iter().all(|x| x.is_finite()) {
            return Err(Error::Numeric {
                layer: Some(request.edit_layer),
                what: format!("value vector at step {step}"),
            });
        }
        state.step = step;
        state.loss_trace.push(LossRecord { step, total: mean.total, nll: mean.nll, kl: mean.kl });

        let initial = state.loss_trace[0].total;
        above = if mean.total > DIVERGENCE_FACTOR * initial { above + 1 } else { 0 };
        if above >= DIVERGENCE_PATIENCE {
            return Err(Error::Divergence { step, trace: state.loss_trace });
        }

        let w = config.cache_staleness.window;
        if config.prefix_cache && step - last_build >= w {
            let t = state.loss_trace.len() - 1;
            if state.loss_trace[t].total > state.loss_trace[t - w].total - config.cache_staleness.loss_delta {
                state.cache_builds += ctx.build_caches(model, step)?;
                state.cache_rebuilds += 1;
                last_build = step;
            }
        }

        if config.early_stop && step % config.check_period == 0 {
            let (success, confidence) = success_check(model, &v, request, config.success_threshold)?;
            state.checks.push(SuccessCheck { step, success, confidence });
            if success {
                state.stop_reason = StopReason::Success;
                break;
            }
        }
    }
    if state.stop_reason != StopReason::Success && !state.loss_trace.is_empty() {
        let w = config.cache_staleness.window.min(state.loss_trace.len());
        let tail = &state.loss_trace[state.loss_trace.len() - w..];
        let recent = tail.iter().map(|r| r.total).sum::<f64>() / w as f64;
        if recent >= state.loss_trace[0].total - config.cache_staleness.loss_delta {
            state.stop_reason = StopReason::Plateau;
        }
    }
    state.v = v;
    Ok(state)
}

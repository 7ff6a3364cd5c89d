use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use super::{
    compute_key, optimize_value, rank_one_update, success_check, CovarianceEstimate, EditRequest, LossRecord,
    PrefixSet, StopReason, SuccessCheck, ValueState, ZOConfig,
};
use crate::model::ModelBundle;
use crate::telemetry::{self, Counters};
use crate::{memtrack, quant, Error, Result};

/// Outcome of one edit. Contains no wall-clock values, so reruns with the
/// same seeds produce identical reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditReport {
    pub stop_reason: StopReason,
    pub steps: usize,
    pub loss_trace: Vec<LossRecord>,
    pub checks: Vec<SuccessCheck>,
    pub mu: f64,
    pub cache_builds: usize,
    pub cache_rebuilds: usize,
    pub counters: Counters,
    /// Forward passes implied by the configuration and the run's trace.
    pub predicted_forward_passes: u64,
    /// Peak tracked heap growth during the edit, when the tracking allocator
    /// is installed.
    pub peak_memory_bytes: Option<u64>,
    pub key_norm: f64,
    pub value_norm: f64,
    pub relative_residual: f64,
    /// Final value vector `v*`.
    pub value: Vec<f64>,
    /// Success check of the final value vector.
    pub success: bool,
    pub confidence: f64,
    pub scale_fingerprint: Option<u64>,
}

/// Forward passes of [`optimize_value`] plus key extraction: three per
/// prefix for setup (key, initial value, reference distribution), `4 n N`
/// per step, one per success check and one per cache built.
pub fn predicted_forward_passes(n_prefixes: usize, config: &ZOConfig, state: &ValueState) -> u64 {
    let n = n_prefixes as u64;
    3 * n
        + state.step as u64 * 4 * n * config.n_directions as u64
        + state.checks.len() as u64
        + state.cache_builds as u64
}

/// Key extraction, value optimization, rank-one update and installation.
///
/// A run that exhausts its budget still returns an edited model and a report;
/// `report.stop_reason` tells the two apart. With `max_steps == 0` the model
/// is returned unchanged.
pub fn edit(
    model: &ModelBundle,
    request: &EditRequest,
    prefixes: &PrefixSet,
    config: &ZOConfig,
    cov: &CovarianceEstimate,
) -> Result<(ModelBundle, EditReport)> {
    let before = telemetry::snapshot();
    let fingerprint = model.quant().map(|_| quant::scale_fingerprint(model));
    let (result, peak) = memtrack::measure(|| run(model, request, prefixes, config, cov));
    let (edited, state, key_norm, relative_residual) = result?;
    let counters = telemetry::snapshot().since(&before);
    if counters.backward_passes != 0 {
        return Err(Error::Instrumentation(format!("{} reverse-mode passes during an edit", counters.backward_passes)));
    }
    if let Some(f) = fingerprint {
        if quant::scale_fingerprint(&edited) != f {
            return Err(Error::Instrumentation("quantization scales changed during the edit".into()));
        }
    }
    let (success, confidence) = success_check(model, &state.v, request, config.success_threshold)?;
    let value_norm = state.v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let predicted = predicted_forward_passes(prefixes.count(), config, &state);
    let report = EditReport {
        stop_reason: state.stop_reason,
        steps: state.step,
        predicted_forward_passes: predicted,
        loss_trace: state.loss_trace,
        checks: state.checks,
        mu: state.mu,
        cache_builds: state.cache_builds,
        cache_rebuilds: state.cache_rebuilds,
        counters,
        peak_memory_bytes: memtrack::is_installed().then_some(peak),
        key_norm,
        value_norm,
        relative_residual,
        value: state.v,
        success,
        confidence,
        scale_fingerprint: fingerprint,
    };
    Ok((edited, report))
}

fn run(
    model: &ModelBundle,
    request: &EditRequest,
    prefixes: &PrefixSet,
    config: &ZOConfig,
    cov: &CovarianceEstimate,
) -> Result<(ModelBundle, ValueState, f64, f64)> {
    let key = compute_key(model, request, prefixes)?;
    let key_norm = key.k_star.iter().map(|x| x * x).sum::<f64>().sqrt();
    let state = optimize_value(model, request, prefixes, config)?;
    if state.step == 0 {
        return Ok((model.clone(), state, key_norm, 0.0));
    }
    let cfg = model.config();
    let w = model.down_proj(request.edit_layer)?;
    let w = ArrayView2::from_shape((cfg.d_model, cfg.d_mlp), &w).expect("down-projection shape");
    let r = rank_one_update(w, &key.k_star, &state.v, cov)?;
    let vn = state.v.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
    let edited = model.replace_downproj(request.edit_layer, &r.w_hat)?;
    Ok((edited, state, key_norm, r.residual_norm / vn))
}

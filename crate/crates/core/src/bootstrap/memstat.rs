//! Peak heap of a forward-only edit against one step of the reference
//! trainer on the same model.

use serde::{Deserialize, Serialize};

use super::{TrainConfig, Trainer};
use crate::editor::{edit, CovarianceEstimate, EditRequest, PrefixSet, ZOConfig};
use crate::model::ModelBundle;
use crate::{memtrack, Error, Result, TokenId};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryReport {
    /// False when no tracking allocator is installed; both peaks are then
    /// zero.
    pub tracked: bool,
    /// Compiling the model and running the edit.
    pub zo_peak_bytes: u64,
    pub zo_steps: usize,
    /// Building the trainer and taking one optimizer step.
    pub trainer_peak_bytes: u64,
    /// Parameters, gradients and both Adam moments.
    pub trainer_state_bytes: u64,
    /// Activations kept for the reverse pass.
    pub activation_bytes: u64,
    /// `activation_bytes / trainer_peak_bytes`.
    pub activation_share: f64,
    pub batch_size: usize,
}

/// Measures both sides on the calling thread. `batch` is the training batch
/// for the trainer step.
pub fn memory_comparison(
    model: &ModelBundle,
    request: &EditRequest,
    prefixes: &PrefixSet,
    zo: &ZOConfig,
    cov: &CovarianceEstimate,
    batch: &[Vec<TokenId>],
    train: &TrainConfig,
) -> Result<MemoryReport> {
    if batch.is_empty() {
        return Err(Error::Input("memory comparison needs a non-empty batch".into()));
    }
    let (zo_out, zo_peak) = memtrack::measure(|| -> Result<usize> {
        // A fresh bundle so the compiled engine is counted.
        let layer = request.edit_layer;
        let fresh = model.replace_downproj(layer, &model.down_proj(layer)?)?;
        let (_, report) = edit(&fresh, request, prefixes, zo, cov)?;
        Ok(report.steps)
    });
    let zo_steps = zo_out?;

    let refs: Vec<&Vec<TokenId>> = batch.iter().collect();
    let (train_out, trainer_peak) = memtrack::measure(|| -> Result<(usize, usize)> {
        let mut trainer = Trainer::new(model, train.clone())?;
        trainer.step(&refs)?;
        Ok((trainer.state_bytes(), trainer.last_tape_bytes))
    });
    let (state, tape) = train_out?;

    Ok(MemoryReport {
        tracked: memtrack::is_installed(),
        zo_peak_bytes: zo_peak,
        zo_steps,
        trainer_peak_bytes: trainer_peak,
        trainer_state_bytes: state as u64,
        activation_bytes: tape as u64,
        activation_share: if trainer_peak > 0 { tape as f64 / trainer_peak as f64 } else { 0.0 },
        batch_size: batch.len(),
    })
}

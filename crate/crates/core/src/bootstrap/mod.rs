//! Desk-scale subject models: a synthetic fact world, a reference trainer
//! and the checkpoint importer.

mod corpus;
mod memstat;
mod trainer;
mod vocab;

pub use crate::model::checkpoint::import_checkpoint;
pub use corpus::{generate_corpus, world_vocab, Relation, SyntheticFact, ToyCorpus, END, FILLERS, RELATIONS};
pub use memstat::{memory_comparison, MemoryReport};
pub use trainer::{init_bundle, loss_and_gradient, loss_with_shift, train, Params, TrainConfig, TrainReport, Trainer};
pub use vocab::{Vocab, BOS};

use serde::{Deserialize, Serialize};

use crate::editor::{
    estimate_covariance, sample_prefixes, with_prefix, CovarianceEstimate, LrSchedule, PrefixSet, PrefixSource,
    ZOConfig,
};
use crate::eval::EvalCase;
use crate::model::{greedy_decode, ModelBundle, ModelConfig};
use crate::{Result, TokenId};

/// Architecture of the toy subject model for a vocabulary.
pub fn toy_config(vocab: &Vocab) -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        d_model: 128,
        d_mlp: 256,
        n_heads: 4,
        vocab_size: vocab.len(),
        norm_epsilon: 1e-5,
        max_seq_len: 32,
        bos_token: vocab.bos(),
    }
}

/// Fraction of facts whose prompt greedily decodes to the object.
pub fn fact_recall(model: &ModelBundle, corpus: &ToyCorpus) -> Result<f64> {
    let mut hits = 0;
    for f in &corpus.facts {
        let prompt: Vec<TokenId> = corpus.vocab.encode(&f.prompt())?;
        let object = corpus.vocab.encode(&f.object)?;
        let (seq, _) = with_prefix(model.config(), &[], &prompt);
        hits += (greedy_decode(model, &seq, object.len(), None)? == object) as usize;
    }
    Ok(hits as f64 / corpus.facts.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyRecipe {
    pub n_facts: usize,
    pub corpus_seed: u64,
    pub init_seed: u64,
    pub train: TrainConfig,
}

impl Default for ToyRecipe {
    fn default() -> Self {
        ToyRecipe {
            n_facts: 10,
            corpus_seed: 1,
            init_seed: 0,
            train: TrainConfig { steps: 300, ..TrainConfig::default() },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyModelReport {
    pub train: TrainReport,
    pub fact_recall: f64,
}

/// Generates the corpus, trains the toy model and measures fact recall.
pub fn train_toy(recipe: &ToyRecipe) -> Result<(ModelBundle, ToyCorpus, ToyModelReport)> {
    let corpus = generate_corpus(recipe.n_facts, recipe.corpus_seed)?;
    let init = init_bundle(&toy_config(&corpus.vocab), recipe.init_seed)?;
    let (model, train) = train(&init, &corpus.sequences, &recipe.train)?;
    let fact_recall = fact_recall(&model, &corpus)?;
    Ok((model, corpus, ToyModelReport { train, fact_recall }))
}

/// Value optimization settings for the toy world. The drift penalty is
/// measured at the edited position itself (every toy prompt ends with the
/// subject), so it is weighted down from the default.
pub fn toy_zo_config() -> ZOConfig {
    ZOConfig {
        kl_weight: 0.1,
        lr_schedule: LrSchedule::Cosine { lr_max: 3.0, lr_min: 0.06, horizon: 300 },
        ..ZOConfig::default()
    }
}

/// Ridge of the toy covariance as a multiple of `trace(C) / dim`.
pub const TOY_RIDGE_FACTOR: f64 = 1.0;
pub const TOY_PREFIX_COUNT: usize = 4;
pub const TOY_EDIT_LAYER: usize = 0;

/// Everything an edit suite over the toy world needs besides the model.
#[derive(Debug, Clone)]
pub struct ToyEditSetup {
    pub cases: Vec<EvalCase>,
    pub prefixes: PrefixSet,
    pub cov: CovarianceEstimate,
}

/// Counterfactual cases for the first `n_cases` facts, prefixes sampled from
/// sentence openings, and the key covariance of `model` over the corpus.
pub fn toy_edit_setup(model: &ModelBundle, corpus: &ToyCorpus, n_cases: usize, seed: u64) -> Result<ToyEditSetup> {
    let cases = corpus
        .counterfactual_cases(n_cases, 5, TOY_EDIT_LAYER)
        .iter()
        .map(|r| EvalCase::from_record(r, &corpus.vocab, TOY_EDIT_LAYER))
        .collect::<Result<Vec<_>>>()?;
    let openings = corpus.context_prefixes();
    let prefixes = sample_prefixes(TOY_PREFIX_COUNT, (0, 0), seed, PrefixSource::Corpus(&openings))?;
    let mut cov = estimate_covariance(model, TOY_EDIT_LAYER, &corpus.sequences, None)?;
    cov.ridge_lambda = TOY_RIDGE_FACTOR * cov.mean_variance();
    Ok(ToyEditSetup { cases, prefixes, cov })
}

use std::path::{Path, PathBuf};

use serde::Serialize;
use zoedit_core::bootstrap::{
    generate_corpus, init_bundle, memory_comparison, toy_config, train_toy as train_toy_model, MemoryReport, ToyRecipe,
    Vocab,
};
use zoedit_core::editor::{
    edit as run_edit, estimate_covariance, sample_prefixes, CovarianceEstimate, EditRequest, PrefixSet, PrefixSource,
    StopReason,
};
use zoedit_core::eval::{ablation_run, evaluate, load_dataset, records_to_jsonl, run_suite, AblationVariant, EvalCase};
use zoedit_core::model::{checkpoint, ModelBundle};
use zoedit_core::noiselab::variance_sweep;
use zoedit_core::quant::{self, CalibrationStats, MixedPrecisionPolicy};
use zoedit_core::{Error, TokenId};

use crate::config::RunConfig;
use crate::CliError;

type Outcome = Result<u8, CliError>;

fn core(field: &str) -> impl Fn(Error) -> CliError + '_ {
    move |e| CliError::from_core(Some(field), e)
}

fn write(dir: &Path, name: &str, bytes: &[u8]) -> Result<PathBuf, CliError> {
    let path = dir.join(name);
    checkpoint::write_atomic(&path, bytes).map_err(core("output_dir"))?;
    Ok(path)
}

fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<PathBuf, CliError> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| CliError::from_core(None, e.into()))?;
    s.push('\n');
    write(dir, name, s.as_bytes())
}

/// The stdout summary: one JSON line.
fn summary<T: Serialize>(value: &T) {
    println!("{}", serde_json::to_string(value).expect("summary serializes"));
}

fn load_model(cfg: &RunConfig, cmd: &str) -> Result<ModelBundle, CliError> {
    let p = cfg.require("model", &cfg.model, cmd)?;
    checkpoint::import_checkpoint(p).map_err(core("model"))
}

fn load_vocab(cfg: &RunConfig, cmd: &str) -> Result<Vocab, CliError> {
    Vocab::load(cfg.require("vocab", &cfg.vocab, cmd)?).map_err(core("vocab"))
}

/// Non-empty lines of a text file, tokenized.
fn load_lines(field: &'static str, path: &Path, vocab: &Vocab) -> Result<Vec<Vec<TokenId>>, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::from_core(Some(field), e.into()))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| vocab.encode(l).map_err(|e| CliError::input(field, format!("line {}: {e}", i + 1))))
        .collect()
}

fn load_corpus(cfg: &RunConfig, vocab: &Vocab, cmd: &str) -> Result<Vec<Vec<TokenId>>, CliError> {
    load_lines("corpus", cfg.require("corpus", &cfg.corpus, cmd)?, vocab)
}

fn load_cases(cfg: &RunConfig, vocab: &Vocab, cmd: &str) -> Result<Vec<EvalCase>, CliError> {
    let p = cfg.require("dataset", &cfg.dataset, cmd)?;
    let mut cases = load_dataset(p, vocab, cfg.edit_layer).map_err(core("dataset"))?;
    if cases.is_empty() {
        return Err(CliError::input("dataset", format!("{} holds no cases", p.display())));
    }
    if let Some(n) = cfg.max_cases {
        cases.truncate(n);
    }
    Ok(cases)
}

/// Sentence openings from the prefixes file, or short uniform random token
/// strings when none is given.
fn load_prefixes(cfg: &RunConfig, model: &ModelBundle, vocab: &Vocab) -> Result<PrefixSet, CliError> {
    let seed = cfg.seed()?;
    match &cfg.prefixes {
        Some(p) => {
            let openings = load_lines("prefixes", p, vocab)?;
            sample_prefixes(cfg.prefix_count, (0, 0), seed, PrefixSource::Corpus(&openings)).map_err(core("prefixes"))
        }
        None => {
            let source = PrefixSource::Uniform { vocab_size: model.config().vocab_size };
            sample_prefixes(cfg.prefix_count, (2, 5), seed, source).map_err(core("prefixes"))
        }
    }
}

/// Key covariance over the corpus with the configured ridge, or the identity
/// without a corpus.
fn covariance(
    cfg: &RunConfig,
    model: &ModelBundle,
    corpus: Option<&[Vec<TokenId>]>,
) -> Result<CovarianceEstimate, CliError> {
    match corpus {
        Some(seqs) => {
            let mut cov = estimate_covariance(model, cfg.edit_layer, seqs, None).map_err(core("corpus"))?;
            cov.ridge_lambda = cfg.ridge_factor * cov.mean_variance();
            Ok(cov)
        }
        None => Ok(CovarianceEstimate::identity(model.config().d_mlp)),
    }
}

fn optional_corpus(cfg: &RunConfig, vocab: &Vocab) -> Result<Option<Vec<Vec<TokenId>>>, CliError> {
    cfg.corpus.as_deref().map(|p| load_lines("corpus", p, vocab)).transpose()
}

/// Everything an edit needs besides the model.
struct EditInputs {
    cases: Vec<EvalCase>,
    prefixes: PrefixSet,
    cov: CovarianceEstimate,
}

fn edit_inputs(cfg: &RunConfig, model: &ModelBundle, cmd: &str) -> Result<EditInputs, CliError> {
    let vocab = load_vocab(cfg, cmd)?;
    if vocab.len() != model.config().vocab_size {
        return Err(CliError::input(
            "vocab",
            format!("vocabulary has {} words, model expects {}", vocab.len(), model.config().vocab_size),
        ));
    }
    let cases = load_cases(cfg, &vocab, cmd)?;
    let prefixes = load_prefixes(cfg, model, &vocab)?;
    let corpus = optional_corpus(cfg, &vocab)?;
    let cov = covariance(cfg, model, corpus.as_deref())?;
    Ok(EditInputs { cases, prefixes, cov })
}

fn zo_config(cfg: &RunConfig) -> Result<zoedit_core::editor::ZOConfig, CliError> {
    Ok(zoedit_core::editor::ZOConfig { rng_seed: cfg.seed()?, ..cfg.zo.clone() })
}

fn absolute(p: &Path) -> PathBuf {
    std::fs::canonicalize(p).unwrap_or_else(|_| p.to_path_buf())
}

#[derive(Serialize)]
struct TrainToySummary {
    command: &'static str,
    fact_recall: f64,
    initial_loss: f64,
    final_loss: f64,
    config: PathBuf,
}

/// Writes the model, its vocabulary, corpus, editing prefixes and a
/// counterfactual dataset, plus a run config pointing at all of them.
pub fn train_toy(cfg: &RunConfig) -> Outcome {
    let seed = cfg.seed()?;
    let recipe = ToyRecipe {
        n_facts: cfg.toy.n_facts,
        corpus_seed: seed,
        init_seed: seed,
        train: zoedit_core::bootstrap::TrainConfig { seed, ..cfg.train.clone() },
    };
    let (model, corpus, report) = train_toy_model(&recipe).map_err(|e| CliError::from_core(None, e))?;
    let out = &cfg.output_dir;
    let lines = |seqs: &[Vec<TokenId>]| seqs.iter().map(|s| corpus.vocab.decode(s) + "\n").collect::<String>();

    let model_path = write(out, "model.ckpt", &checkpoint::to_bytes(&model).map_err(core("model"))?)?;
    let vocab_path = write(out, "vocab.txt", corpus.vocab.to_text().as_bytes())?;
    let corpus_path = write(out, "corpus.txt", lines(&corpus.sequences).as_bytes())?;
    let prefix_path = write(out, "prefixes.txt", lines(&corpus.context_prefixes()).as_bytes())?;
    let records = corpus.counterfactual_cases(corpus.facts.len(), cfg.toy.n_probes, cfg.edit_layer);
    let dataset_path = write(out, "dataset.jsonl", records_to_jsonl(&records).map_err(core("dataset"))?.as_bytes())?;
    write_json(out, "facts.json", &corpus.facts)?;
    write_json(out, "train_report.json", &report)?;

    let next = RunConfig {
        model: Some(absolute(&model_path)),
        vocab: Some(absolute(&vocab_path)),
        corpus: Some(absolute(&corpus_path)),
        prefixes: Some(absolute(&prefix_path)),
        dataset: Some(absolute(&dataset_path)),
        seed: Some(seed),
        ..cfg.clone()
    };
    let config = write_json(out, "run_config.json", &next)?;
    summary(&TrainToySummary {
        command: "train-toy",
        fact_recall: report.fact_recall,
        initial_loss: report.train.initial_loss,
        final_loss: report.train.final_loss,
        config,
    });
    Ok(0)
}

pub fn calibrate(cfg: &RunConfig) -> Outcome {
    let model = load_model(cfg, "calibrate")?;
    let vocab = load_vocab(cfg, "calibrate")?;
    let corpus = load_corpus(cfg, &vocab, "calibrate")?;
    let stats = quant::calibrate(&model, &corpus).map_err(core("model"))?;
    let path = write_json(&cfg.output_dir, "calibration.json", &stats)?;
    summary(&serde_json::json!({
        "command": "calibrate",
        "sequences": stats.sample_count,
        "sites": stats.site_max_abs.len(),
        "calibration": path,
    }));
    Ok(0)
}

pub fn quantize(cfg: &RunConfig) -> Outcome {
    let model = load_model(cfg, "quantize")?;
    let stats: CalibrationStats = match &cfg.calibration {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::from_core(Some("calibration"), e.into()))?;
            serde_json::from_str(&text).map_err(|e| CliError::from_core(Some("calibration"), e.into()))?
        }
        None => {
            let vocab = load_vocab(cfg, "quantize")?;
            let corpus = load_corpus(cfg, &vocab, "quantize without calibration stats")?;
            quant::calibrate(&model, &corpus).map_err(core("model"))?
        }
    };
    let policy = cfg.policy.clone().unwrap_or_else(|| MixedPrecisionPolicy::for_edit_layer(cfg.edit_layer));
    let spec = quant::derive_spec(&model, &stats, &policy).map_err(core("policy"))?;
    let q = quant::quantize_with_spec(&model, &spec, &policy).map_err(core("policy"))?;
    let out = &cfg.output_dir;
    let path = write(out, "model_w8a16.ckpt", &checkpoint::to_bytes(&q).map_err(core("model"))?)?;
    write_json(out, "quant_spec.json", &spec)?;
    summary(&serde_json::json!({
        "command": "quantize",
        "fp_bytes": model.storage_bytes(),
        "quantized_bytes": q.storage_bytes(),
        "scale_fingerprint": quant::scale_fingerprint(&q),
        "model": path,
    }));
    Ok(0)
}

/// Edits one dataset case. Exits 1 when the edit did not reach success.
pub fn edit(cfg: &RunConfig) -> Outcome {
    let model = load_model(cfg, "edit")?;
    let inputs = edit_inputs(cfg, &model, "edit")?;
    let case = inputs.cases.get(cfg.case).ok_or_else(|| {
        CliError::config("case", format!("case {} out of range, dataset has {}", cfg.case, inputs.cases.len()))
    })?;
    let request: &EditRequest = &case.request;
    let (edited, report) = run_edit(&model, request, &inputs.prefixes, &zo_config(cfg)?, &inputs.cov)
        .map_err(|e| CliError::from_core(None, e))?;
    let out = &cfg.output_dir;
    let model_path = write(out, "edited.ckpt", &checkpoint::to_bytes(&edited).map_err(core("model"))?)?;
    let report_path = write_json(out, "edit_report.json", &report)?;
    summary(&serde_json::json!({
        "command": "edit",
        "stop_reason": report.stop_reason,
        "steps": report.steps,
        "forward_passes": report.counters.forward_passes,
        "backward_passes": report.counters.backward_passes,
        "model": model_path,
        "report": report_path,
    }));
    Ok(if report.stop_reason == StopReason::Success { 0 } else { 1 })
}

/// With `edited` set, scores that checkpoint against the model on every
/// case. Otherwise edits each case from the model and scores it.
pub fn eval(cfg: &RunConfig) -> Outcome {
    let model = load_model(cfg, "eval")?;
    let out = &cfg.output_dir;
    let metrics = match &cfg.edited {
        Some(p) => {
            let vocab = load_vocab(cfg, "eval")?;
            let cases = load_cases(cfg, &vocab, "eval")?;
            let after = checkpoint::import_checkpoint(p).map_err(core("edited"))?;
            evaluate(&model, &after, &cases).map_err(|e| CliError::from_core(None, e))?
        }
        None => {
            let inputs = edit_inputs(cfg, &model, "eval")?;
            let suite = run_suite(&model, &inputs.cases, &inputs.prefixes, &zo_config(cfg)?, &inputs.cov)
                .map_err(|e| CliError::from_core(None, e))?;
            write_json(out, "edit_reports.json", &suite.reports)?;
            suite.metrics
        }
    };
    let path = write_json(out, "metrics.json", &metrics)?;
    let t = &cfg.thresholds;
    let missed: Vec<&str> = [
        ("edit_success", metrics.edit_success, t.edit_success),
        ("locality", metrics.locality, t.locality),
        ("portability", metrics.portability, t.portability),
    ]
    .into_iter()
    .filter(|(_, got, min)| min.is_some_and(|m| *got < m))
    .map(|(name, _, _)| name)
    .collect();
    summary(&serde_json::json!({
        "command": "eval",
        "edit_success": metrics.edit_success,
        "locality": metrics.locality,
        "portability": metrics.portability,
        "below_threshold": missed,
        "metrics": path,
    }));
    Ok(if missed.is_empty() { 0 } else { 1 })
}

pub fn ablate(cfg: &RunConfig) -> Outcome {
    let variants = cfg
        .variants
        .iter()
        .map(|v| AblationVariant::parse(v))
        .collect::<Result<Vec<_>, _>>()
        .map_err(core("variants"))?;
    if variants.is_empty() {
        return Err(CliError::config("variants", "no ablation variants selected"));
    }
    let model = load_model(cfg, "ablate")?;
    let inputs = edit_inputs(cfg, &model, "ablate")?;
    let report = ablation_run(&model, &inputs.cases, &inputs.prefixes, &zo_config(cfg)?, &inputs.cov, &variants)
        .map_err(|e| CliError::from_core(None, e))?;
    let out = &cfg.output_dir;
    let csv = write(out, "ablation.csv", report.to_csv().as_bytes())?;
    write_json(out, "ablation.json", &report)?;
    summary(&serde_json::json!({ "command": "ablate", "variants": report.rows.len(), "csv": csv }));
    Ok(0)
}

pub fn noiselab(cfg: &RunConfig) -> Outcome {
    let threads = std::num::NonZeroUsize::new(cfg.threads).expect("validated");
    let sweep = zoedit_core::noiselab::SweepConfig { seed: cfg.seed()?, threads, ..cfg.noise.clone() };
    let report = variance_sweep(&sweep).map_err(core("noise"))?;
    let out = &cfg.output_dir;
    let csv = write(out, "noise.csv", report.to_csv().as_bytes())?;
    write_json(out, "noise.json", &report)?;
    summary(&serde_json::json!({ "command": "noiselab", "depths": report.rows.len(), "csv": csv }));
    Ok(0)
}

#[derive(Serialize)]
struct MemstatOutput {
    #[serde(flatten)]
    report: MemoryReport,
    /// `zo_peak_bytes / trainer_peak_bytes`.
    ratio: f64,
}

/// Without a model, measures the untrained toy model on the generated
/// corpus.
pub fn memstat(cfg: &RunConfig) -> Outcome {
    let seed = cfg.seed()?;
    let (model, request, prefixes, cov, batch) = match &cfg.model {
        Some(_) => {
            let model = load_model(cfg, "memstat")?;
            let inputs = edit_inputs(cfg, &model, "memstat")?;
            let vocab = load_vocab(cfg, "memstat")?;
            let corpus = load_corpus(cfg, &vocab, "memstat")?;
            let case =
                inputs.cases.into_iter().nth(cfg.case).ok_or_else(|| CliError::config("case", "case out of range"))?;
            (model, case.request, inputs.prefixes, inputs.cov, corpus)
        }
        None => {
            let corpus = generate_corpus(cfg.toy.n_facts, seed).map_err(core("toy"))?;
            let model = init_bundle(&toy_config(&corpus.vocab), seed).map_err(core("toy"))?;
            let record = corpus.counterfactual_cases(1, cfg.toy.n_probes, cfg.edit_layer).remove(0);
            let case = EvalCase::from_record(&record, &corpus.vocab, cfg.edit_layer).map_err(core("toy"))?;
            let openings = corpus.context_prefixes();
            let prefixes = sample_prefixes(cfg.prefix_count, (0, 0), seed, PrefixSource::Corpus(&openings))
                .map_err(core("prefixes"))?;
            let cov = covariance(cfg, &model, Some(&corpus.sequences))?;
            (model, case.request, prefixes, cov, corpus.sequences)
        }
    };
    let batch: Vec<Vec<TokenId>> = batch.into_iter().take(cfg.memstat_batch.max(1)).collect();
    let train = zoedit_core::bootstrap::TrainConfig { seed, ..cfg.train.clone() };
    let report = memory_comparison(&model, &request, &prefixes, &zo_config(cfg)?, &cov, &batch, &train)
        .map_err(|e| CliError::from_core(None, e))?;
    let ratio = if report.trainer_peak_bytes > 0 {
        report.zo_peak_bytes as f64 / report.trainer_peak_bytes as f64
    } else {
        0.0
    };
    let output = MemstatOutput { report, ratio };
    let path = write_json(&cfg.output_dir, "memstat.json", &output)?;
    summary(&serde_json::json!({
        "command": "memstat",
        "zo_peak_bytes": output.report.zo_peak_bytes,
        "trainer_peak_bytes": output.report.trainer_peak_bytes,
        "ratio": output.ratio,
        "activation_share": output.report.activation_share,
        "report": path,
    }));
    Ok(0)
}

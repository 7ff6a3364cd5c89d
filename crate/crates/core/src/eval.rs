//! Edit datasets, quality metrics and the ablation harness.
//!
//! Datasets are JSONL with one case per line:
//!
//! ```json
//! {"subject": "alice abbott", "prompt": "the city of alice abbott", "target": "rome",
//!  "preservation_prompt": "the job of alice abbott",
//!  "rephrases": ["the hometown of alice abbott"],
//!  "locality_probes": [{"prompt": "the city of kofi baxter", "expected": "oslo"}],
//!  "layer": 0}
//! ```
//!
//! Text fields are tokenized with a word-level [`Vocab`]. `layer` is
//! optional and falls back to the loader's default.

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::bootstrap::Vocab;
use crate::editor::{edit, with_prefix, CovarianceEstimate, EditReport, EditRequest, PrefixSet, ZOConfig};
use crate::model::{greedy_decode, ModelBundle};
use crate::telemetry::Counters;
use crate::{Error, Result, TokenId};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeRecord {
    pub prompt: String,
    pub expected: String,
}

/// One dataset line.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaseRecord {
    pub subject: String,
    pub prompt: String,
    pub target: String,
    pub preservation_prompt: String,
    pub rephrases: Vec<String>,
    pub locality_probes: Vec<ProbeRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layer: Option<usize>,
}

const REQUIRED: [&str; 6] = ["subject", "prompt", "target", "preservation_prompt", "rephrases", "locality_probes"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LocalityProbe {
    pub prompt: Vec<TokenId>,
    pub expected: Vec<TokenId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalCase {
    pub request: EditRequest,
    pub rephrase_prompts: Vec<Vec<TokenId>>,
    pub unrelated: Vec<LocalityProbe>,
}

impl EvalCase {
    pub fn from_record(record: &CaseRecord, vocab: &Vocab, default_layer: usize) -> Result<Self> {
        let request = EditRequest {
            subject: vocab.encode(&record.subject)?,
            fact_prompt: vocab.encode(&record.prompt)?,
            target: vocab.encode(&record.target)?,
            preservation_prompt: vocab.encode(&record.preservation_prompt)?,
            edit_layer: record.layer.unwrap_or(default_layer),
        };
        let rephrase_prompts = record.rephrases.iter().map(|r| vocab.encode(r)).collect::<Result<Vec<_>>>()?;
        let unrelated = record
            .locality_probes
            .iter()
            .map(|p| Ok(LocalityProbe { prompt: vocab.encode(&p.prompt)?, expected: vocab.encode(&p.expected)? }))
            .collect::<Result<Vec<_>>>()?;
        let case = EvalCase { request, rephrase_prompts, unrelated };
        case.validate()?;
        Ok(case)
    }

    pub fn validate(&self) -> Result<()> {
        if self.request.target.is_empty() || self.request.subject.is_empty() {
            return Err(Error::Input("subject and target must be nonempty".into()));
        }
        if self.request.subject_end(&self.request.fact_prompt).is_none() {
            return Err(Error::Input("subject does not occur in the prompt".into()));
        }
        if self.rephrase_prompts.is_empty() || self.unrelated.is_empty() {
            return Err(Error::Input("a case needs at least one rephrase and one locality probe".into()));
        }
        if self.unrelated.iter().any(|p| p.expected.is_empty()) {
            return Err(Error::Input("locality probe with empty expected continuation".into()));
        }
        if self.unrelated.iter().any(|p| self.request.subject_end(&p.prompt).is_some()) {
            return Err(Error::Input("locality probe contains the edited subject".into()));
        }
        Ok(())
    }
}

/// Parses JSONL text. Blank lines are skipped; line numbers are 1-based.
pub fn parse_dataset(text: &str, vocab: &Vocab, default_layer: usize) -> Result<Vec<EvalCase>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |fields: Vec<String>, message: String| Error::Parse { line: line_no, fields, message };
        let value: serde_json::Value =
            serde_json::from_str(line).map_err(|e| parse_err(Vec::new(), format!("invalid JSON: {e}")))?;
        let obj = value.as_object().ok_or_else(|| parse_err(Vec::new(), "expected a JSON object".into()))?;
        let missing: Vec<String> = REQUIRED.iter().filter(|f| !obj.contains_key(**f)).map(|f| f.to_string()).collect();
        if !missing.is_empty() {
            let message = format!("missing fields: {}", missing.join(", "));
            return Err(parse_err(missing, message));
        }
        let record: CaseRecord = serde_json::from_value(value).map_err(|e| parse_err(Vec::new(), e.to_string()))?;
        out.push(
            EvalCase::from_record(&record, vocab, default_layer).map_err(|e| parse_err(Vec::new(), e.to_string()))?,
        );
    }
    Ok(out)
}

pub fn load_dataset(path: &Path, vocab: &Vocab, default_layer: usize) -> Result<Vec<EvalCase>> {
    let text = std::fs::read_to_string(path)?;
    parse_dataset(&text, vocab, default_layer)
}

pub fn records_to_jsonl(records: &[CaseRecord]) -> Result<String> {
    let mut s = String::new();
    for r in records {
        s.push_str(&serde_json::to_string(r)?);
        s.push('\n');
    }
    Ok(s)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseMetrics {
    pub edit_success: bool,
    pub portability_hits: usize,
    pub portability_total: usize,
    pub locality_hits: usize,
    pub locality_total: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SuiteTelemetry {
    pub mean_steps: f64,
    pub forward_passes: u64,
    pub backward_passes: u64,
    pub flops: u64,
    pub peak_memory_bytes: Option<u64>,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub edit_success: f64,
    pub locality: f64,
    pub portability: f64,
    pub cases: Vec<CaseMetrics>,
    pub telemetry: SuiteTelemetry,
}

fn decodes_to(model: &ModelBundle, prompt: &[TokenId], target: &[TokenId]) -> Result<bool> {
    let (seq, _) = with_prefix(model.config(), &[], prompt);
    Ok(greedy_decode(model, &seq, target.len(), None)? == target)
}

/// Scores one case: `after` is the model edited for this case.
pub fn evaluate_case(before: &ModelBundle, after: &ModelBundle, case: &EvalCase) -> Result<CaseMetrics> {
    let target = &case.request.target;
    let edit_success = decodes_to(after, &case.request.fact_prompt, target)?;
    let mut portability_hits = 0;
    for p in &case.rephrase_prompts {
        portability_hits += decodes_to(after, p, target)? as usize;
    }
    let mut locality_hits = 0;
    for probe in &case.unrelated {
        let (seq, _) = with_prefix(before.config(), &[], &probe.prompt);
        let n = probe.expected.len();
        locality_hits += (greedy_decode(before, &seq, n, None)? == greedy_decode(after, &seq, n, None)?) as usize;
    }
    Ok(CaseMetrics {
        edit_success,
        portability_hits,
        portability_total: case.rephrase_prompts.len(),
        locality_hits,
        locality_total: case.unrelated.len(),
    })
}

fn ratio(hits: usize, total: usize) -> f64 {
    if total == 0 {
        0.0
    } else {
        hits as f64 / total as f64
    }
}

impl MetricsReport {
    /// Aggregates per-case metrics. Portability and locality pool probes
    /// across cases.
    pub fn from_cases(cases: Vec<CaseMetrics>, telemetry: SuiteTelemetry) -> Self {
        let sum = |f: fn(&CaseMetrics) -> usize| cases.iter().map(f).sum::<usize>();
        MetricsReport {
            edit_success: ratio(cases.iter().filter(|c| c.edit_success).count(), cases.len()),
            portability: ratio(sum(|c| c.portability_hits), sum(|c| c.portability_total)),
            locality: ratio(sum(|c| c.locality_hits), sum(|c| c.locality_total)),
            cases,
            telemetry,
        }
    }
}

/// Scores every case against one edited model.
pub fn evaluate(before: &ModelBundle, after: &ModelBundle, cases: &[EvalCase]) -> Result<MetricsReport> {
    if before.config() != after.config() {
        return Err(Error::Input("models have different configurations".into()));
    }
    let metrics = cases.iter().map(|c| evaluate_case(before, after, c)).collect::<Result<Vec<_>>>()?;
    Ok(MetricsReport::from_cases(metrics, SuiteTelemetry::default()))
}

#[derive(Debug, Clone)]
pub struct SuiteResult {
    pub metrics: MetricsReport,
    pub reports: Vec<EditReport>,
}

/// Edits each case independently starting from `model` and scores it
/// against its own edited model.
pub fn run_suite(
    model: &ModelBundle,
    cases: &[EvalCase],
    prefixes: &PrefixSet,
    config: &ZOConfig,
    cov: &CovarianceEstimate,
) -> Result<SuiteResult> {
    let start = Instant::now();
    let mut reports = Vec::with_capacity(cases.len());
    let mut metrics = Vec::with_capacity(cases.len());
    for case in cases {
        let (after, report) = edit(model, &case.request, prefixes, config, cov)?;
        metrics.push(evaluate_case(model, &after, case)?);
        reports.push(report);
    }
    let wall_time_s = start.elapsed().as_secs_f64();
    let mut counters = Counters::default();
    for r in &reports {
        counters.forward_passes += r.counters.forward_passes;
        counters.backward_passes += r.counters.backward_passes;
        counters.flops += r.counters.flops;
    }
    let telemetry = SuiteTelemetry {
        mean_steps: reports.iter().map(|r| r.steps as f64).sum::<f64>() / reports.len().max(1) as f64,
        forward_passes: counters.forward_passes,
        backward_passes: counters.backward_passes,
        flops: counters.flops,
        peak_memory_bytes: reports.iter().filter_map(|r| r.peak_memory_bytes).max(),
        wall_time_s,
    };
    Ok(SuiteResult { metrics: MetricsReport::from_cases(metrics, telemetry), reports })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationVariant {
    Zo,
    ZoEarlystop,
    ZoCache,
    Full,
}

impl AblationVariant {
    pub const ALL: [AblationVariant; 4] =
        [AblationVariant::Zo, AblationVariant::ZoEarlystop, AblationVariant::ZoCache, AblationVariant::Full];

    pub fn name(self) -> &'static str {
        match self {
            AblationVariant::Zo => "zo",
            AblationVariant::ZoEarlystop => "zo+earlystop",
            AblationVariant::ZoCache => "zo+cache",
            AblationVariant::Full => "full",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation variant {s:?}")))
    }

    pub fn apply(self, base: &ZOConfig) -> ZOConfig {
        let (early_stop, prefix_cache) = match self {
            AblationVariant::Zo => (false, false),
            AblationVariant::ZoEarlystop => (true, false),
            AblationVariant::ZoCache => (false, true),
            AblationVariant::Full => (true, true),
        };
        ZOConfig { early_stop, prefix_cache, ..base.clone() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub mean_steps: f64,
    pub mean_forward_passes: f64,
    pub mean_flops: f64,
    pub wall_time_s: f64,
    pub edit_success: f64,
    pub locality: f64,
    pub portability: f64,
    /// Final value vector per case.
    #[serde(skip)]
    pub values: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn row(&self, variant: AblationVariant) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == variant.name())
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(
            "variant,mean_steps,mean_forward_passes,mean_flops,wall_time_s,edit_success,locality,portability\n",
        );
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                r.variant,
                r.mean_steps,
                r.mean_forward_passes,
                r.mean_flops,
                r.wall_time_s,
                r.edit_success,
                r.locality,
                r.portability
            ));
        }
        s
    }
}

/// Runs the suite once per variant with identical seeds.
pub fn ablation_run(
    model: &ModelBundle,
    cases: &[EvalCase],
    prefixes: &PrefixSet,
    base: &ZOConfig,
    cov: &CovarianceEstimate,
    variants: &[AblationVariant],
) -> Result<AblationReport> {
    let mut rows = Vec::with_capacity(variants.len());
    for &variant in variants {
        let suite = run_suite(model, cases, prefixes, &variant.apply(base), cov)?;
        let n = suite.reports.len().max(1) as f64;
        let t = &suite.metrics.telemetry;
        rows.push(AblationRow {
            variant: variant.name().into(),
            mean_steps: t.mean_steps,
            mean_forward_passes: t.forward_passes as f64 / n,
            mean_flops: t.flops as f64 / n,
            wall_time_s: t.wall_time_s,
            edit_success: suite.metrics.edit_success,
            locality: suite.metrics.locality,
            portability: suite.metrics.portability,
            values: suite.reports.into_iter().map(|r| r.value).collect(),
        });
    }
    Ok(AblationReport { rows })
}

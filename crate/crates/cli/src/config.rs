//! Run configuration: a JSON file, `--set path=value` overrides, then the
//! typed flags.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use zoedit_core::bootstrap::{
    toy_zo_config, ToyRecipe, TrainConfig, TOY_EDIT_LAYER, TOY_PREFIX_COUNT, TOY_RIDGE_FACTOR,
};
use zoedit_core::editor::ZOConfig;
use zoedit_core::noiselab::SweepConfig;
use zoedit_core::quant::MixedPrecisionPolicy;

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Checkpoint to edit, evaluate or quantize.
    pub model: Option<PathBuf>,
    /// JSONL edit cases.
    pub dataset: Option<PathBuf>,
    /// One word per line.
    pub vocab: Option<PathBuf>,
    /// One tokenized sentence per line, `<bos>` included. Used for the key
    /// covariance, calibration and the memstat batch.
    pub corpus: Option<PathBuf>,
    /// Candidate editing prefixes, one per line.
    pub prefixes: Option<PathBuf>,
    /// Calibration stats written by `calibrate`.
    pub calibration: Option<PathBuf>,
    /// An already edited checkpoint for `eval`.
    pub edited: Option<PathBuf>,
    pub output_dir: PathBuf,
    /// Root of every random stream. There is no wall-clock fallback.
    pub seed: Option<u64>,
    pub edit_layer: usize,
    /// Dataset line edited by `edit`.
    pub case: usize,
    /// Cases used by `eval` and `ablate`; all when absent.
    pub max_cases: Option<usize>,
    pub prefix_count: usize,
    /// Covariance ridge as a multiple of `trace(C) / dim`.
    pub ridge_factor: f64,
    pub zo: ZOConfig,
    /// Mixed-precision policy for `quantize`; defaults to the edit layer's
    /// MLP in floating point.
    pub policy: Option<MixedPrecisionPolicy>,
    pub toy: ToyOptions,
    pub train: TrainConfig,
    pub memstat_batch: usize,
    pub noise: SweepConfig,
    pub variants: Vec<String>,
    /// `eval` exits 1 when a metric falls below its threshold.
    pub thresholds: Thresholds,
    pub threads: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Thresholds {
    pub edit_success: Option<f64>,
    pub locality: Option<f64>,
    pub portability: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyOptions {
    pub n_facts: usize,
    pub n_probes: usize,
}

impl Default for ToyOptions {
    fn default() -> Self {
        ToyOptions { n_facts: 10, n_probes: 5 }
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: None,
            dataset: None,
            vocab: None,
            corpus: None,
            prefixes: None,
            calibration: None,
            edited: None,
            output_dir: PathBuf::from("out"),
            seed: None,
            edit_layer: TOY_EDIT_LAYER,
            case: 0,
            max_cases: None,
            prefix_count: TOY_PREFIX_COUNT,
            ridge_factor: TOY_RIDGE_FACTOR,
            zo: toy_zo_config(),
            policy: None,
            toy: ToyOptions::default(),
            train: ToyRecipe::default().train,
            memstat_batch: 32,
            noise: SweepConfig::default(),
            variants: ["zo", "zo+earlystop", "zo+cache", "full"].map(String::from).to_vec(),
            thresholds: Thresholds::default(),
            threads: 1,
        }
    }
}

/// Reads the config file (if any) and applies `key.path=value` overrides.
/// Values are parsed as JSON and fall back to plain strings.
pub fn load(path: Option<&Path>, sets: &[String]) -> Result<RunConfig, CliError> {
    let mut root = serde_json::to_value(RunConfig::default()).expect("default config serializes");
    if let Some(p) = path {
        let text = std::fs::read_to_string(p)
            .map_err(|e| CliError::input("config", format!("cannot read {}: {e}", p.display())))?;
        let file: Value =
            serde_json::from_str(&text).map_err(|e| CliError::config("config", format!("{}: {e}", p.display())))?;
        merge(&mut root, file);
    }
    for s in sets {
        let (key, raw) =
            s.split_once('=').ok_or_else(|| CliError::config("set", format!("expected key=value, got {s:?}")))?;
        let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.into()));
        set_path(&mut root, key, value).map_err(|m| CliError::config(key, m))?;
    }
    serde_json::from_value(root).map_err(|e| CliError::config("config", e.to_string()))
}

/// Objects merge key by key so a partial section keeps the run defaults for
/// the rest; anything else replaces.
fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn set_path(root: &mut Value, key: &str, value: Value) -> Result<(), String> {
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        if part.is_empty() {
            return Err(format!("empty segment in {key:?}"));
        }
        if !node.is_object() {
            if node.is_null() {
                *node = Value::Object(Default::default());
            } else {
                return Err(format!("{} is not an object", parts[..i].join(".")));
            }
        }
        let obj = node.as_object_mut().expect("checked above");
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        node = obj.entry(part.to_string()).or_insert(Value::Null);
    }
    unreachable!("split yields at least one segment")
}

impl RunConfig {
    pub fn seed(&self) -> Result<u64, CliError> {
        self.seed.ok_or_else(|| CliError::config("seed", "a seed is required (--seed or \"seed\" in the config)"))
    }

    /// Every referenced path must exist.
    pub fn validate(&self) -> Result<(), CliError> {
        self.seed()?;
        let paths = [
            ("model", &self.model),
            ("dataset", &self.dataset),
            ("vocab", &self.vocab),
            ("corpus", &self.corpus),
            ("prefixes", &self.prefixes),
            ("calibration", &self.calibration),
            ("edited", &self.edited),
        ];
        for (field, p) in paths {
            if let Some(p) = p {
                if !p.exists() {
                    return Err(CliError::input(field, format!("{field} path {} does not exist", p.display())));
                }
            }
        }
        if self.threads == 0 {
            return Err(CliError::config("threads", "threads must be at least 1"));
        }
        if self.prefix_count == 0 {
            return Err(CliError::config("prefix_count", "prefix_count must be at least 1"));
        }
        if !(self.ridge_factor >= 0.0 && self.ridge_factor.is_finite()) {
            return Err(CliError::config("ridge_factor", "ridge_factor must be finite and nonnegative"));
        }
        self.zo.validate().map_err(|e| CliError::config("zo", e.to_string()))
    }

    pub fn require<'a>(&self, field: &'static str, p: &'a Option<PathBuf>, cmd: &str) -> Result<&'a Path, CliError> {
        p.as_deref().ok_or_else(|| CliError::config(field, format!("{field} path is required for {cmd}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_reach_nested_fields() {
        let sets = ["zo.max_steps=7".to_string(), "seed=3".into(), "model=m.ckpt".into()];
        let c = load(None, &sets).unwrap();
        assert_eq!(c.zo.max_steps, 7);
        assert_eq!(c.seed, Some(3));
        assert_eq!(c.model, Some(PathBuf::from("m.ckpt")));
        assert_eq!(c.zo.kl_weight, toy_zo_config().kl_weight);
    }

    #[test]
    fn partial_sections_keep_run_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, r#"{"seed": 1, "zo": {"max_steps": 9}}"#).unwrap();
        let c = load(Some(&p), &[]).unwrap();
        assert_eq!(c.zo, ZOConfig { max_steps: 9, ..toy_zo_config() });
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let err = load(None, &["modle=x".into()]).unwrap_err();
        assert_eq!(err.code, 2);
    }

    #[test]
    fn seed_is_mandatory() {
        let err = RunConfig::default().validate().unwrap_err();
        assert_eq!(err.field.as_deref(), Some("seed"));
    }

    #[test]
    fn default_round_trips() {
        let c = RunConfig::default();
        let back: RunConfig = serde_json::from_str(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(back, c);
    }
}

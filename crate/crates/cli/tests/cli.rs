use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use serde_json::Value;
use zoedit_core::bootstrap::Vocab;
use zoedit_core::editor::EditReport;
use zoedit_core::eval::{load_dataset, AblationReport, MetricsReport};
use zoedit_core::model::{checkpoint, Precision};
use zoedit_core::noiselab::SweepReport;

fn zoedit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_zoedit")).args(args).env_remove("ZOEDIT_OUT_DIR").output().expect("binary runs")
}

fn stderr_json(out: &Output) -> Value {
    let text = String::from_utf8_lossy(&out.stderr);
    serde_json::from_str(text.trim()).unwrap_or_else(|e| panic!("stderr is not JSON ({e}): {text}"))
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A briefly trained toy world shared by every test.
fn world() -> &'static Path {
    static DIR: OnceLock<tempfile::TempDir> = OnceLock::new();
    DIR.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let out = zoedit(&["train-toy", "--seed", "3", "--steps", "30", "--n-facts", "4", "--out", s(dir.path())]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        dir
    })
    .path()
}

fn config() -> PathBuf {
    world().join("run_config.json")
}

const QUICK: [&str; 4] = ["--max-steps", "4", "--set", "zo.check_period=2"];

fn edit_into(dir: &Path, extra: &[&str]) -> Output {
    let cfg = config();
    let mut args = vec!["edit", "--config", s(&cfg), "--out", s(dir)];
    args.extend(QUICK);
    args.extend(extra);
    zoedit(&args)
}

#[test]
fn train_toy_writes_a_usable_world() {
    let w = world();
    for f in ["model.ckpt", "vocab.txt", "corpus.txt", "prefixes.txt", "dataset.jsonl", "train_report.json"] {
        assert!(w.join(f).is_file(), "{f}");
    }
    let vocab = Vocab::load(&w.join("vocab.txt")).unwrap();
    let cases = load_dataset(&w.join("dataset.jsonl"), &vocab, 0).unwrap();
    assert_eq!(cases.len(), 4);
    let model = checkpoint::import_checkpoint(&w.join("model.ckpt")).unwrap();
    assert_eq!(model.config().vocab_size, vocab.len());
}

#[test]
fn edit_writes_report_and_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let out = edit_into(dir.path(), &[]);
    let code = out.status.code().unwrap();
    assert!(code == 0 || code == 1, "{}", String::from_utf8_lossy(&out.stderr));
    let report: EditReport =
        serde_json::from_slice(&std::fs::read(dir.path().join("edit_report.json")).unwrap()).unwrap();
    assert!(!report.loss_trace.is_empty());
    assert_eq!(report.counters.backward_passes, 0);
    assert_eq!(code == 0, report.stop_reason == zoedit_core::editor::StopReason::Success);
    checkpoint::import_checkpoint(&dir.path().join("edited.ckpt")).unwrap();
    let leftovers: Vec<_> = std::fs::read_dir(dir.path())
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.file_name().to_string_lossy().contains(".tmp"))
        .collect();
    assert!(leftovers.is_empty());
}

#[test]
fn same_seed_gives_identical_reports() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    edit_into(a.path(), &[]);
    edit_into(b.path(), &[]);
    let ra = std::fs::read(a.path().join("edit_report.json")).unwrap();
    let rb = std::fs::read(b.path().join("edit_report.json")).unwrap();
    assert_eq!(ra, rb);
    let ca = std::fs::read(a.path().join("edited.ckpt")).unwrap();
    let cb = std::fs::read(b.path().join("edited.ckpt")).unwrap();
    assert_eq!(ca, cb);
}

#[test]
fn missing_model_path_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.ckpt");
    let out = edit_into(dir.path(), &["--model", s(&missing)]);
    assert_eq!(out.status.code(), Some(3));
    let err = stderr_json(&out);
    assert_eq!(err["error"]["field"], "model");
    assert!(err["error"]["message"].as_str().unwrap().contains("model"));
    assert_eq!(err["exit_code"], 3);
}

#[test]
fn unset_model_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = zoedit(&["edit", "--seed", "1", "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(stderr_json(&out)["error"]["field"], "model");
}

#[test]
fn seed_is_required() {
    let dir = tempfile::tempdir().unwrap();
    let out = zoedit(&["noiselab", "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(stderr_json(&out)["error"]["field"], "seed");
}

#[test]
fn bad_overrides_and_flags_are_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let out = zoedit(&["noiselab", "--seed", "1", "--out", s(dir.path()), "--set", "zo.mu=-1"]);
    assert_eq!(out.status.code(), Some(2));
    let out = zoedit(&["noiselab", "--seed", "1", "--set", "no_such_field=1"]);
    assert_eq!(out.status.code(), Some(2));
    let out = zoedit(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
    stderr_json(&out);
}

#[test]
fn env_var_sets_the_output_directory() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_zoedit"))
        .args(["noiselab", "--seed", "1", "--trials", "100", "--depths", "2,3", "--set", "noise.d=4"])
        .env("ZOEDIT_OUT_DIR", dir.path())
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: SweepReport = serde_json::from_slice(&std::fs::read(dir.path().join("noise.json")).unwrap()).unwrap();
    assert_eq!(report.rows.len(), 2);
    let csv = std::fs::read_to_string(dir.path().join("noise.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
}

#[test]
fn noiselab_is_deterministic_across_thread_counts() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let args = ["noiselab", "--seed", "5", "--trials", "100", "--depths", "2,4", "--set", "noise.d=4"];
    let run = |dir: &Path, threads: &str| {
        let mut v = args.to_vec();
        v.extend(["--threads", threads, "--out", s(dir)]);
        assert!(zoedit(&v).status.success());
        std::fs::read(dir.join("noise.csv")).unwrap()
    };
    assert_eq!(run(a.path(), "1"), run(b.path(), "2"));
}

#[test]
fn calibrate_then_quantize_then_edit() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config();
    let out = zoedit(&["calibrate", "--config", s(&cfg), "--out", s(dir.path())]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let calib = dir.path().join("calibration.json");
    let out = zoedit(&["quantize", "--config", s(&cfg), "--calibration", s(&calib), "--out", s(dir.path())]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let qpath = dir.path().join("model_w8a16.ckpt");
    let q = checkpoint::import_checkpoint(&qpath).unwrap();
    assert_eq!(q.precision(), Precision::MixedQuantized);

    let edit_dir = dir.path().join("edit");
    let out = edit_into(&edit_dir, &["--model", s(&qpath)]);
    assert!(matches!(out.status.code(), Some(0 | 1)), "{}", String::from_utf8_lossy(&out.stderr));
    let report: EditReport =
        serde_json::from_slice(&std::fs::read(edit_dir.join("edit_report.json")).unwrap()).unwrap();
    assert_eq!(report.scale_fingerprint, Some(zoedit_core::quant::scale_fingerprint(&q)));
}

#[test]
fn eval_and_ablate_outputs_parse() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config();
    let mut args = vec!["eval", "--config", s(&cfg), "--out", s(dir.path()), "--max-cases", "2"];
    args.extend(QUICK);
    let out = zoedit(&args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let m: MetricsReport = serde_json::from_slice(&std::fs::read(dir.path().join("metrics.json")).unwrap()).unwrap();
    assert_eq!(m.cases.len(), 2);
    let reports: Vec<EditReport> =
        serde_json::from_slice(&std::fs::read(dir.path().join("edit_reports.json")).unwrap()).unwrap();
    assert_eq!(reports.len(), 2);

    let edit_dir = dir.path().join("one");
    edit_into(&edit_dir, &[]);
    let edited = edit_dir.join("edited.ckpt");
    let scored = dir.path().join("scored");
    let out = zoedit(&["eval", "--config", s(&cfg), "--edited", s(&edited), "--out", s(&scored), "--max-cases", "1"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let m: MetricsReport = serde_json::from_slice(&std::fs::read(scored.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(m.cases.len(), 1);

    let ab = dir.path().join("ablate");
    let mut args = vec!["ablate", "--config", s(&cfg), "--out", s(&ab), "--max-cases", "1", "--variants", "zo,full"];
    args.extend(QUICK);
    let out = zoedit(&args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let r: AblationReport = serde_json::from_slice(&std::fs::read(ab.join("ablation.json")).unwrap()).unwrap();
    assert_eq!(r.rows.len(), 2);
    let csv = std::fs::read_to_string(ab.join("ablation.csv")).unwrap();
    assert!(csv.starts_with("variant,"));
    assert_eq!(csv.lines().count(), 3);
}

#[test]
fn memstat_zo_peak_is_below_trainer_peak() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["memstat", "--seed", "0", "--out", s(dir.path())];
    args.extend(QUICK);
    let out = zoedit(&args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let r: Value = serde_json::from_slice(&std::fs::read(dir.path().join("memstat.json")).unwrap()).unwrap();
    assert_eq!(r["tracked"], true);
    let zo = r["zo_peak_bytes"].as_u64().unwrap();
    let trainer = r["trainer_peak_bytes"].as_u64().unwrap();
    assert!(zo > 0 && zo < trainer, "{zo} vs {trainer}");
    assert!(r["ratio"].as_f64().unwrap() > 0.0);
    assert!(r["activation_share"].as_f64().unwrap() >= 0.2, "{r}");
    assert!(r["activation_bytes"].as_u64().is_some());
}

#[test]
fn shipped_sample_config_runs() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../..");
    let dir = tempfile::tempdir().unwrap();
    let model = world().join("model.ckpt");
    let mut args = vec!["edit", "--config", "data/sample_config.json", "--model", s(&model), "--out", s(dir.path())];
    args.extend(QUICK);
    let out = Command::new(env!("CARGO_BIN_EXE_zoedit")).current_dir(&root).args(&args).output().unwrap();
    assert!(matches!(out.status.code(), Some(0 | 1)), "{}", String::from_utf8_lossy(&out.stderr));
    let vocab = Vocab::load(&root.join("data/toy/vocab.txt")).unwrap();
    assert_eq!(load_dataset(&root.join("data/toy/dataset.jsonl"), &vocab, 0).unwrap().len(), 10);
}

#[test]
fn eval_exits_one_below_threshold() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config();
    let model = world().join("model.ckpt");
    // Scoring the unedited model against itself: no edit succeeds, nothing moves.
    let base = ["eval", "--config", s(&cfg), "--edited", s(&model), "--out", s(dir.path())];
    let mut strict = base.to_vec();
    strict.extend(["--min-success", "0.5"]);
    assert_eq!(zoedit(&strict).status.code(), Some(1));
    let mut loose = base.to_vec();
    loose.extend(["--min-locality", "1.0"]);
    assert_eq!(zoedit(&loose).status.code(), Some(0));
}

#[test]
fn policy_file_selects_fp_tensors() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config();
    let policy = dir.path().join("policy.json");
    let p = zoedit_core::quant::MixedPrecisionPolicy::for_edit_layer(1);
    std::fs::write(&policy, serde_json::to_string(&p).unwrap()).unwrap();
    let out = zoedit(&["quantize", "--config", s(&cfg), "--policy", s(&policy), "--out", s(dir.path())]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let q = checkpoint::import_checkpoint(&dir.path().join("model_w8a16.ckpt")).unwrap();
    assert_eq!(q.quant().unwrap().policy, p);
    assert!(!q.tensor(&zoedit_core::model::names::down_proj(1)).unwrap().is_quantized());
    assert!(q.tensor(&zoedit_core::model::names::down_proj(0)).unwrap().is_quantized());
}

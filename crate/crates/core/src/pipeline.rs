//! End-to-end commands shared by the command-line front end and the tests:
//! dataset synthesis, label adjudication, training, evaluation and the
//! self-check.
//!
//! Every command takes a resolved [`RunConfig`], holds a lock on its output
//! directory for its whole run and leaves a frozen `config.json` next to its
//! outputs.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};

use log::{info, warn};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::adjudicator::{batch_adjudicate_lines, BatchOutcome};
use crate::classes::{Abnormality, N_CLASSES, PREVALENCE_TRAIN};
use crate::data::{load_dataset, write_json, JsonlWriter, LabeledSet, ManifestEntry};
use crate::error::{Error, Result};
use crate::evalkit::{self, MetricsReport};
use crate::gradsuite;
use crate::model::io::write_atomic;
use crate::model::{load_weights, save_weights, ResNet, ResNetConfig};
use crate::seeds;
use crate::synthgen::{self, DatasetSpec, Prevalences};
use crate::train::{self, predict_set, split_dataset, TrainConfig, TrainLog};

pub const CONFIG_FILE: &str = "config.json";
pub const LOCK_FILE: &str = ".lock";
pub const WEIGHTS_FILE: &str = "model.rnw";
pub const LAST_WEIGHTS_FILE: &str = "last.rnw";
pub const TRAIN_LOG_FILE: &str = "train.jsonl";
pub const TIMING_FILE: &str = "timing.jsonl";
pub const SPLIT_FILE: &str = "split.json";
pub const DECISIONS_FILE: &str = "decisions.jsonl";
pub const SUMMARY_FILE: &str = "summary.json";
pub const THRESHOLDS_FILE: &str = "thresholds.json";

const MODEL_SEED_STREAM: u64 = 10;
const SPLIT_SEED_STREAM: u64 = 11;
const CALIBRATION_SEED_STREAM: u64 = 12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSettings {
    pub n: usize,
    /// Keyed by class abbreviation.
    pub prevalence: BTreeMap<String, f64>,
}

impl Default for SynthSettings {
    fn default() -> Self {
        Self {
            n: 1000,
            prevalence: Abnormality::ALL
                .iter()
                .map(|c| (c.abbrev().to_string(), PREVALENCE_TRAIN[c.index()]))
                .collect(),
        }
    }
}

impl SynthSettings {
    pub fn prevalences(&self) -> Result<Prevalences> {
        let mut p = Prevalences([0.0; N_CLASSES]);
        for c in Abnormality::ALL {
            let v = self
                .prevalence
                .get(c.abbrev())
                .ok_or_else(|| Error::Config(format!("synth.prevalence.{} is missing", c.abbrev())))?;
            p.set(c, *v);
        }
        p.validate()?;
        Ok(p)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSettings {
    /// Share of the evaluated dataset set aside for choosing thresholds when
    /// neither thresholds nor a calibration dataset are given.
    pub calibration_fraction: f64,
    pub batch_size: usize,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            calibration_fraction: 0.3,
            batch_size: 64,
        }
    }
}

/// Every tunable of every command. Serialized as a flat object with dotted
/// keys (`train.epochs`, `synth.prevalence.ST`).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Master seed. Model init, data split and the training stream all
    /// derive from it; it also replaces `train.seed`.
    pub seed: u64,
    pub model: ResNetConfig,
    pub train: TrainConfig,
    pub synth: SynthSettings,
    pub eval: EvalSettings,
}

fn flatten(prefix: &str, v: &Value, out: &mut BTreeMap<String, Value>) {
    match v {
        Value::Object(map) if !map.is_empty() => {
            for (k, child) in map {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                flatten(&key, child, out);
            }
        }
        _ => {
            out.insert(prefix.to_string(), v.clone());
        }
    }
}

fn unflatten(flat: &BTreeMap<String, Value>) -> Value {
    let mut root = Map::new();
    for (key, v) in flat {
        let mut node = &mut root;
        let mut parts = key.split('.').peekable();
        while let Some(part) = parts.next() {
            if parts.peek().is_none() {
                node.insert(part.to_string(), v.clone());
            } else {
                node = node
                    .entry(part.to_string())
                    .or_insert_with(|| Value::Object(Map::new()))
                    .as_object_mut()
                    .expect("dotted keys never collide with leaves");
            }
        }
    }
    Value::Object(root)
}

/// Parses an override value as JSON, falling back to a bare string.
fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

impl RunConfig {
    pub fn to_flat(&self) -> BTreeMap<String, Value> {
        let mut out = BTreeMap::new();
        flatten("", &serde_json::to_value(self).expect("config serializes"), &mut out);
        out
    }

    pub fn from_flat(flat: &BTreeMap<String, Value>) -> Result<Self> {
        let cfg: Self = serde_json::from_value(unflatten(flat))
            .map_err(|e| Error::Config(format!("invalid configuration: {e}")))?;
        Ok(cfg)
    }

    /// Defaults, then the config file (flat dotted keys; nested objects are
    /// accepted too), then `key=value` overrides. Unknown keys are errors.
    pub fn resolve(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut flat = Self::default().to_flat();
        let mut apply = |key: &str, v: Value| -> Result<()> {
            // prevalence entries are a map, so new class keys are caught at
            // validation instead
            if !flat.contains_key(key) && !key.starts_with("synth.prevalence.") {
                return Err(Error::Config(format!("unknown config key {key:?}")));
            }
            flat.insert(key.to_string(), v);
            Ok(())
        };
        if let Some(path) = file {
            let text =
                fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
            let v: Value =
                serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            if !v.is_object() {
                return Err(Error::Config(format!("{} must hold a JSON object", path.display())));
            }
            let mut from_file = BTreeMap::new();
            flatten("", &v, &mut from_file);
            // a frozen config can be replayed; its bookkeeping keys are ignored
            for (k, v) in from_file {
                if k == "command" || k.starts_with("paths.") {
                    continue;
                }
                apply(&k, v)?;
            }
        }
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
            apply(k.trim(), parse_value(v.trim()))?;
        }
        let mut cfg = Self::from_flat(&flat)?;
        cfg.train.seed = cfg.seed;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        for k in self.synth.prevalence.keys() {
            k.parse::<Abnormality>()
                .map_err(|_| Error::Config(format!("synth.prevalence.{k}: unknown class")))?;
        }
        self.synth.prevalences()?;
        let f = self.eval.calibration_fraction;
        if !(f > 0.0 && f < 1.0) {
            return Err(Error::Config(format!(
                "eval.calibration_fraction must be in (0, 1), got {f}"
            )));
        }
        if self.eval.batch_size == 0 {
            return Err(Error::Config("eval.batch_size must be positive".into()));
        }
        Ok(())
    }

    /// Writes the resolved config, plus the command and its paths, as flat
    /// JSON.
    pub fn freeze(&self, dir: &Path, command: &str, paths: &[(&str, &Path)]) -> Result<()> {
        let mut flat = self.to_flat();
        flat.insert("command".into(), Value::String(command.into()));
        for (name, p) in paths {
            flat.insert(format!("paths.{name}"), Value::String(p.display().to_string()));
        }
        write_json(&dir.join(CONFIG_FILE), &flat)
    }
}

/// Exclusive ownership of an output directory for the lifetime of a command.
#[derive(Debug)]
pub struct OutDirLock {
    path: PathBuf,
}

impl OutDirLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        let path = dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                writeln!(f, "{}", std::process::id())?;
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Input(format!(
                "{} is in use by another run (remove {} if it is stale)",
                dir.display(),
                path.display()
            ))),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for OutDirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// Generates a dataset into `out`.
pub fn synth(cfg: &RunConfig, out: &Path) -> Result<Vec<ManifestEntry>> {
    let _lock = OutDirLock::acquire(out)?;
    let spec = DatasetSpec {
        n: cfg.synth.n,
        prevalences: cfg.synth.prevalences()?,
        seed: cfg.seed,
    };
    spec.validate()?;
    info!("generating {} exams into {}", spec.n, out.display());
    let entries = synthgen::write_dataset(&spec, out)?;
    cfg.freeze(out, "synth", &[("out", out)])?;
    Ok(entries)
}

/// Adjudicates a JSON-lines file of source flags and measures. A directory
/// is read through its `sources.jsonl`.
pub fn adjudicate(input: &Path, out: &Path) -> Result<BatchOutcome> {
    let file = if input.is_dir() {
        input.join("sources.jsonl")
    } else {
        input.to_path_buf()
    };
    let text = fs::read_to_string(&file).map_err(|e| Error::Input(format!("cannot read {}: {e}", file.display())))?;
    let _lock = OutDirLock::acquire(out)?;
    let outcome = batch_adjudicate_lines(text.lines());
    if outcome.summary.exams == 0 && outcome.summary.malformed == 0 {
        warn!("{} holds no exams", file.display());
    }
    let mut w = JsonlWriter::new(&out.join(DECISIONS_FILE));
    for r in outcome.records() {
        w.push(&r)?;
    }
    w.finish()?;
    write_json(&out.join(SUMMARY_FILE), &outcome.summary)?;
    let mut flat = BTreeMap::new();
    flat.insert("command", Value::String("adjudicate".into()));
    flat.insert("paths.input", Value::String(file.display().to_string()));
    flat.insert("paths.out", Value::String(out.display().to_string()));
    write_json(&out.join(CONFIG_FILE), &flat)?;
    Ok(outcome)
}

/// Loads a dataset directory at the model's input length.
pub fn load_labeled(dir: &Path, model: &ResNetConfig) -> Result<LabeledSet> {
    let exams = load_dataset(dir)?;
    if exams.is_empty() {
        return Err(Error::InsufficientData(format!("{} has no exams", dir.display())));
    }
    LabeledSet::from_exams(&exams, model.input_leads, model.input_samples)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SplitRecord {
    pub train: Vec<String>,
    pub validation: Vec<String>,
}

pub struct TrainRun {
    pub model: ResNet<f32>,
    pub log: TrainLog,
    pub split: SplitRecord,
}

/// Splits the dataset, trains and writes `model.rnw` (best validation),
/// `last.rnw`, `train.jsonl`, `timing.jsonl` and `split.json`.
pub fn train_run(dataset: &Path, cfg: &RunConfig, out: &Path) -> Result<TrainRun> {
    let _lock = OutDirLock::acquire(out)?;
    cfg.freeze(out, "train", &[("dataset", dataset), ("out", out)])?;
    let all = load_labeled(dataset, &cfg.model)?;
    let (tr, va) = split_dataset(
        &all.ids,
        cfg.train.validation_fraction,
        seeds::derive(cfg.seed, &[SPLIT_SEED_STREAM]),
    )?;
    let train_set = all.select(&tr);
    let val_set = all.select(&va);
    info!("{} training and {} validation exams", train_set.len(), val_set.len());
    let model = ResNet::build(&cfg.model, seeds::derive(cfg.seed, &[MODEL_SEED_STREAM]))?;
    info!("{} parameters", model.parameter_count());

    let outcome = train::train(model, &train_set, &val_set, &cfg.train)?;
    save_weights(&outcome.best, &out.join(WEIGHTS_FILE))?;
    save_weights(&outcome.last, &out.join(LAST_WEIGHTS_FILE))?;
    write_atomic(&out.join(TRAIN_LOG_FILE), outcome.log.to_jsonl()?.as_bytes())?;
    write_atomic(&out.join(TIMING_FILE), outcome.log.timing_jsonl().as_bytes())?;
    let split = SplitRecord {
        train: train_set.ids.clone(),
        validation: val_set.ids.clone(),
    };
    write_json(&out.join(SPLIT_FILE), &split)?;
    Ok(TrainRun {
        model: outcome.best,
        log: outcome.log,
        split,
    })
}

/// Where decision thresholds come from.
#[derive(Clone, Debug)]
pub enum ThresholdSource {
    Fixed([f64; N_CLASSES]),
    /// Max-F1 thresholds chosen on another dataset.
    Calibration(PathBuf),
    /// Max-F1 thresholds chosen on a seeded share of the evaluated dataset,
    /// which is then excluded from the report.
    HeldOut,
}

#[derive(Clone, Debug, Serialize)]
struct ThresholdRecord<'a> {
    source: &'a str,
    calibration_exams: usize,
    thresholds: BTreeMap<&'static str, f64>,
}

pub fn parse_thresholds(s: &str) -> Result<[f64; N_CLASSES]> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    if parts.len() != N_CLASSES {
        return Err(Error::Config(format!(
            "expected {N_CLASSES} thresholds, got {}",
            parts.len()
        )));
    }
    let mut out = [0.0f64; N_CLASSES];
    for (t, p) in out.iter_mut().zip(parts) {
        *t = p
            .parse()
            .map_err(|_| Error::Config(format!("threshold {p:?} is not a number")))?;
        if !t.is_finite() {
            return Err(Error::Config(format!("threshold {p:?} is not finite")));
        }
    }
    Ok(out)
}

/// Evaluates saved weights on a dataset and writes `report.json`, the PR
/// curves and `thresholds.json`.
pub fn eval_run(
    dataset: &Path,
    weights: &Path,
    thresholds: &ThresholdSource,
    cfg: &RunConfig,
    out: &Path,
) -> Result<MetricsReport> {
    let _lock = OutDirLock::acquire(out)?;
    let mut paths = vec![("dataset", dataset), ("weights", weights), ("out", out)];
    if let ThresholdSource::Calibration(p) = thresholds {
        paths.push(("calibration", p.as_path()));
    }
    cfg.freeze(out, "eval", &paths)?;
    let model = load_weights(weights)?.into_model()?;
    let mcfg = model.config().clone();
    let all = load_labeled(dataset, &mcfg)?;
    let bs = cfg.eval.batch_size;

    let (eval_set, chosen, source, n_cal) = match thresholds {
        ThresholdSource::Fixed(t) => (all, *t, "fixed", 0),
        ThresholdSource::Calibration(dir) => {
            let cal = load_labeled(dir, &mcfg)?;
            let t = evalkit::select_thresholds(&predict_set(&model, &cal, bs)?, cal.labels())?;
            (all, t, "calibration", cal.len())
        }
        ThresholdSource::HeldOut => {
            let (rest, cal_idx) = split_dataset(
                &all.ids,
                cfg.eval.calibration_fraction,
                seeds::derive(cfg.seed, &[CALIBRATION_SEED_STREAM]),
            )?;
            let cal = all.select(&cal_idx);
            let t = evalkit::select_thresholds(&predict_set(&model, &cal, bs)?, cal.labels())?;
            (all.select(&rest), t, "held-out", cal.len())
        }
    };
    info!("evaluating {} exams with {source} thresholds", eval_set.len());
    let probs = predict_set(&model, &eval_set, bs)?;
    let report = evalkit::evaluate(&probs, eval_set.labels(), &chosen)?;
    report.write(out)?;
    write_json(
        &out.join(THRESHOLDS_FILE),
        &ThresholdRecord {
            source,
            calibration_exams: n_cal,
            thresholds: Abnormality::ALL
                .iter()
                .map(|c| (c.abbrev(), chosen[c.index()]))
                .collect(),
        },
    )?;
    Ok(report)
}

#[derive(Clone, Debug, Serialize)]
pub struct CheckLine {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

/// Gradient checks of every op and the miniature network, plus the metric
/// golden test against published confusion matrices.
pub fn selfcheck() -> Result<Vec<CheckLine>> {
    let mut lines: Vec<CheckLine> = gradsuite::full_suite()?
        .into_iter()
        .map(|c| CheckLine {
            passed: c.passed(),
            detail: format!(
                "max rel error {:.2e} < {:.0e} over {} coordinates",
                c.max_rel_error, c.tolerance, c.checked
            ),
            name: format!("gradient: {}", c.name),
        })
        .collect();
    let dev = evalkit::reference::max_deviation();
    lines.push(CheckLine {
        name: "metrics: reference confusion matrices".into(),
        passed: dev <= evalkit::reference::TOLERANCE,
        detail: format!(
            "max deviation {dev:.2e} (24 values, tolerance {:.0e})",
            evalkit::reference::TOLERANCE
        ),
    });
    Ok(lines)
}

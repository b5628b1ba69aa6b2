//! Command implementations behind the `zsl` binary: configuration
//! resolution, ablations, and the synth, train, eval, gradcheck and export
//! commands.

use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use zsl_core::evaluate::{self, EvalMode, ExportSummary};
use zsl_core::gradcheck::{self, SuiteOptions, SuiteReport};
use zsl_core::inference::InferenceConfig;
use zsl_core::metrics::{EvalReport, PartAssignment};
use zsl_core::model::{self, LossMode, Model, ModelConfig, PartSource};
use zsl_core::synth::{self, write_atomic, SynthConfig, ZslDataset};
use zsl_core::train::{self, EpochRecord, TrainConfig};

pub const RESOLVED_CONFIG: &str = "resolved_config.json";
pub const TRAIN_LOG: &str = "train_log.jsonl";
pub const CHECKPOINT_DIR: &str = "checkpoint";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Runtime(String),
    #[error("{0}")]
    CheckFailed(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
            CliError::CheckFailed(_) => 3,
        }
    }
}

impl From<zsl_core::Error> for CliError {
    fn from(e: zsl_core::Error) -> Self {
        use zsl_core::Error as E;
        match e {
            E::Config(_) | E::Data(_) | E::Checkpoint(_) | E::Json(_) => CliError::Validation(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

fn d_betas() -> Vec<f64> {
    vec![1.0]
}

/// Fusion weights swept by `eval --beta-sweep`.
pub const BETA_SWEEP: [f64; 4] = [0.0, 0.5, 1.0, 2.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSettings {
    /// One report per value.
    #[serde(default = "d_betas")]
    pub betas: Vec<f64>,
    #[serde(default)]
    pub assignment: PartAssignment,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings {
            betas: d_betas(),
            assignment: PartAssignment::Majority,
        }
    }
}

/// Everything a command can be configured with, as one JSON document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Seed for evaluation baselines and the gradient suite.
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub synth: SynthConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub inference: InferenceConfig,
    #[serde(default)]
    pub eval: EvalSettings,
    /// Ablations applied to the model config, by name.
    #[serde(default)]
    pub ablations: Vec<Ablation>,
}

impl RunConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Validation(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Validation(format!("config {}: {e}", path.display())))
    }

    /// Model config after the listed ablations.
    pub fn effective_model(&self) -> ModelConfig {
        let mut m = self.model.clone();
        for a in &self.ablations {
            a.apply(&mut m);
        }
        m
    }

    pub fn validate(&self) -> CliResult<()> {
        self.synth.validate()?;
        self.effective_model().validate()?;
        self.train.validate()?;
        self.inference.validate()?;
        if self.eval.betas.is_empty() {
            return Err(CliError::Validation("eval.betas must not be empty".into()));
        }
        if let Some(b) = self.eval.betas.iter().find(|b| !(**b >= 0.0)) {
            return Err(CliError::Validation(format!("beta must be >= 0, got {b}")));
        }
        Ok(())
    }

    /// Writes the config as pretty JSON, renamed into place.
    pub fn persist(&self, path: &Path) -> CliResult<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| CliError::Runtime(e.to_string()))?;
        write_atomic(path, text.as_bytes())?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Ablation {
    NoMaLoss,
    NoParts,
    RandomParts,
    Loss(LossMode),
    SharedBackbone,
}

impl Ablation {
    pub fn apply(self, m: &mut ModelConfig) {
        match self {
            Ablation::NoMaLoss => m.ma_loss = false,
            Ablation::NoParts => m.parts = PartSource::None,
            Ablation::RandomParts => m.parts = PartSource::Random,
            Ablation::Loss(l) => m.loss = l,
            Ablation::SharedBackbone => m.shared_backbone = true,
        }
    }

    pub fn name(self) -> String {
        match self {
            Ablation::NoMaLoss => "no-ma-loss".into(),
            Ablation::NoParts => "no-parts".into(),
            Ablation::RandomParts => "random-parts".into(),
            Ablation::Loss(LossMode::Softmax) => "loss=softmax".into(),
            Ablation::Loss(LossMode::Cct) => "loss=cct".into(),
            Ablation::Loss(LossMode::Combined) => "loss=combined".into(),
            Ablation::SharedBackbone => "shared-backbone".into(),
        }
    }
}

impl FromStr for Ablation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Ok(match s {
            "no-ma-loss" => Ablation::NoMaLoss,
            "no-parts" | "baseline" => Ablation::NoParts,
            "random-parts" => Ablation::RandomParts,
            "loss=softmax" => Ablation::Loss(LossMode::Softmax),
            "loss=cct" => Ablation::Loss(LossMode::Cct),
            "loss=combined" => Ablation::Loss(LossMode::Combined),
            "shared-backbone" => Ablation::SharedBackbone,
            other => {
                return Err(format!(
                    "unknown ablation '{other}'; expected one of no-ma-loss, no-parts, random-parts, \
                     loss=softmax, loss=cct, loss=combined, shared-backbone"
                ))
            }
        })
    }
}

impl Serialize for Ablation {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.name())
    }
}

impl<'de> Deserialize<'de> for Ablation {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Command-line values that override the config file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub ablations: Vec<Ablation>,
    pub epochs: Option<usize>,
    pub num_classes: Option<usize>,
    pub num_unseen: Option<usize>,
    pub betas: Option<Vec<f64>>,
}

/// Built-in defaults, then the file, then flags.
pub fn resolve(file: Option<&Path>, o: &Overrides) -> CliResult<RunConfig> {
    let mut cfg = match file {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = o.seed {
        cfg.seed = s;
        cfg.synth.seed = s;
        cfg.train.seed = s;
    }
    for a in &o.ablations {
        if !cfg.ablations.contains(a) {
            cfg.ablations.push(*a);
        }
    }
    if let Some(e) = o.epochs {
        cfg.train.epochs = e;
    }
    if let Some(n) = o.num_classes {
        cfg.synth.num_classes = n;
    }
    if let Some(n) = o.num_unseen {
        cfg.synth.num_unseen = n;
    }
    if let Some(b) = &o.betas {
        cfg.eval.betas = b.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn need<'a>(p: Option<&'a Path>, flag: &str) -> CliResult<&'a Path> {
    p.ok_or_else(|| CliError::Validation(format!("{flag} is required for this command")))
}

/// Generates and saves a dataset; returns it.
pub fn cmd_synth(cfg: &RunConfig, out: &Path) -> CliResult<ZslDataset> {
    let ds = synth::generate(&cfg.synth)?;
    synth::save(&ds, out)?;
    cfg.persist(&out.join(RESOLVED_CONFIG))?;
    Ok(ds)
}

pub fn summarize_dataset(ds: &ZslDataset) -> String {
    format!(
        "{} classes ({} seen, {} unseen), {}px images; train {}, val {}, test_seen {}, test_unseen {}",
        ds.classes.len(),
        ds.seen().len(),
        ds.unseen().len(),
        ds.image_size(),
        ds.train.len(),
        ds.val.len(),
        ds.test_seen.len(),
        ds.test_unseen.len()
    )
}

pub fn load_dataset(dir: Option<&Path>) -> CliResult<ZslDataset> {
    Ok(synth::load(need(dir, "--dataset")?)?)
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LogRecord {
    pub epoch: usize,
    pub l_ma: f64,
    pub l_cls: f64,
    pub l_cct: f64,
    pub overlap: Option<f64>,
    pub val_mca: f64,
}

impl From<&EpochRecord> for LogRecord {
    fn from(r: &EpochRecord) -> Self {
        LogRecord {
            epoch: r.epoch,
            l_ma: r.l_ma,
            l_cls: r.l_cls,
            l_cct: r.l_cct,
            overlap: r.overlap,
            val_mca: r.val_mca,
        }
    }
}

/// Saves into a sibling directory, then swaps it in.
pub fn save_checkpoint_atomic(model: &Model, seen_classes: &[String], dir: &Path) -> CliResult<()> {
    let tmp = dir.with_extension("tmp");
    let old = dir.with_extension("old");
    if tmp.exists() {
        fs::remove_dir_all(&tmp)?;
    }
    model::save_checkpoint(model, seen_classes, &tmp)?;
    if dir.exists() {
        if old.exists() {
            fs::remove_dir_all(&old)?;
        }
        fs::rename(dir, &old)?;
    }
    fs::rename(&tmp, dir)?;
    if old.exists() {
        fs::remove_dir_all(&old)?;
    }
    Ok(())
}

fn seen_names(ds: &ZslDataset) -> Vec<String> {
    ds.seen().iter().map(|&c| ds.classes[c].name.clone()).collect()
}

/// Trains on the dataset. Each epoch appends a log line and replaces the
/// checkpoint, so an aborted run keeps the last completed epoch.
pub fn cmd_train(cfg: &RunConfig, ds: &ZslDataset, out: &Path) -> CliResult<Model> {
    fs::create_dir_all(out)?;
    cfg.persist(&out.join(RESOLVED_CONFIG))?;
    let mut model = train::init_model(cfg.effective_model(), ds, cfg.train.seed)?;
    let names = seen_names(ds);
    let ckpt = out.join(CHECKPOINT_DIR);
    let mut log = File::create(out.join(TRAIN_LOG))?;
    let mut on_epoch = |m: &Model, r: &EpochRecord| -> zsl_core::Result<()> {
        let line = serde_json::to_string(&LogRecord::from(r))?;
        writeln!(log, "{line}")?;
        log.flush()?;
        save_checkpoint_atomic(m, &names, &ckpt).map_err(|e| zsl_core::Error::Checkpoint(e.to_string()))?;
        Ok(())
    };
    match train::train(&mut model, ds, &cfg.train, &mut on_epoch) {
        Ok(_) => {}
        Err(e @ (zsl_core::Error::Training(_) | zsl_core::Error::Numeric(_) | zsl_core::Error::Tensor(_))) => {
            let kept = if ckpt.join(model::CHECKPOINT_MANIFEST).exists() {
                format!("; last good checkpoint kept at {}", ckpt.display())
            } else {
                "; no epoch completed, no checkpoint written".to_string()
            };
            return Err(CliError::Runtime(format!("{e}{kept}")));
        }
        Err(e) => return Err(e.into()),
    }
    if cfg.train.epochs == 0 {
        save_checkpoint_atomic(&model, &names, &ckpt)?;
    }
    Ok(model)
}

/// Loads a checkpoint and checks it was trained on this dataset's classes.
pub fn load_compatible(checkpoint: &Path, ds: &ZslDataset) -> CliResult<Model> {
    let (model, classes) = model::load_checkpoint(checkpoint)?;
    let expected = seen_names(ds);
    if classes != expected {
        return Err(CliError::Validation(format!(
            "checkpoint seen classes {classes:?} do not match the dataset's {expected:?}"
        )));
    }
    if model.semantic_dim != ds.config.semantic_dim() || model.config.image_size != ds.image_size() {
        return Err(CliError::Validation(
            "checkpoint semantic dimension or image size does not match the dataset".into(),
        ));
    }
    Ok(model)
}

pub fn cmd_eval(cfg: &RunConfig, model: &Model, ds: &ZslDataset, mode: EvalMode) -> CliResult<Vec<EvalReport>> {
    Ok(match mode {
        EvalMode::Zsl => evaluate::zsl_reports(model, ds, cfg.inference, &cfg.eval.betas, cfg.seed)?,
        EvalMode::Gzsl => evaluate::gzsl_reports(model, ds, cfg.inference, &cfg.eval.betas, cfg.seed)?,
        EvalMode::Detect => vec![evaluate::detect_report(model, ds, cfg.eval.assignment, cfg.seed)?],
    })
}

/// Reports plus the config that produced them.
#[derive(Debug, Serialize)]
pub struct EvalOutput<'a> {
    pub mode: EvalMode,
    pub config: &'a RunConfig,
    pub reports: &'a [EvalReport],
}

pub fn write_eval(path: &Path, out: &EvalOutput) -> CliResult<()> {
    let text = serde_json::to_string_pretty(out).map_err(|e| CliError::Runtime(e.to_string()))?;
    write_atomic(path, text.as_bytes())?;
    Ok(())
}

/// Runs the gradient suite; a failing check is a `CheckFailed` error
/// carrying the table.
pub fn cmd_gradcheck(cfg: &RunConfig, inject_fault: bool) -> CliResult<SuiteReport> {
    let report = gradcheck::run_suite(SuiteOptions {
        seed: cfg.seed,
        inject_diversity_fault: inject_fault,
    })?;
    Ok(report)
}

pub fn cmd_export(cfg: &RunConfig, model: &Model, ds: &ZslDataset, n: usize, out: &Path) -> CliResult<ExportSummary> {
    let summary = evaluate::export_samples(model, ds, n, out, cfg.seed)?;
    cfg.persist(&out.join(RESOLVED_CONFIG))?;
    Ok(summary)
}

/// Parses `0,0.5,1` into numbers.
pub fn parse_betas(s: &str) -> Result<Vec<f64>, String> {
    s.split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("bad beta '{p}': {e}")))
        .collect()
}

pub fn default_out(out: Option<&Path>, fallback: &str) -> PathBuf {
    out.map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from(fallback))
}

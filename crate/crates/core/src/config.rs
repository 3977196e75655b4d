//! The TOML run configuration shared by every subcommand.
//!
//! ```toml
//! [model]     # architecture
//! [train]     # optimisation schedule and loss
//! [degrade]   # training-pair synthesis
//! [paths]     # inputs and outputs
//! [prepare]   # prepare-data options
//! [eval]      # evaluation options
//! [ablate]    # ablation matrix
//! [preprocess]
//! ```
//!
//! Values are layered: defaults, then the file, then `--desk`, then each
//! `--set section.key=value` in order.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::degradation::DegradeSpec;
use crate::error::{Error, Result};
use crate::model::{ContextVariant, ModelConfig, UpsampleVariant};
use crate::training::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// HR images that training pairs are cut from.
    pub source_dir: PathBuf,
    pub manifest: PathBuf,
    pub checkpoint_dir: PathBuf,
    /// Checkpoint used by eval and preprocess; the latest in `checkpoint_dir` when empty.
    pub checkpoint: Option<PathBuf>,
    pub train_log: PathBuf,
    /// Full-size HR images for evaluation and ablation validation.
    pub test_dir: PathBuf,
    pub report_dir: PathBuf,
    pub input_dir: PathBuf,
    pub output_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            source_dir: "data/hr".into(),
            manifest: "run/manifest.jsonl".into(),
            checkpoint_dir: "run/checkpoints".into(),
            checkpoint: None,
            train_log: "run/train_log.jsonl".into(),
            test_dir: "data/test".into(),
            report_dir: "run/reports".into(),
            input_dir: "data/corpus".into(),
            output_dir: "run/enhanced".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PrepareOptions {
    /// Number of patch pairs in the manifest.
    pub count: usize,
}

impl Default for PrepareOptions {
    fn default() -> Self {
        PrepareOptions { count: 1000 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalOptions {
    pub qfs: Vec<u8>,
    pub ensemble: bool,
    /// Border pixels ignored by the metrics.
    pub shave: usize,
    /// Also score bicubic upsampling of the compressed input.
    pub baseline: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            qfs: vec![10, 20, 40],
            ensemble: false,
            shave: 4,
            baseline: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateOptions {
    pub contexts: Vec<String>,
    pub upsamplers: Vec<String>,
    /// LR-reconstruction weights trained with the base architecture.
    pub lambdas: Vec<f64>,
    /// Quality factor of the validation set.
    pub val_qf: u8,
}

impl Default for AblateOptions {
    fn default() -> Self {
        AblateOptions {
            contexts: ContextVariant::ALL.iter().map(|v| v.name().to_string()).collect(),
            upsamplers: UpsampleVariant::ALL.iter().map(|v| v.name().to_string()).collect(),
            lambdas: vec![0.0, 1.0, 16.0],
            val_qf: 20,
        }
    }
}

impl AblateOptions {
    pub fn variants(&self) -> Result<(Vec<ContextVariant>, Vec<UpsampleVariant>)> {
        let ctx = self.contexts.iter().map(|s| ContextVariant::parse(s)).collect::<Result<Vec<_>>>()?;
        let up = self.upsamplers.iter().map(|s| UpsampleVariant::parse(s)).collect::<Result<Vec<_>>>()?;
        Ok((ctx, up))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessOptions {
    /// Resize the enhanced output back to the input size.
    pub downsample: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub degrade: DegradeSpec,
    pub paths: Paths,
    pub prepare: PrepareOptions,
    pub eval: EvalOptions,
    pub ablate: AblateOptions,
    pub preprocess: PreprocessOptions,
}

/// Overrides that switch a configuration to the CPU-sized preset.
pub fn desk_overrides() -> Vec<(String, toml::Value)> {
    let m = ModelConfig::desk();
    let t = TrainConfig::desk();
    let int = |v: usize| toml::Value::Integer(v as i64);
    let uint = |v: u64| toml::Value::Integer(v as i64);
    vec![
        ("model.n_f".into(), int(m.n_f)),
        ("model.num_rrdb".into(), int(m.num_rrdb)),
        ("train.batch_size".into(), int(t.batch_size)),
        ("train.hr_patch".into(), int(t.hr_patch)),
        ("train.lr_init".into(), toml::Value::Float(t.lr_init)),
        ("train.restart_period".into(), uint(t.restart_period)),
        ("train.total_iters".into(), uint(t.total_iters)),
        ("train.checkpoint_every".into(), uint(t.checkpoint_every)),
        ("degrade.hr_patch".into(), int(t.hr_patch)),
    ]
}

/// Splits `a.b=value`; the value is read as a TOML literal, or as a bare string.
pub fn parse_override(s: &str) -> Result<(String, toml::Value)> {
    let (key, raw) = s
        .split_once('=')
        .ok_or_else(|| Error::config("--set", format!("expected key=value, got {s:?}")))?;
    let key = key.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(Error::config("--set", format!("bad key {key:?}")));
    }
    let raw = raw.trim();
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    Ok((key.to_string(), value))
}

fn apply(root: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    let (last, path) = parts.split_last().expect("non-empty key");
    let mut table = root;
    for p in path {
        let entry = table.entry(p.to_string()).or_insert_with(|| toml::Value::Table(Default::default()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| Error::config(key.to_string(), format!("{p} is not a section")))?;
    }
    table.insert(last.to_string(), value);
    Ok(())
}

fn toml_err(field: &str, e: impl std::fmt::Display) -> Error {
    Error::config(field.to_string(), e.to_string().trim().to_string())
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<RunConfig> {
        RunConfig::layered(text, false, &[])
    }

    /// File text, then the desk preset if requested, then explicit overrides.
    pub fn layered(text: &str, desk: bool, overrides: &[(String, toml::Value)]) -> Result<RunConfig> {
        let mut root: toml::Table = toml::from_str(text).map_err(|e| toml_err("config", e))?;
        if desk {
            for (k, v) in desk_overrides() {
                apply(&mut root, &k, v)?;
            }
        }
        for (k, v) in overrides {
            apply(&mut root, k, v.clone())?;
        }
        let cfg: RunConfig = toml::Value::Table(root).try_into().map_err(|e| toml_err("config", e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, desk: bool, overrides: &[(String, toml::Value)]) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = RunConfig::layered(&text, desk, overrides)?;
        cfg.paths.resolve(path.parent().unwrap_or(Path::new("")));
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical TOML form.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }

    /// Checks values only; commands check the paths they need.
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate_with(&self.model)?;
        self.degrade.validate()?;
        if self.degrade.scale != self.model.scale {
            return Err(Error::config(
                "degrade.scale",
                format!("{} differs from model.scale {}", self.degrade.scale, self.model.scale),
            ));
        }
        if self.degrade.hr_patch != self.train.hr_patch {
            return Err(Error::config(
                "degrade.hr_patch",
                format!("{} differs from train.hr_patch {}", self.degrade.hr_patch, self.train.hr_patch),
            ));
        }
        if self.prepare.count == 0 {
            return Err(Error::config("prepare.count", "must be >= 1"));
        }
        if self.eval.qfs.is_empty() {
            return Err(Error::config("eval.qfs", "at least one quality factor is required"));
        }
        if let Some(q) = self.eval.qfs.iter().chain([&self.ablate.val_qf]).find(|q| !(1..=100).contains(*q)) {
            return Err(Error::config("eval.qfs", format!("quality {q} not in 1..=100")));
        }
        self.ablate.variants()?;
        if let Some(l) = self.ablate.lambdas.iter().find(|l| !(l.is_finite() && **l >= 0.0)) {
            return Err(Error::config("ablate.lambdas", format!("{l} is not a finite non-negative weight")));
        }
        Ok(())
    }
}

impl Paths {
    /// Makes relative paths relative to `base` (the config file's directory).
    pub fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        for p in [
            &mut self.source_dir,
            &mut self.manifest,
            &mut self.checkpoint_dir,
            &mut self.train_log,
            &mut self.test_dir,
            &mut self.report_dir,
            &mut self.input_dir,
            &mut self.output_dir,
        ] {
            fix(p);
        }
        if let Some(p) = self.checkpoint.as_mut() {
            fix(p);
        }
    }
}

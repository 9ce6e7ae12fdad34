//! The declarative run configuration.
//!
//! Every section has explicit defaults. Loading is strict: a key that does not
//! exist in the schema is rejected with its dotted path (`model.dropout`).
//! The schema is the serialized default configuration itself, so the
//! resolved config written next to every run's outputs names every key.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::network::ModelConfig;
use crate::roi_pipeline::{PreprocessOptions, SliceSelection};
use crate::trainer::{EvalConfig, FreezeSpec, Phase, TrainConfig};

pub const RESOLVED_CONFIG_FILE: &str = "resolved_config.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub volumes_dir: PathBuf,
    pub annotations_csv: PathBuf,
    pub patch_dir: PathBuf,
    pub i_min: f64,
    pub i_max: f64,
    /// Empty slices kept per nodule-bearing slice.
    pub keep_ratio: f64,
    pub half_depth_mm: f64,
    pub k_folds: usize,
    /// Fraction of lesions held out as the test split.
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            volumes_dir: PathBuf::new(),
            annotations_csv: PathBuf::new(),
            patch_dir: PathBuf::new(),
            i_min: 0.0,
            i_max: 255.0,
            keep_ratio: 1.0,
            half_depth_mm: 5.0,
            k_folds: 5,
            test_fraction: 0.0,
            seed: 0,
        }
    }
}

impl DataConfig {
    pub fn preprocess_options(&self) -> PreprocessOptions {
        PreprocessOptions {
            i_min: self.i_min,
            i_max: self.i_max,
            half_depth_mm: self.half_depth_mm,
            selection: SliceSelection {
                keep_ratio: self.keep_ratio,
                k_folds: self.k_folds,
                seed: self.seed,
                test_fraction: self.test_fraction,
            },
        }
    }
}

/// Settings that differ between pretraining and fine-tuning.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseConfig {
    pub epochs: usize,
    pub lr0: f64,
    pub decay_factor: f64,
    pub decay_period_epochs: usize,
    pub std_enabled: bool,
}

impl PhaseConfig {
    fn from_train(t: &TrainConfig) -> Self {
        Self {
            epochs: t.epochs,
            lr0: t.lr0,
            decay_factor: t.decay_factor,
            decay_period_epochs: t.decay_period_epochs,
            std_enabled: t.std_enabled,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    /// Seeds weight initialization, shuffling and augmentation.
    pub seed: u64,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub loss_weights: crate::objectives::LossWeights,
    pub pretrain: PhaseConfig,
    pub finetune: PhaseConfig,
    /// Checkpoint to start from (transfer learning).
    pub resume: Option<PathBuf>,
}

impl Default for TrainSection {
    fn default() -> Self {
        let pt = TrainConfig::pretrain();
        Self {
            seed: pt.seed,
            batch_size: pt.batch_size,
            weight_decay: pt.weight_decay,
            adam_beta1: pt.adam_beta1,
            adam_beta2: pt.adam_beta2,
            adam_eps: pt.adam_eps,
            loss_weights: pt.loss_weights,
            pretrain: PhaseConfig::from_train(&pt),
            finetune: PhaseConfig::from_train(&TrainConfig::finetune()),
            resume: None,
        }
    }
}

impl TrainSection {
    pub fn for_phase(&self, phase: Phase) -> TrainConfig {
        let p = match phase {
            Phase::Pretrain => self.pretrain,
            Phase::Finetune => self.finetune,
        };
        TrainConfig {
            phase,
            epochs: p.epochs,
            batch_size: self.batch_size,
            lr0: p.lr0,
            decay_factor: p.decay_factor,
            decay_period_epochs: p.decay_period_epochs,
            weight_decay: self.weight_decay,
            adam_beta1: self.adam_beta1,
            adam_beta2: self.adam_beta2,
            adam_eps: self.adam_eps,
            seed: self.seed,
            std_enabled: p.std_enabled,
            loss_weights: self.loss_weights,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainSection,
    /// Parameter groups held fixed during training.
    pub freeze: Vec<String>,
    pub eval: EvalConfig,
}

impl RunConfig {
    /// Parses and validates a JSON document. Relative paths are resolved
    /// against `base_dir`.
    pub fn from_json(text: &str, base_dir: &Path) -> Result<Self> {
        let value: Value = serde_json::from_str(text).map_err(|e| Error::Config(format!("invalid JSON: {e}")))?;
        let schema = serde_json::to_value(RunConfig::default())?;
        check_keys(&value, &schema, "")?;
        let mut cfg: RunConfig = serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))?;
        for p in [&mut cfg.data.volumes_dir, &mut cfg.data.annotations_csv, &mut cfg.data.patch_dir] {
            resolve(p, base_dir);
        }
        if let Some(p) = cfg.train.resume.as_mut() {
            resolve(p, base_dir);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_json(&text, base)
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        if !(d.i_max > d.i_min) {
            return Err(Error::Config(format!("data.i_max ({}) must exceed data.i_min ({})", d.i_max, d.i_min)));
        }
        if d.k_folds < 2 {
            return Err(Error::Config(format!("data.k_folds must be >= 2, got {}", d.k_folds)));
        }
        if !(d.half_depth_mm >= 0.0) {
            return Err(Error::Config("data.half_depth_mm must be >= 0".into()));
        }
        if !(d.keep_ratio >= 0.0) {
            return Err(Error::Config("data.keep_ratio must be >= 0".into()));
        }
        if !(0.0..1.0).contains(&d.test_fraction) {
            return Err(Error::Config("data.test_fraction must lie in [0, 1)".into()));
        }
        self.model.validate().map_err(|e| prefix("model", e))?;
        let resuming = self.train.resume.is_some();
        for phase in [Phase::Pretrain, Phase::Finetune] {
            self.train.for_phase(phase).validate(resuming).map_err(|e| prefix("train", e))?;
        }
        if !(self.eval.threshold > 0.0 && self.eval.threshold < 1.0) {
            return Err(Error::Config(format!("eval.threshold must lie in (0,1), got {}", self.eval.threshold)));
        }
        if self.eval.batch_size == 0 {
            return Err(Error::Config("eval.batch_size must be > 0".into()));
        }
        let dupes = self.freeze.len() - self.freeze.iter().collect::<BTreeSet<_>>().len();
        if dupes > 0 {
            return Err(Error::Config("freeze lists a group more than once".into()));
        }
        Ok(())
    }

    pub fn freeze_spec(&self) -> FreezeSpec {
        FreezeSpec::new(self.freeze.iter().cloned())
    }

    pub fn to_json_pretty(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Writes the resolved configuration into `dir`.
    pub fn write_resolved(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(RESOLVED_CONFIG_FILE);
        fs::write(&path, self.to_json_pretty()? + "\n").map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    /// Fails with the key path when a required path setting is empty.
    pub fn require_path<'a>(&self, key: &str, p: &'a Path) -> Result<&'a Path> {
        if p.as_os_str().is_empty() {
            Err(Error::Config(format!("{key} must be set")))
        } else {
            Ok(p)
        }
    }
}

fn prefix(section: &str, e: Error) -> Error {
    match e {
        Error::Config(m) if !m.starts_with(&format!("{section}.")) => Error::Config(format!("{section}: {m}")),
        other => other,
    }
}

fn resolve(p: &mut PathBuf, base: &Path) {
    if !p.as_os_str().is_empty() && p.is_relative() {
        *p = base.join(&*p);
    }
}

fn kind(v: &Value) -> &'static str {
    match v {
        Value::Null => "null",
        Value::Bool(_) => "boolean",
        Value::Number(_) => "number",
        Value::String(_) => "string",
        Value::Array(_) => "array",
        Value::Object(_) => "object",
    }
}

fn join(path: &str, key: &str) -> String {
    if path.is_empty() {
        key.to_string()
    } else {
        format!("{path}.{key}")
    }
}

// Null in the schema marks an optional field; its type is left to serde.
fn check_keys(value: &Value, schema: &Value, path: &str) -> Result<()> {
    let at = || if path.is_empty() { "<root>".to_string() } else { path.to_string() };
    match (value, schema) {
        (_, Value::Null) => Ok(()),
        (Value::Object(obj), Value::Object(fields)) => {
            for (k, v) in obj {
                let sub = join(path, k);
                let Some(s) = fields.get(k) else {
                    let valid: Vec<&str> = fields.keys().map(String::as_str).collect();
                    return Err(Error::Config(format!("unknown key {sub}; valid keys here: {}", valid.join(", "))));
                };
                check_keys(v, s, &sub)?;
            }
            Ok(())
        }
        (Value::Array(items), Value::Array(proto)) => match proto.first() {
            Some(p) => items
                .iter()
                .enumerate()
                .try_for_each(|(i, v)| check_keys(v, p, &format!("{path}[{i}]"))),
            None => Ok(()),
        },
        (v, s) if kind(v) == kind(s) => Ok(()),
        (v, s) => Err(Error::Config(format!("{}: expected {}, found {}", at(), kind(s), kind(v)))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        let cfg = RunConfig::from_json("{}", Path::new("/base")).unwrap();
        assert_eq!(cfg, RunConfig::default());
        let ft = cfg.train.for_phase(Phase::Finetune);
        assert_eq!((ft.epochs, ft.decay_factor, ft.std_enabled), (50, 0.75, true));
        let pt = cfg.train.for_phase(Phase::Pretrain);
        assert_eq!((pt.epochs, pt.decay_factor, pt.std_enabled), (200, 1.0, false));
    }

    #[test]
    fn unknown_keys_are_named() {
        let err = RunConfig::from_json(r#"{"model": {"dropout": 0.1}}"#, Path::new(".")).unwrap_err();
        assert!(matches!(err, Error::Config(ref m) if m.contains("model.dropout")), "{err}");
        let err = RunConfig::from_json(r#"{"train": {"finetune": {"lr": 1}}}"#, Path::new(".")).unwrap_err();
        assert!(err.to_string().contains("train.finetune.lr"));
        let err = RunConfig::from_json(r#"{"model": {"combination_placements": [{"classifier": "C2", "seg": "S3"}]}}"#, Path::new("."))
            .unwrap_err();
        assert!(err.to_string().contains("model.combination_placements[0].seg"), "{err}");
        let err = RunConfig::from_json(r#"{"eval": {"threshold": "high"}}"#, Path::new(".")).unwrap_err();
        assert!(err.to_string().contains("eval.threshold"));
    }

    #[test]
    fn resolved_config_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.data.patch_dir = "/data/patches".into();
        cfg.train.resume = Some("/ckpt".into());
        cfg.train.finetune.epochs = 0;
        cfg.freeze = vec!["S9".into()];
        cfg.model.std.lambda2_0 = 0.0;
        let text = cfg.to_json_pretty().unwrap();
        assert_eq!(RunConfig::from_json(&text, Path::new("/elsewhere")).unwrap(), cfg);
    }

    #[test]
    fn relative_paths_resolve_against_config_dir() {
        let cfg = RunConfig::from_json(r#"{"data": {"patch_dir": "p"}, "train": {"resume": "c"}}"#, Path::new("/cfg")).unwrap();
        assert_eq!(cfg.data.patch_dir, PathBuf::from("/cfg/p"));
        assert_eq!(cfg.train.resume, Some(PathBuf::from("/cfg/c")));
    }

    #[test]
    fn validation_errors() {
        for doc in [
            r#"{"data": {"i_min": 5, "i_max": 5}}"#,
            r#"{"data": {"k_folds": 1}}"#,
            r#"{"train": {"finetune": {"epochs": 0, "lr0": 0.001, "decay_factor": 0.75, "decay_period_epochs": 5, "std_enabled": true}}}"#,
            r#"{"eval": {"threshold": 1.5}}"#,
            r#"{"model": {"aspp_rates": []}}"#,
            r#"{"freeze": ["S1", "S1"]}"#,
        ] {
            assert!(matches!(RunConfig::from_json(doc, Path::new(".")), Err(Error::Config(_))), "{doc}");
        }
    }
}

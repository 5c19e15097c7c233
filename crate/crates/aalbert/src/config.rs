//! Run configuration: one TOML document with dotted-key sections
//! (`encoder.num_layers = 2`), every field defaulted, unknown keys
//! rejected by name, and `key=value` overrides that win over the file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::SyntheticCorpusSpec;
use crate::downstream::{DownstreamConfig, FeatureSource, FusionMode, Task, TrainMode};
use crate::encoder::EncoderConfig;
use crate::optim::AdamWConfig;
use crate::pretrain::{MaskPolicy, PretrainOptions};
use crate::probe::{ProbeConfig, ProbeDepth, ProbeTask};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("config parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("bad override {arg:?}: {reason}")]
    BadOverride { arg: String, reason: String },
    #[error("config rejected: {0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Corpus source: a directory of feature files with a manifest, or (when
/// absent) a generated synthetic corpus.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub data_dir: Option<PathBuf>,
    pub synthetic: SyntheticCorpusSpec,
}

/// Downstream-adaptation settings. The two learning rates mirror the two
/// training regimes: feature extraction (head only) runs at the faster
/// rate, fine-tuning (whole model) at the slower one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DownstreamSettings {
    pub task: Task,
    pub mode: TrainMode,
    pub fusion: FusionMode,
    pub source: FeatureSource,
    pub lr_weighted_sum: f64,
    pub lr_fine_tune: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub patience: usize,
    pub seed: u64,
}

impl Default for DownstreamSettings {
    fn default() -> Self {
        let base = DownstreamConfig::default();
        DownstreamSettings {
            task: base.task,
            mode: base.mode,
            fusion: base.fusion,
            source: base.source,
            lr_weighted_sum: 1e-3,
            lr_fine_tune: 1e-4,
            epochs: base.epochs,
            batch_size: base.batch_size,
            patience: base.patience,
            seed: base.seed,
        }
    }
}

impl DownstreamSettings {
    /// The learning rate follows the mode.
    pub fn to_config(&self) -> DownstreamConfig {
        DownstreamConfig {
            task: self.task,
            mode: self.mode,
            fusion: self.fusion,
            source: self.source,
            learning_rate: match self.mode {
                TrainMode::FineTune => self.lr_fine_tune,
                TrainMode::FeatureExtraction => self.lr_weighted_sum,
            },
            epochs: self.epochs,
            batch_size: self.batch_size,
            patience: self.patience,
            seed: self.seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeSettings {
    pub depths: Vec<ProbeDepth>,
    pub tasks: Vec<ProbeTask>,
    pub hidden: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub patience: usize,
    pub batch_frames: usize,
    pub max_frames: usize,
    pub seed: u64,
}

impl Default for ProbeSettings {
    fn default() -> Self {
        let base = ProbeConfig::default();
        ProbeSettings {
            depths: ProbeDepth::ALL.to_vec(),
            tasks: vec![ProbeTask::Phoneme, ProbeTask::Speaker],
            hidden: base.hidden,
            learning_rate: base.learning_rate,
            epochs: base.epochs,
            patience: base.patience,
            batch_frames: base.batch_frames,
            max_frames: base.max_frames,
            seed: base.seed,
        }
    }
}

impl ProbeSettings {
    pub fn to_base_config(&self) -> ProbeConfig {
        ProbeConfig {
            hidden: self.hidden,
            learning_rate: self.learning_rate,
            epochs: self.epochs,
            patience: self.patience,
            batch_frames: self.batch_frames,
            max_frames: self.max_frames,
            seed: self.seed,
            ..ProbeConfig::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttentionSettings {
    pub sample_size: usize,
    pub seed: u64,
}

impl Default for AttentionSettings {
    fn default() -> Self {
        AttentionSettings { sample_size: crate::attention::DEFAULT_SAMPLE_SIZE, seed: 0 }
    }
}

/// The whole run, one document. Serialized verbatim into each run
/// directory as `config.resolved` so results stay reproducible.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub encoder: EncoderConfig,
    pub mask: MaskPolicy,
    pub optimizer: AdamWConfig,
    pub pretrain: PretrainOptions,
    pub corpus: CorpusConfig,
    pub downstream: DownstreamSettings,
    pub probe: ProbeSettings,
    pub attention: AttentionSettings,
    /// Parent directory for run outputs; each run gets a timestamped
    /// subdirectory.
    pub output_dir: PathBuf,
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.encoder.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.mask.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.probe.depths.is_empty() || self.probe.tasks.is_empty() {
            return Err(ConfigError::Invalid(
                "probe.depths and probe.tasks must be nonempty".into(),
            ));
        }
        if self.attention.sample_size == 0 {
            return Err(ConfigError::Invalid("attention.sample_size must be positive".into()));
        }
        Ok(())
    }
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

// `PathBuf::default()` is empty; patch the one field whose Default
// derivation isn't the documented default.
impl RunConfig {
    fn patched(mut self) -> Self {
        if self.output_dir.as_os_str().is_empty() {
            self.output_dir = default_output_dir();
        }
        self
    }
}

/// Recursively merges `over` into `base`; non-table values in `over` win.
fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (slot, v) => {
                if let Some(slot) = slot {
                    *slot = v;
                } else {
                    base.insert(k, v);
                }
            }
        }
    }
}

/// Parses one `dotted.key=value` override as a TOML fragment; a value that
/// isn't valid TOML is retried as a quoted string, so `mode=fine_tune`
/// works without shell-escaped quotes.
fn override_table(arg: &str) -> Result<toml::Table, ConfigError> {
    let (key, value) = arg.split_once('=').ok_or_else(|| ConfigError::BadOverride {
        arg: arg.into(),
        reason: "expected key=value".into(),
    })?;
    let (key, value) = (key.trim(), value.trim());
    if key.is_empty() {
        return Err(ConfigError::BadOverride { arg: arg.into(), reason: "empty key".into() });
    }
    let typed = format!("{key} = {value}");
    let quoted = format!("{key} = {:?}", value);
    toml::from_str::<toml::Table>(&typed)
        .or_else(|_| toml::from_str::<toml::Table>(&quoted))
        .map_err(|e| ConfigError::BadOverride { arg: arg.into(), reason: e.to_string() })
}

/// Loads the run configuration: file (optional) + overrides (win), then
/// typed deserialization — unknown keys anywhere fail, naming the key.
pub fn load_run_config(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig, ConfigError> {
    let mut table = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|source| ConfigError::Read { path: p.to_path_buf(), source })?;
            toml::from_str::<toml::Table>(&text)?
        }
        None => toml::Table::new(),
    };
    for arg in overrides {
        merge(&mut table, override_table(arg)?);
    }
    let config: RunConfig = toml::Value::Table(table).try_into()?;
    Ok(config.patched())
}

/// Writes the fully-resolved configuration (defaults filled, overrides
/// applied) so the run directory is self-describing.
pub fn write_resolved(config: &RunConfig, path: &Path) -> Result<(), ConfigError> {
    let text = toml::to_string_pretty(config)
        .map_err(|e| ConfigError::Invalid(format!("serialize: {e}")))?;
    std::fs::write(path, text)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_input_yields_pure_defaults() {
        let cfg = load_run_config(None, &[]).unwrap();
        assert_eq!(cfg, RunConfig::default().patched());
        assert_eq!(cfg.output_dir, PathBuf::from("runs"));
        assert_eq!(cfg.downstream.lr_weighted_sum, 1e-3);
        assert_eq!(cfg.downstream.lr_fine_tune, 1e-4);
        cfg.validate().unwrap();
    }

    #[test]
    fn dotted_keys_in_a_file_reach_their_sections() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(
            &path,
            "encoder.num_layers = 6\nmask.select_fraction = 0.2\npretrain.steps = 42\n",
        )
        .unwrap();
        let cfg = load_run_config(Some(&path), &[]).unwrap();
        assert_eq!(cfg.encoder.num_layers, 6);
        assert_eq!(cfg.mask.select_fraction, 0.2);
        assert_eq!(cfg.pretrain.steps, 42);
        // untouched fields keep defaults
        assert_eq!(cfg.encoder.hidden_dim, EncoderConfig::default().hidden_dim);
    }

    #[test]
    fn overrides_win_over_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "pretrain.steps = 42\npretrain.batch_size = 4\n").unwrap();
        let cfg = load_run_config(
            Some(&path),
            &["pretrain.steps=7".into(), "downstream.mode=fine_tune".into()],
        )
        .unwrap();
        assert_eq!(cfg.pretrain.steps, 7);
        assert_eq!(cfg.pretrain.batch_size, 4);
        assert_eq!(cfg.downstream.mode, TrainMode::FineTune);
        // the mode-dependent learning rate follows
        assert_eq!(cfg.downstream.to_config().learning_rate, 1e-4);
    }

    #[test]
    fn unknown_keys_are_rejected_by_name() {
        let err = load_run_config(None, &["encoder.num_heds=4".into()]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("num_heds"), "error should name the bad key: {msg}");

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "pertraining.steps = 9\n").unwrap();
        let err = load_run_config(Some(&path), &[]).unwrap_err();
        assert!(err.to_string().contains("pertraining"), "got: {err}");
    }

    #[test]
    fn malformed_overrides_are_rejected_with_the_argument() {
        for bad in ["no_equals_sign", "=5", " =x"] {
            match load_run_config(None, &[bad.into()]) {
                Err(ConfigError::BadOverride { arg, .. }) => assert_eq!(arg, bad),
                other => panic!("expected BadOverride for {bad:?}, got {other:?}"),
            }
        }
    }

    #[test]
    fn string_overrides_work_without_quotes() {
        let cfg = load_run_config(
            None,
            &["corpus.data_dir=/tmp/features".into(), "downstream.task=phoneme".into()],
        )
        .unwrap();
        assert_eq!(cfg.corpus.data_dir, Some(PathBuf::from("/tmp/features")));
        assert_eq!(cfg.downstream.task, Task::Phoneme);
    }

    #[test]
    fn resolved_config_round_trips() {
        let cfg = load_run_config(None, &["encoder.num_layers=5".into()]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("config.resolved");
        write_resolved(&cfg, &path).unwrap();
        let back = load_run_config(Some(&path), &[]).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn validation_catches_bad_sections() {
        let err = load_run_config(None, &["encoder.num_heads=5".into()])
            .unwrap()
            .validate()
            .unwrap_err();
        assert!(matches!(err, ConfigError::Invalid(_)));
        let err = load_run_config(None, &["probe.depths=[]".into()])
            .unwrap()
            .validate()
            .unwrap_err();
        assert!(err.to_string().contains("probe.depths"));
    }
}

//! Pipeline configuration file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backends::BackendChoice;
use crate::corpus::ColumnNames;
use crate::error::{Error, Result};
use crate::inference::InferenceMode;
use crate::nn::TinyDims;
use crate::selector::SelectionStrategy;
use crate::training::TrainingConfig;

/// Overrides `paths.cache_dir` when set.
pub const CACHE_DIR_ENV: &str = "LIREX_CACHE_DIR";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsConfig {
    pub train: PathBuf,
    pub dev: PathBuf,
    pub test: PathBuf,
    /// Plain NLI file evaluated without further training.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transfer: Option<PathBuf>,
    #[serde(default = "default_cache_dir")]
    pub cache_dir: PathBuf,
    /// Defaults to `<cache_dir>/checkpoints`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint_dir: Option<PathBuf>,
}

fn default_cache_dir() -> PathBuf {
    PathBuf::from("cache")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendConfig {
    pub encoder: BackendChoice,
    pub generator: BackendChoice,
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig {
            encoder: BackendChoice::Tiny,
            generator: BackendChoice::Tiny,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TinyConfig {
    pub encoder: TinyDims,
    pub generator: TinyDims,
    pub max_new_tokens: usize,
}

impl Default for TinyConfig {
    fn default() -> Self {
        TinyConfig {
            encoder: TinyDims::default(),
            generator: TinyDims::default(),
            max_new_tokens: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageTraining {
    pub rationalizer: TrainingConfig,
    pub generator: TrainingConfig,
    pub selector: TrainingConfig,
    pub inference: TrainingConfig,
}

impl StageTraining {
    pub fn tiny() -> Self {
        StageTraining {
            rationalizer: TrainingConfig::rationalizer_tiny(),
            generator: TrainingConfig::generator_tiny(),
            selector: TrainingConfig::classifier_tiny(),
            inference: TrainingConfig::classifier_tiny(),
        }
    }

    pub fn full_scale() -> Self {
        StageTraining {
            rationalizer: TrainingConfig::rationalizer_full_scale(),
            generator: TrainingConfig::generator_full_scale(),
            selector: TrainingConfig::selector_full_scale(),
            inference: TrainingConfig::inference_full_scale(),
        }
    }
}

impl Default for StageTraining {
    fn default() -> Self {
        Self::tiny()
    }
}

fn default_strategy() -> SelectionStrategy {
    SelectionStrategy::Prob
}

fn default_mode() -> InferenceMode {
    InferenceMode::All
}

fn default_human_eval_samples() -> usize {
    100
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_strategy")]
    pub strategy: SelectionStrategy,
    #[serde(default = "default_mode")]
    pub mode: InferenceMode,
    /// Worker threads for fan-out stages; 0 uses every core.
    #[serde(default)]
    pub workers: usize,
    #[serde(default = "default_human_eval_samples")]
    pub human_eval_samples: usize,
    pub paths: PathsConfig,
    #[serde(default)]
    pub backend: BackendConfig,
    #[serde(default)]
    pub columns: ColumnNames,
    #[serde(default)]
    pub tiny: TinyConfig,
    #[serde(default)]
    pub training: StageTraining,
}

impl PipelineConfig {
    /// Desk-scale settings over `train.csv`, `dev.csv` and `test.csv` in
    /// `data_dir`.
    pub fn toy(data_dir: &Path, cache_dir: &Path) -> Self {
        PipelineConfig {
            seed: 7,
            strategy: default_strategy(),
            mode: default_mode(),
            workers: 0,
            human_eval_samples: default_human_eval_samples(),
            paths: PathsConfig {
                train: data_dir.join("train.csv"),
                dev: data_dir.join("dev.csv"),
                test: data_dir.join("test.csv"),
                transfer: None,
                cache_dir: cache_dir.to_path_buf(),
                checkpoint_dir: None,
            },
            backend: BackendConfig::default(),
            columns: ColumnNames::default(),
            tiny: TinyConfig {
                generator: TinyDims {
                    max_len: 96,
                    ..TinyDims::default()
                },
                ..TinyConfig::default()
            },
            training: StageTraining::tiny(),
        }
    }

    /// Pretrained backbones with the full-scale hyper-parameters. Such a
    /// configuration validates but its training stages cannot run here.
    pub fn full_scale(data_dir: &Path, cache_dir: &Path) -> Self {
        PipelineConfig {
            backend: BackendConfig {
                encoder: BackendChoice::Pretrained("roberta-base".into()),
                generator: BackendChoice::Pretrained("gpt2-medium".into()),
            },
            training: StageTraining::full_scale(),
            ..Self::toy(data_dir, cache_dir)
        }
    }

    /// Parses TOML; relative paths are resolved against `base_dir`.
    pub fn from_toml_str(text: &str, base_dir: &Path) -> Result<Self> {
        let mut config: PipelineConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.resolve_paths(base_dir);
        Ok(config)
    }

    /// Reads a config file and applies the cache-dir environment override.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let mut config = Self::from_toml_str(&text, base)?;
        if let Some(dir) = std::env::var_os(CACHE_DIR_ENV).filter(|v| !v.is_empty()) {
            config.paths.cache_dir = PathBuf::from(dir);
        }
        Ok(config)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        let paths = &mut self.paths;
        fix(&mut paths.train);
        fix(&mut paths.dev);
        fix(&mut paths.test);
        fix(&mut paths.cache_dir);
        if let Some(p) = paths.transfer.as_mut() {
            fix(p);
        }
        if let Some(p) = paths.checkpoint_dir.as_mut() {
            fix(p);
        }
    }

    pub fn cache_dir(&self) -> &Path {
        &self.paths.cache_dir
    }

    pub fn checkpoint_dir(&self) -> PathBuf {
        self.paths
            .checkpoint_dir
            .clone()
            .unwrap_or_else(|| self.paths.cache_dir.join("checkpoints"))
    }

    /// Checks every invariant that can be checked without running a stage.
    pub fn validate(&self) -> Result<()> {
        let mut inputs = vec![("train", &self.paths.train), ("dev", &self.paths.dev), ("test", &self.paths.test)];
        if let Some(t) = &self.paths.transfer {
            inputs.push(("transfer", t));
        }
        for (what, p) in inputs {
            if !p.is_file() {
                return Err(Error::Config(format!("{what} corpus {} does not exist", p.display())));
            }
        }
        for (what, t) in [
            ("rationalizer", &self.training.rationalizer),
            ("generator", &self.training.generator),
            ("selector", &self.training.selector),
            ("inference", &self.training.inference),
        ] {
            t.validate().map_err(|e| Error::Config(format!("training.{what}: {e}")))?;
        }
        self.tiny.encoder.validate().map_err(|e| Error::Config(format!("tiny.encoder: {e}")))?;
        self.tiny.generator.validate().map_err(|e| Error::Config(format!("tiny.generator: {e}")))?;
        if self.tiny.max_new_tokens == 0 {
            return Err(Error::Config("tiny.max_new_tokens must be positive".into()));
        }
        if self.human_eval_samples == 0 {
            return Err(Error::Config("human_eval_samples must be positive".into()));
        }
        Ok(())
    }

    /// Seed for one stage, derived from the global seed.
    pub fn stage_seed(&self, offset: u64) -> u64 {
        self.seed.wrapping_mul(1_000).wrapping_add(offset)
    }
}

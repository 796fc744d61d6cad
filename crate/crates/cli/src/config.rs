//! Run configuration: a TOML file, overridden by command-line flags.

use std::env;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sgqa_core::metrics::TaskKind;
use sgqa_core::models::ModelConfig;
use sgqa_core::text::OovPolicy;
use sgqa_core::train::TrainConfig;

use crate::UsageError;

/// Relative data paths are resolved against this directory when set.
pub const DATA_ROOT_VAR: &str = "SGQA_DATA_ROOT";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    /// Also save a checkpoint every this many epochs; 0 keeps only the
    /// final one.
    pub checkpoint_every: usize,
    pub data: DataConfig,
    pub model: Option<ModelConfig>,
    pub train: Option<TrainConfig>,
    pub eval: EvalConfig,
    pub analyze: AnalyzeConfig,
    pub gen_data: GenDataConfig,
    pub grad_check: GradCheckConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub train: Option<PathBuf>,
    pub eval: Option<PathBuf>,
    /// Pretrained `token v1 ... vD` vectors; from-scratch embeddings when
    /// absent.
    pub embeddings: Option<PathBuf>,
    pub oov: OovPolicy,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            train: None,
            eval: None,
            embeddings: None,
            oov: OovPolicy::RandomPerToken,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Number of sentence-length buckets; no breakdown when absent.
    pub buckets: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalyzeConfig {
    /// Examples rendered as heatmaps.
    pub sample: usize,
    /// Tokens seen fewer times are left out of the ranking.
    pub min_count: usize,
}

impl Default for AnalyzeConfig {
    fn default() -> Self {
        AnalyzeConfig {
            sample: 5,
            min_count: 5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenDataConfig {
    pub task: TaskKind,
    pub n: usize,
    pub vocab_size: usize,
    pub sentences: usize,
    pub min_sentence_len: usize,
    pub max_sentence_len: usize,
    /// Cloze only.
    pub candidates: usize,
}

impl Default for GenDataConfig {
    fn default() -> Self {
        GenDataConfig {
            task: TaskKind::Span,
            n: 200,
            vocab_size: 100,
            sentences: 4,
            min_sentence_len: 6,
            max_sentence_len: 9,
            candidates: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradCheckConfig {
    /// Both tasks when absent.
    pub task: Option<TaskKind>,
    pub hidden: usize,
    pub embed_dim: usize,
    pub hops: usize,
    pub eps: f64,
    pub threshold: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            task: None,
            hidden: 8,
            embed_dim: 8,
            hops: 2,
            eps: 1e-6,
            threshold: 1e-4,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| UsageError(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text)
            .map_err(|e| UsageError(format!("invalid config {}: {e}", path.display())).into())
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(7)
    }

    pub fn out_dir(&self) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from("sgqa-out"))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).context("serialising resolved config")
    }

    /// Writes the resolved config as `config.toml` under the output
    /// directory, creating it.
    pub fn write_resolved(&self) -> Result<PathBuf> {
        let dir = self.out_dir();
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join("config.toml");
        fs::write(&path, self.to_toml()?).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}

/// `path` itself when absolute or when no data root is set; otherwise
/// `$SGQA_DATA_ROOT/path`.
pub fn resolve_data_path(path: &Path) -> PathBuf {
    match env::var_os(DATA_ROOT_VAR) {
        Some(root) if path.is_relative() && !root.is_empty() => PathBuf::from(root).join(path),
        _ => path.to_path_buf(),
    }
}

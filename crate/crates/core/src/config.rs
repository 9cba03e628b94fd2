//! Declarative run configuration, read from TOML.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::encoder::ModelDims;
use crate::episodes::PoolCaps;
use crate::error::{Error, Result};
use crate::evalreport::{Ablation, ExtensionProtocol};
use crate::metatrain::{HardNegativeConfig, MetaConfig};
use crate::protomodel::DEFAULT_DROPOUT;

/// Environment variable that overrides `paths.workdir`.
pub const WORKDIR_ENV: &str = "PROTOSPAN_WORKDIR";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    pub corpus: PathBuf,
    pub hierarchy: PathBuf,
    pub embeddings: PathBuf,
    pub workdir: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaxonomyConfig {
    pub depth: usize,
    pub min_freq: u64,
}

impl Default for TaxonomyConfig {
    fn default() -> Self {
        Self { depth: 3, min_freq: 100 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpanConfig {
    pub max_len: usize,
}

impl Default for SpanConfig {
    fn default() -> Self {
        Self { max_len: 8 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EpisodeConfig {
    /// categories per task; `0` means every category
    pub ways: usize,
    pub shots: usize,
    pub ratio: f64,
    pub count: usize,
    pub exclude_unknown: bool,
    /// validation and query spans per category used for scoring
    pub eval_per_category: usize,
    pub caps: PoolCaps,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        Self {
            ways: 0,
            shots: 5,
            ratio: 0.3,
            count: 200,
            exclude_unknown: false,
            eval_per_category: 50,
            caps: PoolCaps::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub dims: ModelDims,
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dims: ModelDims::default(),
            dropout: DEFAULT_DROPOUT,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default)]
    pub ablation: Ablation,
    pub paths: Paths,
    #[serde(default)]
    pub taxonomy: TaxonomyConfig,
    #[serde(default)]
    pub spans: SpanConfig,
    #[serde(default)]
    pub episodes: EpisodeConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub meta: MetaConfig,
    #[serde(default)]
    pub hard_negatives: HardNegativeConfig,
    #[serde(default)]
    pub extension: ExtensionProtocol,
    /// directory the relative paths above are resolved against; not serialized
    #[serde(skip)]
    pub base_dir: PathBuf,
}

fn default_seed() -> u64 {
    42
}

impl RunConfig {
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self> {
        let mut cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.base_dir = base_dir.to_path_buf();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, &base)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.taxonomy.depth < 1 || self.taxonomy.min_freq < 1 {
            return Err(Error::Config("taxonomy depth and min_freq must be at least 1".into()));
        }
        if self.spans.max_len < 1 {
            return Err(Error::Config("spans.max_len must be at least 1".into()));
        }
        let e = &self.episodes;
        if !(0.3..=0.8).contains(&e.ratio) {
            return Err(Error::Config(format!("episodes.ratio {} outside [0.3, 0.8]", e.ratio)));
        }
        if e.shots == 0 || e.eval_per_category == 0 {
            return Err(Error::Config("episodes.shots and eval_per_category must be positive".into()));
        }
        self.model.dims.validate()?;
        if !(0.0..1.0).contains(&self.model.dropout) {
            return Err(Error::Config(format!("model.dropout {} outside [0, 1)", self.model.dropout)));
        }
        self.meta.validate()?;
        if !(self.hard_negatives.rho > 0.0 && self.hard_negatives.rho <= 1.0) {
            return Err(Error::Config("hard_negatives.rho must lie in (0, 1]".into()));
        }
        Ok(())
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    /// Working directory, honouring [`WORKDIR_ENV`].
    pub fn workdir(&self) -> PathBuf {
        match std::env::var_os(WORKDIR_ENV) {
            Some(w) if !w.is_empty() => PathBuf::from(w),
            _ => self.resolve(&self.paths.workdir),
        }
    }
}

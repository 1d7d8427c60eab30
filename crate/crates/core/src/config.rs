//! Run configuration file (TOML). Every field has a default; unknown keys
//! are rejected.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::BackboneConfig;
use crate::data::SyntheticConfig;
use crate::error::{Error, Result};
use crate::eval::{Metric, DEFAULT_RANKS};
use crate::model::{AttentionConfig, ModelConfig};
use crate::semantic_fusion::Variant;
use crate::training::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    /// Variant trained and evaluated by `train`/`eval`.
    pub variant: Variant,
    /// Backbone stages feeding multi-stage fusion.
    pub stages: Vec<usize>,
    /// Stage of the single-branch early-fusion variant.
    pub early_stage: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            variant: Variant::FULL,
            stages: vec![1, 2, 3, 4],
            early_stage: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub synthetic: SyntheticConfig,
    /// Fraction of identities used for training.
    pub train_fraction: f64,
    /// Number of random train/test splits averaged by `ablate`.
    pub num_splits: usize,
    /// Frames taken (evenly spaced) from each tracklet at evaluation.
    pub eval_frames: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            synthetic: SyntheticConfig::default(),
            train_fraction: 0.5,
            num_splits: 3,
            eval_frames: 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub metric: Metric,
    pub ranks: Vec<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            metric: Metric::Euclidean,
            ranks: DEFAULT_RANKS.to_vec(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Drives every random choice of a run.
    pub seed: u64,
    pub backbone: BackboneConfig,
    pub attention: AttentionConfig,
    pub fusion: FusionConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Writes the resolved config to `dir/config.toml`.
    pub fn echo(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir)?;
        let path = dir.join("config.toml");
        fs::write(&path, self.to_toml())?;
        Ok(path)
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            backbone: self.backbone.clone(),
            attention: self.attention.clone(),
            fusion_stages: self.fusion.stages.clone(),
            early_stage: self.fusion.early_stage,
            num_classes: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config().validate()?;
        self.train.validate()?;
        self.data.synthetic.validate()?;
        let s = &self.data.synthetic;
        if [s.channels, s.height, s.width] != self.backbone.input_shape() {
            return Err(Error::Config(format!(
                "synthetic images {}×{}×{} do not match backbone input {:?}",
                s.channels,
                s.height,
                s.width,
                self.backbone.input_shape()
            )));
        }
        if !(0.0..=1.0).contains(&self.data.train_fraction) {
            return Err(Error::Config("train_fraction must lie in [0, 1]".into()));
        }
        if self.data.num_splits == 0 || self.data.eval_frames == 0 {
            return Err(Error::Config("num_splits and eval_frames must be positive".into()));
        }
        if self.eval.ranks.is_empty() || self.eval.ranks.contains(&0) {
            return Err(Error::Config("ranks must be a non-empty list of positive integers".into()));
        }
        Ok(())
    }
}

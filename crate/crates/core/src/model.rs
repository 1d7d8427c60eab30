//! Parameter layout and initialisation of the full fusion model.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::backbone::{conv_param, projection_param, BackboneConfig};
use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Tensor};

/// Sizes of the per-branch relation network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttentionConfig {
    /// Hidden width of the pair MLP.
    pub rn_hidden: usize,
    /// Relation embedding width `d_r`.
    pub rn_dim: usize,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        Self {
            rn_hidden: 64,
            rn_dim: 32,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub attention: AttentionConfig,
    /// Stages whose outputs feed a multi-stage fusion branch (1-based).
    pub fusion_stages: Vec<usize>,
    /// Stage used by the single-branch early-fusion variant.
    pub early_stage: usize,
    /// Identity classes of the training head; 0 disables the head.
    pub num_classes: usize,
}

impl ModelConfig {
    pub fn new(backbone: BackboneConfig) -> Self {
        let fusion_stages = (1..=backbone.num_stages).collect();
        Self {
            backbone,
            attention: AttentionConfig::default(),
            fusion_stages,
            early_stage: 2,
            num_classes: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        let s = self.backbone.num_stages;
        if self.fusion_stages.is_empty() {
            return Err(Error::Config("fusion_stages must not be empty".into()));
        }
        let mut sorted = self.fusion_stages.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.fusion_stages.len() {
            return Err(Error::Config("fusion_stages must be distinct".into()));
        }
        for &st in self.fusion_stages.iter().chain([&self.early_stage]) {
            if st == 0 || st > s {
                return Err(Error::StageOutOfRange { stage: st, max: s });
            }
        }
        if self.attention.rn_hidden == 0 || self.attention.rn_dim == 0 {
            return Err(Error::Config("relation network sizes must be positive".into()));
        }
        Ok(())
    }

    /// Number of semantic branches `K`.
    pub fn num_branches(&self) -> usize {
        self.fusion_stages.len()
    }
}

pub(crate) fn branch_param(stage: usize, module: &str, part: &str) -> String {
    format!("branch{stage}.{module}.{part}")
}

pub(crate) const SEMANTIC_WEIGHT: &str = "semantic.weight";
pub(crate) const SEMANTIC_BIAS: &str = "semantic.bias";
pub(crate) const CLASSIFIER_WEIGHT: &str = "classifier.weight";
pub(crate) const CLASSIFIER_BIAS: &str = "classifier.bias";

/// Configuration plus every learnable tensor, addressed by dotted path.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
}

impl Model {
    /// Fresh model: He-normal convolutions and relation MLP, small
    /// projections, near-zero attention heads (w ≈ 0.5, u ≈ uniform).
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut normal = |shape: Vec<usize>, std: f64| -> Tensor {
            let n: usize = shape.iter().product();
            let dist = Normal::new(0.0, std).expect("positive std");
            let data = (0..n).map(|_| dist.sample(&mut rng)).collect();
            Tensor::new(shape, data).expect("finite samples")
        };
        let bb = &config.backbone;
        let mut p = ParamStore::new();
        let mut c_in = bb.input_channels;
        for s in 1..=bb.num_stages {
            let c_out = bb.channels[s - 1];
            for conv in 1..=2 {
                let fan_in = (c_in * 9) as f64;
                p.insert(conv_param(s, conv, "kernel"), normal(vec![c_out, c_in, 3, 3], (2.0 / fan_in).sqrt()));
                p.insert(conv_param(s, conv, "bias"), Tensor::zeros([c_out]));
                c_in = c_out;
            }
        }
        let c_last = bb.final_channels();
        let d_g = bb.embed_dim;
        let (hidden, d_r) = (config.attention.rn_hidden, config.attention.rn_dim);
        for s in 1..=bb.num_stages {
            let d_f = bb.feature_dim(s);
            p.insert(projection_param(s, "weight"), normal(vec![c_last, d_g], (1.0 / c_last as f64).sqrt()));
            p.insert(projection_param(s, "bias"), Tensor::zeros([d_g]));
            p.insert(branch_param(s, "intra", "weight"), normal(vec![d_f, 1], 0.01));
            p.insert(branch_param(s, "intra", "bias"), Tensor::zeros([1]));
            p.insert(branch_param(s, "rn.p1", "weight"), normal(vec![2 * d_f, hidden], (1.0 / d_f as f64).sqrt()));
            p.insert(branch_param(s, "rn.p1", "bias"), Tensor::zeros([hidden]));
            p.insert(branch_param(s, "rn.p2", "weight"), normal(vec![hidden, d_r], (2.0 / hidden as f64).sqrt()));
            p.insert(branch_param(s, "rn.p2", "bias"), Tensor::zeros([d_r]));
            p.insert(branch_param(s, "rn.theta", "weight"), normal(vec![d_r, 1], (1.0 / d_r as f64).sqrt()));
            p.insert(branch_param(s, "rn.theta", "bias"), Tensor::full([1], 0.1));
        }
        let k = config.num_branches();
        p.insert(SEMANTIC_WEIGHT, normal(vec![d_g, k], 0.01 / (d_g as f64).sqrt()));
        p.insert(SEMANTIC_BIAS, Tensor::zeros([k]));
        if config.num_classes > 0 {
            p.insert(
                CLASSIFIER_WEIGHT,
                normal(vec![d_g, config.num_classes], 1.0 / (d_g as f64).sqrt()),
            );
            p.insert(CLASSIFIER_BIAS, Tensor::zeros([config.num_classes]));
        }
        Ok(Self { config, params: p })
    }

    /// Wraps loaded parameters, checking them against a fresh layout.
    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        let reference = Self::init(config.clone(), 0)?;
        for (name, t) in reference.params.iter() {
            if name.starts_with("classifier.") {
                continue;
            }
            let got = params
                .get(name)
                .ok_or_else(|| Error::Config(format!("checkpoint lacks parameter `{name}`")))?;
            if got.shape() != t.shape() {
                return Err(Error::Shape {
                    op: "load parameters",
                    expected: t.shape().to_vec(),
                    actual: got.shape().to_vec(),
                });
            }
        }
        Ok(Self { config, params })
    }

    /// Parameter paths of the backbone stage `s`.
    pub fn stage_param_names(&self, s: usize) -> Vec<String> {
        (1..=2)
            .flat_map(|c| [conv_param(s, c, "kernel"), conv_param(s, c, "bias")])
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_is_complete_and_deterministic() {
        let mut cfg = ModelConfig::new(BackboneConfig::default());
        cfg.num_classes = 5;
        let a = Model::init(cfg.clone(), 3).unwrap();
        let b = Model::init(cfg.clone(), 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.params.get("semantic.weight").unwrap().shape(), &[768, 4]);
        assert_eq!(a.params.get("branch1.rn.p1.weight").unwrap().shape(), &[16, 64]);
        assert_eq!(a.params.get("branch4.proj.weight").unwrap().shape(), &[64, 768]);
        assert_eq!(a.params.get("backbone.stage2.conv1.kernel").unwrap().shape(), &[16, 8, 3, 3]);
        assert_eq!(a.params.get("classifier.weight").unwrap().shape(), &[768, 5]);
        let back = Model::from_params(cfg, a.params.clone()).unwrap();
        assert_eq!(back, a);
    }

    #[test]
    fn rejects_bad_configs() {
        let mut bb = BackboneConfig::default();
        bb.num_stages = 1;
        bb.channels = vec![8];
        assert!(ModelConfig::new(bb).validate().is_err());

        let mut cfg = ModelConfig::new(BackboneConfig::default());
        cfg.fusion_stages = vec![1, 5];
        assert!(matches!(cfg.validate(), Err(Error::StageOutOfRange { stage: 5, .. })));

        let mut bb = BackboneConfig::default();
        bb.input_height = 8;
        assert!(ModelConfig::new(bb).validate().is_err());
    }
}

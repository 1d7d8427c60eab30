//! Branch fusion across backbone stages and the full tracklet pipeline.
//!
//! A branch at stage `s` pools per-frame stage maps with temporal attention,
//! feeds the fused map through the remaining stages and projects it to the
//! embedding dimension. Branch features are then mixed with weights from a
//! softmax classifier over branches, or uniformly.

use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::{continue_from_stage, encode_taps, frame_embeddings, pool_frame_features};
use crate::error::{Error, Result};
use crate::eval::Role;
use crate::model::{Model, SEMANTIC_BIAS, SEMANTIC_WEIGHT};
use crate::temporal_attention::graph::{self as attention_graph, StageAttention};
use crate::temporal_attention::{AttentionMode, AttentionWeights};
use crate::tensor::{ParamStore, Tape, Tensor, Var};

/// How branch features are formed and combined.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum FusionMode {
    /// Mean of per-frame embeddings; no fusion branch at all.
    FeatureAverage,
    /// One branch at the configured early stage.
    EarlyFusion,
    /// One branch at the last stage.
    LateFusion,
    /// Every fusion stage, uniform branch weights.
    MsAverage,
    /// Every fusion stage, weights from the semantic classifier.
    MsSemanticAttention,
}

impl FusionMode {
    pub const ALL: [FusionMode; 5] = [
        FusionMode::FeatureAverage,
        FusionMode::EarlyFusion,
        FusionMode::LateFusion,
        FusionMode::MsAverage,
        FusionMode::MsSemanticAttention,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            FusionMode::FeatureAverage => "feature_average",
            FusionMode::EarlyFusion => "early_fusion",
            FusionMode::LateFusion => "late_fusion",
            FusionMode::MsAverage => "ms_average",
            FusionMode::MsSemanticAttention => "ms_semantic_attention",
        }
    }
}

impl FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::UnknownVariant(s.to_string()))
    }
}

impl fmt::Display for FusionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A point of the ablation grid, written `fusion+attention`
/// (e.g. `late_fusion+intra_inter_rn`). `feature_average` takes no
/// attention part.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Variant {
    pub fusion: FusionMode,
    pub attention: AttentionMode,
}

impl Variant {
    pub const fn new(fusion: FusionMode, attention: AttentionMode) -> Self {
        Self { fusion, attention }
    }

    /// Multi-stage semantic attention with combined intra and relation
    /// attention: the complete model.
    pub const FULL: Variant = Variant::new(FusionMode::MsSemanticAttention, AttentionMode::IntraInterRn);

    pub const FEATURE_AVERAGE: Variant = Variant::new(FusionMode::FeatureAverage, AttentionMode::AvgPool);

    /// Backbone stages that get a fusion branch, in branch order.
    pub fn branch_stages(&self, model: &Model) -> Vec<usize> {
        let cfg = &model.config;
        match self.fusion {
            FusionMode::FeatureAverage => vec![],
            FusionMode::EarlyFusion => vec![cfg.early_stage],
            FusionMode::LateFusion => vec![cfg.backbone.num_stages],
            FusionMode::MsAverage | FusionMode::MsSemanticAttention => cfg.fusion_stages.clone(),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.fusion == FusionMode::FeatureAverage {
            write!(f, "{}", self.fusion)
        } else {
            write!(f, "{}+{}", self.fusion, self.attention)
        }
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let unknown = || Error::UnknownVariant(s.to_string());
        let (fusion, attention) = match s.split_once('+') {
            Some((f, a)) => (f.parse().map_err(|_| unknown())?, a.parse().map_err(|_| unknown())?),
            None => (s.parse().map_err(|_| unknown())?, AttentionMode::AvgPool),
        };
        if fusion == FusionMode::FeatureAverage && attention != AttentionMode::AvgPool {
            return Err(unknown());
        }
        Ok(Self { fusion, attention })
    }
}

impl TryFrom<String> for Variant {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Variant> for String {
    fn from(v: Variant) -> String {
        v.to_string()
    }
}

/// Linear `d_g → K` scorer followed by a softmax over branches.
#[derive(Clone, Debug, PartialEq)]
pub struct SemanticClassifier {
    /// `[d_g × K]`
    pub weight: Tensor,
    /// `[K]`
    pub bias: Tensor,
}

impl SemanticClassifier {
    pub fn zeros(d_g: usize, k: usize) -> Self {
        Self {
            weight: Tensor::zeros([d_g, k]),
            bias: Tensor::zeros([k]),
        }
    }

    pub fn from_params(params: &ParamStore) -> Result<Self> {
        let get = |n: &str| {
            params
                .get(n)
                .cloned()
                .ok_or_else(|| Error::Config(format!("missing parameter `{n}`")))
        };
        Ok(Self {
            weight: get(SEMANTIC_WEIGHT)?,
            bias: get(SEMANTIC_BIAS)?,
        })
    }
}

/// `u_j = (1/K) Σ_i softmax(B g_i)_j` for branch features `g[K × d_g]`.
pub fn semantic_attention(g: &Tensor, cls: &SemanticClassifier) -> Result<Tensor> {
    let mut tape = Tape::new();
    let g = tape.constant(g.clone());
    let w = tape.constant(cls.weight.clone());
    let b = tape.constant(cls.bias.clone());
    let u = graph::semantic_attention(&mut tape, g, w, b)?;
    Ok(tape.value(u).clone())
}

/// `Σ_j u_j g_j`.
pub fn semantic_fuse(g: &Tensor, u: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let (g, u) = (tape.constant(g.clone()), tape.constant(u.clone()));
    let out = tape.weighted_sum(u, g)?;
    Ok(tape.value(out).clone())
}

pub mod graph {
    //! Tape-recording pipeline.

    use super::*;

    pub fn semantic_attention(tape: &mut Tape, g: Var, weight: Var, bias: Var) -> Result<Var> {
        if tape.shape(g).len() != 2 || tape.shape(g)[0] == 0 {
            return Err(Error::Shape {
                op: "semantic_attention",
                expected: vec![1, tape.shape(weight)[0]],
                actual: tape.shape(g).to_vec(),
            });
        }
        let logits = tape.matmul(g, weight)?;
        let logits = tape.add_bias(logits, bias)?;
        let probs = tape.softmax(logits, 1)?;
        Ok(tape.mean(probs, 0)?)
    }

    /// Nodes produced by one pipeline run.
    #[derive(Clone, Debug)]
    pub struct PipelineGraph {
        pub g_fused: Var,
        /// `(stage, g_s)` per branch.
        pub branches: Vec<(usize, Var)>,
        /// `(stage, attention)` per branch.
        pub attention: Vec<(usize, StageAttention)>,
        /// Branch weights; absent for the feature-average baseline.
        pub u: Option<Var>,
    }

    /// Records the forward pass of `variant` over `frames[L × C × H × W]`.
    /// Every parameter is bound by path, so a backward pass reports
    /// gradients per parameter.
    pub fn forward(tape: &mut Tape, model: &Model, frames: Var, variant: Variant) -> Result<PipelineGraph> {
        let cfg = &model.config.backbone;
        let params = &model.params;
        if tape.shape(frames).first() == Some(&0) {
            return Err(Error::EmptyTracklet);
        }
        if variant.fusion == FusionMode::FeatureAverage {
            let e = frame_embeddings(tape, params, cfg, frames)?;
            let g = tape.mean(e, 0)?;
            return Ok(PipelineGraph {
                g_fused: g,
                branches: vec![],
                attention: vec![],
                u: None,
            });
        }
        let stages = variant.branch_stages(model);
        let deepest = *stages.iter().max().expect("at least one branch");
        let taps = encode_taps(tape, params, cfg, frames, deepest)?;
        let mut branches = Vec::with_capacity(stages.len());
        let mut attention = Vec::with_capacity(stages.len());
        for &s in &stages {
            let tap = &taps[s - 1];
            let f = pool_frame_features(tape, tap)?;
            let att = attention_graph::attend(tape, params, s, f, variant.attention)?;
            let fused = attention_graph::temporal_fuse(tape, tap.maps, att.normalized)?;
            let g = continue_from_stage(tape, params, cfg, fused, s)?;
            branches.push((s, g));
            attention.push((s, att));
        }
        let k = branches.len();
        let g_all: Vec<Var> = branches.iter().map(|&(_, g)| g).collect();
        let g_all = tape.stack(&g_all)?;
        let u = if variant.fusion == FusionMode::MsSemanticAttention {
            let w = tape.param(SEMANTIC_WEIGHT, params)?;
            let b = tape.param(SEMANTIC_BIAS, params)?;
            semantic_attention(tape, g_all, w, b)?
        } else {
            tape.constant(Tensor::full([k], 1.0 / k as f64))
        };
        let g_fused = tape.weighted_sum(u, g_all)?;
        Ok(PipelineGraph {
            g_fused,
            branches,
            attention,
            u: Some(u),
        })
    }
}

/// Everything one forward pass yields.
#[derive(Clone, Debug, PartialEq)]
pub struct PipelineOutput {
    pub g_fused: Tensor,
    /// `[K × d_g]`; empty for the feature-average baseline.
    pub branches: Vec<Tensor>,
    pub attention: Vec<AttentionWeights>,
    pub u: Option<Tensor>,
}

/// Runs `variant` on one tracklet and collects all intermediate weights.
pub fn forward_pipeline(frames: &Tensor, model: &Model, variant: Variant) -> Result<PipelineOutput> {
    let mut tape = Tape::new();
    let x = tape.constant(frames.clone());
    let out = graph::forward(&mut tape, model, x, variant)?;
    Ok(PipelineOutput {
        g_fused: tape.value(out.g_fused).clone(),
        branches: out.branches.iter().map(|&(_, g)| tape.value(g).clone()).collect(),
        attention: out
            .attention
            .iter()
            .map(|(s, a)| AttentionWeights::from_graph(&tape, *s, a))
            .collect(),
        u: out.u.map(|u| tape.value(u).clone()),
    })
}

/// The tracklet embedding under `variant`.
pub fn ablation_forward(frames: &Tensor, model: &Model, variant: Variant) -> Result<Tensor> {
    Ok(forward_pipeline(frames, model, variant)?.g_fused)
}

/// Embeds many tracklets in parallel; order follows the input.
pub fn embed_all(frames: &[Tensor], model: &Model, variant: Variant) -> Result<Vec<Tensor>> {
    frames.par_iter().map(|f| ablation_forward(f, model, variant)).collect()
}

/// One row of an embedding dump.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingRecord {
    pub tracklet_id: String,
    pub identity: u32,
    pub camera: u32,
    pub role: Role,
    pub embedding: Vec<f64>,
}

/// Tab-separated: `id  identity  camera  role  v1,v2,…`. Floats use the
/// shortest representation that parses back to the same value.
pub fn write_embeddings<W: Write>(mut out: W, records: &[EmbeddingRecord]) -> Result<()> {
    for r in records {
        let values: Vec<String> = r.embedding.iter().map(|v| v.to_string()).collect();
        writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}",
            r.tracklet_id,
            r.identity,
            r.camera,
            r.role,
            values.join(",")
        )?;
    }
    Ok(())
}

pub fn read_embeddings<R: BufRead>(input: R) -> Result<Vec<EmbeddingRecord>> {
    let mut records = Vec::new();
    for (n, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |msg: &str| Error::Data(format!("embedding dump line {}: {msg}", n + 1));
        let cols: Vec<&str> = line.split('\t').collect();
        let [id, identity, camera, role, values] = cols[..] else {
            return Err(bad("expected 5 tab-separated fields"));
        };
        let embedding = values
            .split(',')
            .map(|v| v.parse::<f64>().map_err(|_| bad("bad float")))
            .collect::<Result<Vec<_>>>()?;
        records.push(EmbeddingRecord {
            tracklet_id: id.to_string(),
            identity: identity.parse().map_err(|_| bad("bad identity"))?,
            camera: camera.parse().map_err(|_| bad("bad camera"))?,
            role: role.parse().map_err(|_| bad("bad role"))?,
            embedding,
        });
    }
    Ok(records)
}

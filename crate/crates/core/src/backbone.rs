//! Multi-stage convolutional frame encoder.
//!
//! Each stage is `conv3×3 → relu → conv3×3 → relu → 2×2 average pool`.
//! Every stage's output is a tap that a fusion branch can consume; a fused
//! map re-enters the network at the following stage, so all branches share
//! the suffix stages with per-frame encoding.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Tape, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub num_stages: usize,
    pub channels: Vec<usize>,
    pub input_channels: usize,
    pub input_height: usize,
    pub input_width: usize,
    /// Dimension of every tracklet embedding.
    pub embed_dim: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            num_stages: 4,
            channels: vec![8, 16, 32, 64],
            input_channels: 3,
            input_height: 32,
            input_width: 16,
            embed_dim: 768,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.num_stages < 2 {
            return bad(format!("backbone needs at least 2 stages, got {}", self.num_stages));
        }
        if self.channels.len() != self.num_stages {
            return bad(format!(
                "{} channel counts for {} stages",
                self.channels.len(),
                self.num_stages
            ));
        }
        if self.channels.contains(&0) || self.input_channels == 0 || self.embed_dim == 0 {
            return bad("channel counts and embed_dim must be positive".into());
        }
        if self.input_height >> self.num_stages == 0 || self.input_width >> self.num_stages == 0 {
            return bad(format!(
                "input {}×{} vanishes after {} pooling stages",
                self.input_height, self.input_width, self.num_stages
            ));
        }
        Ok(())
    }

    pub fn input_shape(&self) -> [usize; 3] {
        [self.input_channels, self.input_height, self.input_width]
    }

    /// `[C_s, H_s, W_s]` emitted by stage `s` (1-based).
    pub fn stage_shape(&self, s: usize) -> [usize; 3] {
        [self.channels[s - 1], self.input_height >> s, self.input_width >> s]
    }

    /// Width `d_f` of the pooled frame feature at stage `s`.
    pub fn feature_dim(&self, s: usize) -> usize {
        self.channels[s - 1]
    }

    pub fn final_channels(&self) -> usize {
        self.channels[self.num_stages - 1]
    }

    fn check_stage(&self, s: usize) -> Result<()> {
        if s == 0 || s > self.num_stages {
            return Err(Error::StageOutOfRange {
                stage: s,
                max: self.num_stages,
            });
        }
        Ok(())
    }
}

pub(crate) fn conv_param(stage: usize, conv: usize, part: &str) -> String {
    format!("backbone.stage{stage}.conv{conv}.{part}")
}

pub(crate) fn projection_param(stage: usize, part: &str) -> String {
    format!("branch{stage}.proj.{part}")
}

/// Per-frame maps of one stage: `[L, C_s, H_s, W_s]` on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StageFeatureMap {
    pub stage: usize,
    pub maps: Var,
}

fn apply_stage(tape: &mut Tape, params: &ParamStore, s: usize, x: Var) -> Result<Var> {
    let mut h = x;
    for conv in 1..=2 {
        let k = tape.param(&conv_param(s, conv, "kernel"), params)?;
        let b = tape.param(&conv_param(s, conv, "bias"), params)?;
        h = tape.conv2d(h, k, Some(b), 1)?;
        h = tape.relu(h)?;
    }
    Ok(tape.avg_pool2(h)?)
}

/// Encodes `frames[L×C×H×W]` through stages `1..=upto`, returning every tap.
pub fn encode_taps(
    tape: &mut Tape,
    params: &ParamStore,
    cfg: &BackboneConfig,
    frames: Var,
    upto: usize,
) -> Result<Vec<StageFeatureMap>> {
    cfg.check_stage(upto)?;
    let shape = tape.shape(frames);
    if shape.len() != 4 || shape[1..] != cfg.input_shape() {
        let mut expected = vec![shape.first().copied().unwrap_or(0)];
        expected.extend(cfg.input_shape());
        return Err(Error::Shape {
            op: "encode",
            expected,
            actual: shape.to_vec(),
        });
    }
    if shape[0] == 0 {
        return Err(Error::EmptyTracklet);
    }
    let mut taps = Vec::with_capacity(upto);
    let mut h = frames;
    for s in 1..=upto {
        h = apply_stage(tape, params, s, h)?;
        taps.push(StageFeatureMap { stage: s, maps: h });
    }
    Ok(taps)
}

/// Applies stages `1..=s` to every frame independently.
pub fn encode_to_stage(
    tape: &mut Tape,
    params: &ParamStore,
    cfg: &BackboneConfig,
    frames: Var,
    s: usize,
) -> Result<StageFeatureMap> {
    Ok(*encode_taps(tape, params, cfg, frames, s)?.last().expect("s ≥ 1"))
}

/// Runs a fused `[C_s×H_s×W_s]` map through stages `s+1..=S`, global average
/// pooling and branch `s`'s projection to `embed_dim`.
pub fn continue_from_stage(
    tape: &mut Tape,
    params: &ParamStore,
    cfg: &BackboneConfig,
    fused: Var,
    s: usize,
) -> Result<Var> {
    let pooled = pooled_suffix(tape, params, cfg, fused, s)?;
    let c = tape.shape(pooled)[0];
    let row = tape.reshape(pooled, [1, c])?;
    let out = project(tape, params, s, row)?;
    Ok(tape.reshape(out, [cfg.embed_dim])?)
}

/// The suffix of [`continue_from_stage`] up to (and including) the global
/// pool, before the branch projection.
pub fn pooled_suffix(
    tape: &mut Tape,
    params: &ParamStore,
    cfg: &BackboneConfig,
    fused: Var,
    s: usize,
) -> Result<Var> {
    cfg.check_stage(s)?;
    let expected = cfg.stage_shape(s);
    if tape.shape(fused) != expected {
        return Err(Error::Shape {
            op: "continue_from_stage",
            expected: expected.to_vec(),
            actual: tape.shape(fused).to_vec(),
        });
    }
    let mut h = fused;
    for t in s + 1..=cfg.num_stages {
        h = apply_stage(tape, params, t, h)?;
    }
    let [c, hh, ww] = <[usize; 3]>::try_from(tape.shape(h)).expect("rank 3");
    let flat = tape.reshape(h, [c, hh * ww])?;
    Ok(tape.mean(flat, 1)?)
}

/// `rows[n × C_S] → [n × embed_dim]` with branch `s`'s projection.
fn project(tape: &mut Tape, params: &ParamStore, s: usize, rows: Var) -> Result<Var> {
    let w = tape.param(&projection_param(s, "weight"), params)?;
    let b = tape.param(&projection_param(s, "bias"), params)?;
    let y = tape.matmul(rows, w)?;
    Ok(tape.add_bias(y, b)?)
}

/// Per-frame global average over the spatial axes: `[L×C×H×W] → [L×C]`.
pub fn pool_frame_features(tape: &mut Tape, m: &StageFeatureMap) -> Result<Var> {
    let s = tape.shape(m.maps).to_vec();
    let flat = tape.reshape(m.maps, [s[0], s[1], s[2] * s[3]])?;
    Ok(tape.mean(flat, 2)?)
}

/// Image-level embeddings `[L × embed_dim]`: each frame encoded to the last
/// stage, pooled and projected by the last branch. Used for frame-level
/// warm-up and the feature-average baseline.
pub fn frame_embeddings(tape: &mut Tape, params: &ParamStore, cfg: &BackboneConfig, frames: Var) -> Result<Var> {
    let last = encode_to_stage(tape, params, cfg, frames, cfg.num_stages)?;
    let pooled = pool_frame_features(tape, &last)?;
    project(tape, params, cfg.num_stages, pooled)
}

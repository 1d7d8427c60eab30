//! Per-frame attention along the time axis and weighted temporal pooling.
//!
//! Functions at the top level work on plain tensors; [`graph`] records the
//! same computations on a [`Tape`] so they can be trained.

use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::branch_param;
use crate::tensor::{ParamStore, Tape, Tensor, Var};

/// How frame weights are produced before temporal pooling.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum AttentionMode {
    /// Uniform weights.
    AvgPool,
    Intra,
    InterEuclid,
    InterRn,
    IntraInterEuclid,
    IntraInterRn,
}

/// Source of the inter-frame score.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InterKind {
    Euclid,
    Relation,
}

impl AttentionMode {
    pub const ALL: [AttentionMode; 6] = [
        AttentionMode::AvgPool,
        AttentionMode::Intra,
        AttentionMode::InterEuclid,
        AttentionMode::InterRn,
        AttentionMode::IntraInterEuclid,
        AttentionMode::IntraInterRn,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AttentionMode::AvgPool => "avg_pool",
            AttentionMode::Intra => "intra",
            AttentionMode::InterEuclid => "inter_euclid",
            AttentionMode::InterRn => "inter_rn",
            AttentionMode::IntraInterEuclid => "intra_inter_euclid",
            AttentionMode::IntraInterRn => "intra_inter_rn",
        }
    }

    pub fn uses_intra(self) -> bool {
        matches!(
            self,
            AttentionMode::Intra | AttentionMode::IntraInterEuclid | AttentionMode::IntraInterRn
        )
    }

    pub fn inter(self) -> Option<InterKind> {
        match self {
            AttentionMode::InterEuclid | AttentionMode::IntraInterEuclid => Some(InterKind::Euclid),
            AttentionMode::InterRn | AttentionMode::IntraInterRn => Some(InterKind::Relation),
            _ => None,
        }
    }
}

impl fmt::Display for AttentionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AttentionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::UnknownVariant(s.to_string()))
    }
}

/// Importance regressor: `w_i = sigmoid(f_i · weight + bias)`.
#[derive(Clone, Debug, PartialEq)]
pub struct IntraAttentionHead {
    /// `[d_f × 1]`
    pub weight: Tensor,
    /// `[1]`
    pub bias: Tensor,
}

impl IntraAttentionHead {
    pub fn zeros(d_f: usize) -> Self {
        Self {
            weight: Tensor::zeros([d_f, 1]),
            bias: Tensor::zeros([1]),
        }
    }

    pub fn random<R: Rng + ?Sized>(d_f: usize, std: f64, rng: &mut R) -> Self {
        Self {
            weight: random_tensor(vec![d_f, 1], std, rng),
            bias: random_tensor(vec![1], std, rng),
        }
    }

    pub fn from_params(params: &ParamStore, stage: usize) -> Result<Self> {
        Ok(Self {
            weight: lookup(params, &branch_param(stage, "intra", "weight"))?,
            bias: lookup(params, &branch_param(stage, "intra", "bias"))?,
        })
    }

    pub fn record(&self, tape: &mut Tape) -> graph::IntraVars {
        graph::IntraVars {
            weight: tape.constant(self.weight.clone()),
            bias: tape.constant(self.bias.clone()),
        }
    }
}

/// Pair MLP `P: 2·d_f → hidden → d_r` plus the `d_r → 1` relation head θ.
#[derive(Clone, Debug, PartialEq)]
pub struct RelationNetwork {
    pub p1_weight: Tensor,
    pub p1_bias: Tensor,
    pub p2_weight: Tensor,
    pub p2_bias: Tensor,
    pub theta_weight: Tensor,
    pub theta_bias: Tensor,
}

impl RelationNetwork {
    pub fn zeros(d_f: usize, hidden: usize, d_r: usize) -> Self {
        Self {
            p1_weight: Tensor::zeros([2 * d_f, hidden]),
            p1_bias: Tensor::zeros([hidden]),
            p2_weight: Tensor::zeros([hidden, d_r]),
            p2_bias: Tensor::zeros([d_r]),
            theta_weight: Tensor::zeros([d_r, 1]),
            theta_bias: Tensor::zeros([1]),
        }
    }

    pub fn random<R: Rng + ?Sized>(d_f: usize, hidden: usize, d_r: usize, std: f64, rng: &mut R) -> Self {
        Self {
            p1_weight: random_tensor(vec![2 * d_f, hidden], std, rng),
            p1_bias: random_tensor(vec![hidden], std, rng),
            p2_weight: random_tensor(vec![hidden, d_r], std, rng),
            p2_bias: random_tensor(vec![d_r], std, rng),
            theta_weight: random_tensor(vec![d_r, 1], std, rng),
            theta_bias: random_tensor(vec![1], std, rng),
        }
    }

    pub fn from_params(params: &ParamStore, stage: usize) -> Result<Self> {
        let get = |m: &str, p: &str| lookup(params, &branch_param(stage, m, p));
        Ok(Self {
            p1_weight: get("rn.p1", "weight")?,
            p1_bias: get("rn.p1", "bias")?,
            p2_weight: get("rn.p2", "weight")?,
            p2_bias: get("rn.p2", "bias")?,
            theta_weight: get("rn.theta", "weight")?,
            theta_bias: get("rn.theta", "bias")?,
        })
    }

    pub fn record(&self, tape: &mut Tape) -> graph::RelationVars {
        let mut c = |t: &Tensor| tape.constant(t.clone());
        graph::RelationVars {
            p1_weight: c(&self.p1_weight),
            p1_bias: c(&self.p1_bias),
            p2_weight: c(&self.p2_weight),
            p2_bias: c(&self.p2_bias),
            theta_weight: c(&self.theta_weight),
            theta_bias: c(&self.theta_bias),
        }
    }
}

fn random_tensor<R: Rng + ?Sized>(shape: Vec<usize>, std: f64, rng: &mut R) -> Tensor {
    let dist = Normal::new(0.0, std).expect("positive std");
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| dist.sample(rng)).collect()).expect("finite samples")
}

fn lookup(params: &ParamStore, name: &str) -> Result<Tensor> {
    params
        .get(name)
        .cloned()
        .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))
}

/// Attention produced for one stage of one tracklet.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionWeights {
    pub stage: usize,
    pub w: Option<Tensor>,
    pub v: Option<Tensor>,
    pub a: Tensor,
    /// `â`, a probability vector.
    pub normalized: Tensor,
    /// `[L × L]` relation attention (relation-network modes only).
    pub relation: Option<Tensor>,
}

impl AttentionWeights {
    pub fn from_graph(tape: &Tape, stage: usize, g: &graph::StageAttention) -> Self {
        let get = |v: Var| tape.value(v).clone();
        Self {
            stage,
            w: g.w.map(get),
            v: g.v.map(get),
            a: get(g.a),
            normalized: get(g.normalized),
            relation: g.relation.map(get),
        }
    }
}

fn eval1(build: impl FnOnce(&mut Tape) -> Result<Var>) -> Result<Tensor> {
    let mut tape = Tape::new();
    let out = build(&mut tape)?;
    Ok(tape.value(out).clone())
}

/// `w[L]` for pooled features `f[L × d_f]`.
pub fn intra_attention(f: &Tensor, head: &IntraAttentionHead) -> Result<Tensor> {
    eval1(|tape| {
        let h = head.record(tape);
        let f = tape.constant(f.clone());
        graph::intra_attention(tape, f, h)
    })
}

/// `v_i = (1/L) Σ_j ‖f_i − f_j‖`.
pub fn inter_attention_euclidean(f: &Tensor) -> Result<Tensor> {
    eval1(|tape| {
        let f = tape.constant(f.clone());
        graph::inter_attention_euclidean(tape, f)
    })
}

/// `r[L × L × d_r]` with `r_ij = P([f_i, f_j]) + P([f_j, f_i])`.
pub fn relation_embed(f: &Tensor, rn: &RelationNetwork) -> Result<Tensor> {
    let l = f.shape().first().copied().unwrap_or(0);
    let r = eval1(|tape| {
        let h = rn.record(tape);
        let f = tape.constant(f.clone());
        graph::relation_embed(tape, f, h)
    })?;
    let d_r = r.shape()[1];
    Ok(r.reshape([l, l, d_r])?)
}

/// Relation-network inter attention: `(v[L], A[L × L])`.
pub fn inter_attention_rn(f: &Tensor, rn: &RelationNetwork) -> Result<(Tensor, Tensor)> {
    let mut tape = Tape::new();
    let h = rn.record(&mut tape);
    let f = tape.constant(f.clone());
    let (v, a) = graph::inter_attention_rn(&mut tape, f, h)?;
    Ok((tape.value(v).clone(), tape.value(a).clone()))
}

/// `a = (w + v) / 2`.
pub fn combine(w: &Tensor, v: &Tensor) -> Result<Tensor> {
    eval1(|tape| {
        let (w, v) = (tape.constant(w.clone()), tape.constant(v.clone()));
        graph::combine(tape, w, v)
    })
}

/// `â = a / Σa` with `a = (w + v) / 2`; uniform when `Σa = 0`.
pub fn combine_and_normalize(w: &Tensor, v: &Tensor) -> Result<Tensor> {
    eval1(|tape| {
        let (w, v) = (tape.constant(w.clone()), tape.constant(v.clone()));
        let a = graph::combine(tape, w, v)?;
        Ok(tape.normalize(a)?)
    })
}

/// `Σ_i â_i · map_i` over `maps[L × C × H × W]`.
pub fn temporal_fuse(maps: &Tensor, weights: &Tensor) -> Result<Tensor> {
    eval1(|tape| {
        let (m, w) = (tape.constant(maps.clone()), tape.constant(weights.clone()));
        graph::temporal_fuse(tape, m, w)
    })
}

pub mod graph {
    //! Tape-recording versions of the attention operations.

    use super::*;

    #[derive(Clone, Copy, Debug)]
    pub struct IntraVars {
        pub weight: Var,
        pub bias: Var,
    }

    impl IntraVars {
        /// Binds branch `stage`'s regressor as trainable parameters.
        pub fn params(tape: &mut Tape, params: &ParamStore, stage: usize) -> Result<Self> {
            Ok(Self {
                weight: tape.param(&branch_param(stage, "intra", "weight"), params)?,
                bias: tape.param(&branch_param(stage, "intra", "bias"), params)?,
            })
        }
    }

    #[derive(Clone, Copy, Debug)]
    pub struct RelationVars {
        pub p1_weight: Var,
        pub p1_bias: Var,
        pub p2_weight: Var,
        pub p2_bias: Var,
        pub theta_weight: Var,
        pub theta_bias: Var,
    }

    impl RelationVars {
        pub fn params(tape: &mut Tape, params: &ParamStore, stage: usize) -> Result<Self> {
            let mut get = |m: &str, p: &str| tape.param(&branch_param(stage, m, p), params);
            Ok(Self {
                p1_weight: get("rn.p1", "weight")?,
                p1_bias: get("rn.p1", "bias")?,
                p2_weight: get("rn.p2", "weight")?,
                p2_bias: get("rn.p2", "bias")?,
                theta_weight: get("rn.theta", "weight")?,
                theta_bias: get("rn.theta", "bias")?,
            })
        }
    }

    /// Attention nodes for one stage.
    #[derive(Clone, Copy, Debug)]
    pub struct StageAttention {
        pub w: Option<Var>,
        pub v: Option<Var>,
        pub a: Var,
        pub normalized: Var,
        pub relation: Option<Var>,
    }

    fn frames(tape: &Tape, f: Var, op: &'static str, min: usize) -> Result<(usize, usize)> {
        let s = tape.shape(f);
        if s.len() != 2 {
            return Err(Error::Shape {
                op,
                expected: vec![s.first().copied().unwrap_or(0), 0],
                actual: s.to_vec(),
            });
        }
        if s[0] < min {
            return Err(if s[0] == 0 {
                Error::EmptyTracklet
            } else {
                Error::TooFewFrames { op, frames: s[0], min }
            });
        }
        Ok((s[0], s[1]))
    }

    /// Row and column indices of every ordered pair `(i, j)`, row-major.
    fn pair_indices(l: usize) -> (Vec<usize>, Vec<usize>) {
        (0..l * l).map(|p| (p / l, p % l)).unzip()
    }

    pub fn intra_attention(tape: &mut Tape, f: Var, head: IntraVars) -> Result<Var> {
        let (l, _) = frames(tape, f, "intra_attention", 1)?;
        let logits = tape.matmul(f, head.weight)?;
        let logits = tape.add_bias(logits, head.bias)?;
        let w = tape.sigmoid(logits)?;
        Ok(tape.reshape(w, [l])?)
    }

    pub fn inter_attention_euclidean(tape: &mut Tape, f: Var) -> Result<Var> {
        let (l, _) = frames(tape, f, "inter_attention_euclidean", 2)?;
        let (rows, cols) = pair_indices(l);
        let fi = tape.index_select(f, &rows)?;
        let fj = tape.index_select(f, &cols)?;
        let diff = tape.sub(fi, fj)?;
        let dist = tape.row_norm(diff)?;
        let dist = tape.reshape(dist, [l, l])?;
        Ok(tape.mean(dist, 1)?)
    }

    /// Relation embeddings as `[L² × d_r]`, pair `(i, j)` at row `i·L + j`.
    pub fn relation_embed(tape: &mut Tape, f: Var, rn: RelationVars) -> Result<Var> {
        let (l, _) = frames(tape, f, "relation_embed", 2)?;
        let (rows, cols) = pair_indices(l);
        let fi = tape.index_select(f, &rows)?;
        let fj = tape.index_select(f, &cols)?;
        let pairs = tape.concat(fi, fj, 1)?;
        let h = tape.matmul(pairs, rn.p1_weight)?;
        let h = tape.add_bias(h, rn.p1_bias)?;
        let h = tape.relu(h)?;
        let p = tape.matmul(h, rn.p2_weight)?;
        let p = tape.add_bias(p, rn.p2_bias)?;
        let swapped: Vec<usize> = (0..l * l).map(|q| (q % l) * l + q / l).collect();
        let p_t = tape.index_select(p, &swapped)?;
        Ok(tape.add(p, p_t)?)
    }

    /// `(v[L], A[L × L])` with `A_ij = ReLU(θ·r_ij + b)` and
    /// `v_i = (1/(L−1)) Σ_{j≠i} A_ij`.
    pub fn inter_attention_rn(tape: &mut Tape, f: Var, rn: RelationVars) -> Result<(Var, Var)> {
        let (l, _) = frames(tape, f, "inter_attention_rn", 2)?;
        let r = relation_embed(tape, f, rn)?;
        let s = tape.matmul(r, rn.theta_weight)?;
        let s = tape.add_bias(s, rn.theta_bias)?;
        let s = tape.relu(s)?;
        let attn = tape.reshape(s, [l, l])?;
        let mut mask = vec![1.0; l * l];
        for i in 0..l {
            mask[i * l + i] = 0.0;
        }
        let mask = tape.constant(Tensor::new([l, l], mask)?);
        let off = tape.mul(attn, mask)?;
        let total = tape.sum(off, 1)?;
        let v = tape.scale(total, 1.0 / (l - 1) as f64)?;
        Ok((v, attn))
    }

    pub fn combine(tape: &mut Tape, w: Var, v: Var) -> Result<Var> {
        let sum = tape.add(w, v)?;
        Ok(tape.scale(sum, 0.5)?)
    }

    pub fn temporal_fuse(tape: &mut Tape, maps: Var, weights: Var) -> Result<Var> {
        let s = tape.shape(maps).to_vec();
        let ws = tape.shape(weights).to_vec();
        if s.is_empty() || ws.len() != 1 || ws[0] != s[0] {
            return Err(Error::Shape {
                op: "temporal_fuse",
                expected: vec![s.first().copied().unwrap_or(0)],
                actual: ws,
            });
        }
        Ok(tape.weighted_sum(weights, maps)?)
    }

    /// Frame weights for one stage under `mode`. Single-frame tracklets and
    /// average pooling get uniform weights without touching any head.
    pub fn attend(tape: &mut Tape, params: &ParamStore, stage: usize, f: Var, mode: AttentionMode) -> Result<StageAttention> {
        let (l, _) = frames(tape, f, "attend", 1)?;
        if l == 1 || mode == AttentionMode::AvgPool {
            let a = tape.constant(Tensor::ones([l]));
            let normalized = tape.constant(Tensor::full([l], 1.0 / l as f64));
            return Ok(StageAttention {
                w: None,
                v: None,
                a,
                normalized,
                relation: None,
            });
        }
        let w = if mode.uses_intra() {
            let head = IntraVars::params(tape, params, stage)?;
            Some(intra_attention(tape, f, head)?)
        } else {
            None
        };
        let (v, relation) = match mode.inter() {
            Some(InterKind::Euclid) => (Some(inter_attention_euclidean(tape, f)?), None),
            Some(InterKind::Relation) => {
                let rn = RelationVars::params(tape, params, stage)?;
                let (v, a) = inter_attention_rn(tape, f, rn)?;
                (Some(v), Some(a))
            }
            None => (None, None),
        };
        let a = match (w, v) {
            (Some(w), Some(v)) => combine(tape, w, v)?,
            (Some(w), None) => w,
            (None, Some(v)) => v,
            (None, None) => unreachable!("avg_pool handled above"),
        };
        let normalized = tape.normalize(a)?;
        Ok(StageAttention {
            w,
            v,
            a,
            normalized,
            relation,
        })
    }
}

/// One line of an attention dump.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AttentionRecord {
    Frame {
        tracklet_id: String,
        stage: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        w: Option<Vec<f64>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        v: Option<Vec<f64>>,
        a: Vec<f64>,
        normalized: Vec<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        relation: Option<Vec<Vec<f64>>>,
    },
    Semantic {
        tracklet_id: String,
        u: Vec<f64>,
    },
}

impl AttentionRecord {
    pub fn frame(tracklet_id: &str, weights: &AttentionWeights) -> Self {
        let vec = |t: &Tensor| t.data().to_vec();
        AttentionRecord::Frame {
            tracklet_id: tracklet_id.to_string(),
            stage: weights.stage,
            w: weights.w.as_ref().map(vec),
            v: weights.v.as_ref().map(vec),
            a: vec(&weights.a),
            normalized: vec(&weights.normalized),
            relation: weights.relation.as_ref().map(|m| {
                let l = m.shape()[0];
                m.data().chunks(l.max(1)).map(<[f64]>::to_vec).collect()
            }),
        }
    }
}

/// Writes records as JSON lines.
pub fn write_attention_dump<W: Write>(mut out: W, records: &[AttentionRecord]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r).map_err(|e| Error::Data(e.to_string()))?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_attention_dump<R: BufRead>(input: R) -> Result<Vec<AttentionRecord>> {
    let mut records = Vec::new();
    for (n, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let r = serde_json::from_str(&line).map_err(|e| Error::Data(format!("line {}: {e}", n + 1)))?;
        records.push(r);
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn zero_head_gives_half() {
        let f = t(&[3, 2], &[1.0, -2.0, 0.5, 4.0, 9.0, 9.0]);
        let w = intra_attention(&f, &IntraAttentionHead::zeros(2)).unwrap();
        assert_eq!(w.data(), &[0.5, 0.5, 0.5]);
    }

    #[test]
    fn euclidean_hand_case() {
        let f = t(&[3, 2], &[0.0, 0.0, 3.0, 4.0, 0.0, 0.0]);
        let v = inter_attention_euclidean(&f).unwrap();
        let want = [5.0 / 3.0, 10.0 / 3.0, 5.0 / 3.0];
        for (a, b) in v.data().iter().zip(want) {
            assert!((a - b).abs() < 1e-15);
        }
        let same = t(&[2, 2], &[1.0, 2.0, 1.0, 2.0]);
        assert_eq!(inter_attention_euclidean(&same).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn inter_needs_two_frames() {
        let f = t(&[1, 2], &[1.0, 2.0]);
        assert!(matches!(
            inter_attention_euclidean(&f),
            Err(Error::TooFewFrames { frames: 1, min: 2, .. })
        ));
        assert!(inter_attention_rn(&f, &RelationNetwork::zeros(2, 4, 3)).is_err());
    }

    #[test]
    fn zero_relation_network_is_silent() {
        let f = t(&[3, 2], &[1.0, 2.0, -1.0, 0.0, 3.0, 3.0]);
        let rn = RelationNetwork::zeros(2, 4, 3);
        assert!(relation_embed(&f, &rn).unwrap().data().iter().all(|&x| x == 0.0));
        let (v, a) = inter_attention_rn(&f, &rn).unwrap();
        assert!(v.data().iter().all(|&x| x == 0.0));
        assert!(a.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn negative_relation_scores_vanish() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f = random_tensor(vec![4, 3], 1.0, &mut rng);
        let mut rn = RelationNetwork::random(3, 5, 2, 0.5, &mut rng);
        rn.theta_weight = Tensor::zeros([2, 1]);
        rn.theta_bias = Tensor::full([1], -1.0);
        let (v, _) = inter_attention_rn(&f, &rn).unwrap();
        assert!(v.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn combination_examples() {
        let w = t(&[2], &[0.2, 0.2]);
        let v = t(&[2], &[0.4, 0.4]);
        let a = combine(&w, &v).unwrap();
        assert!((a.data()[0] - 0.3).abs() < 1e-15 && (a.data()[1] - 0.3).abs() < 1e-15);
        assert_eq!(combine_and_normalize(&w, &v).unwrap().data(), &[0.5, 0.5]);

        let w = t(&[3], &[0.1, 0.3, 0.6]);
        assert_eq!(combine(&w, &w).unwrap().data(), w.data());

        let z = Tensor::zeros([4]);
        assert_eq!(combine_and_normalize(&z, &z).unwrap().data(), &[0.25; 4]);
        assert!(combine(&w, &z).is_err());
    }

    #[test]
    fn fuse_one_hot_and_uniform() {
        let maps = t(&[2, 1, 1, 2], &[1.0, 2.0, 3.0, 6.0]);
        let one_hot = temporal_fuse(&maps, &t(&[2], &[0.0, 1.0])).unwrap();
        assert_eq!(one_hot.shape(), &[1, 1, 2]);
        assert_eq!(one_hot.data(), &[3.0, 6.0]);
        let avg = temporal_fuse(&maps, &t(&[2], &[0.5, 0.5])).unwrap();
        assert_eq!(avg.data(), &[2.0, 4.0]);
        assert!(temporal_fuse(&maps, &t(&[3], &[0.2, 0.3, 0.5])).is_err());
    }

    #[test]
    fn single_frame_skips_heads() {
        let mut tape = Tape::new();
        let f = tape.constant(t(&[1, 3], &[1.0, 2.0, 3.0]));
        let out = graph::attend(&mut tape, &ParamStore::new(), 1, f, AttentionMode::IntraInterRn).unwrap();
        assert_eq!(tape.value(out.normalized).data(), &[1.0]);
        assert!(out.w.is_none() && out.v.is_none());
    }

    #[test]
    fn mode_names_round_trip() {
        for m in AttentionMode::ALL {
            assert_eq!(m.to_string().parse::<AttentionMode>().unwrap(), m);
        }
        assert!("nope".parse::<AttentionMode>().is_err());
    }

    #[test]
    fn dump_round_trip() {
        let weights = AttentionWeights {
            stage: 2,
            w: Some(t(&[2], &[0.25, 0.75])),
            v: None,
            a: t(&[2], &[0.25, 0.75]),
            normalized: t(&[2], &[0.25, 0.75]),
            relation: Some(t(&[2, 2], &[0.0, 1.0, 1.0, 0.0])),
        };
        let records = vec![
            AttentionRecord::frame("t7", &weights),
            AttentionRecord::Semantic {
                tracklet_id: "t7".into(),
                u: vec![0.5, 0.5],
            },
        ];
        let mut buf = Vec::new();
        write_attention_dump(&mut buf, &records).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(text.lines().count(), 2);
        assert!(!text.contains("\"v\""));
        assert_eq!(read_attention_dump(&buf[..]).unwrap(), records);
    }
}

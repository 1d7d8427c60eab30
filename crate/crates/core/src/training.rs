//! Metric-learning training: loss, momentum SGD, staircase schedule and the
//! two-phase loop (frame-level warm-up, then end-to-end tracklet fusion).
//!
//! Each tracklet of a batch is embedded on its own tape (in parallel). The
//! loss is recorded on a separate head tape whose leaves are the stacked
//! embeddings; its gradients seed the backward pass of each tracklet tape,
//! and the per-tracklet parameter gradients are summed in batch order.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::{frame_embeddings, projection_param};
use crate::data::{random_chunk, Dataset, TrackletRecord};
use crate::error::{Error, Result};
use crate::model::{Model, CLASSIFIER_BIAS, CLASSIFIER_WEIGHT};
use crate::semantic_fusion::{graph as pipeline_graph, FusionMode, Variant};
use crate::tensor::{ParamStore, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Base learning rate of the end-to-end phase.
    pub base_lr: f64,
    /// Base learning rate of the frame-level warm-up.
    pub warmup_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Multiplier applied every `decay_period` epochs.
    pub decay: f64,
    pub decay_period: usize,
    pub warmup_epochs: usize,
    pub epochs: usize,
    /// Batches per epoch; 0 means one pass over the identities.
    pub steps_per_epoch: usize,
    /// Identities per batch (P).
    pub ids_per_batch: usize,
    /// Tracklets per identity in a batch (T).
    pub tracklets_per_id: usize,
    /// Frames sampled from each tracklet (L).
    pub frames_per_tracklet: usize,
    pub ce_weight: f64,
    pub triplet_weight: f64,
    pub margin: f64,
    /// Epochs between test-split evaluations logged by `train`; 0 disables.
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            base_lr: 0.01,
            warmup_lr: 0.02,
            momentum: 0.9,
            weight_decay: 5e-4,
            decay: 0.8,
            decay_period: 20,
            warmup_epochs: 60,
            epochs: 30,
            steps_per_epoch: 0,
            ids_per_batch: 4,
            tracklets_per_id: 2,
            frames_per_tracklet: 8,
            ce_weight: 1.0,
            triplet_weight: 1.0,
            margin: 0.3,
            eval_every: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("train: {m}")));
        if !(self.decay > 0.0 && self.decay < 1.0) {
            return bad("decay must lie in (0, 1)");
        }
        if self.decay_period == 0 {
            return bad("decay_period must be positive");
        }
        if self.ids_per_batch == 0 || self.tracklets_per_id == 0 || self.frames_per_tracklet == 0 {
            return bad("batch sizes must be positive");
        }
        if self.triplet_weight > 0.0 && (self.ids_per_batch < 2 || self.tracklets_per_id < 2) {
            return bad("triplet loss needs at least 2 identities and 2 tracklets per identity");
        }
        if self.base_lr < 0.0 || self.warmup_lr < 0.0 || self.momentum < 0.0 || self.weight_decay < 0.0 {
            return bad("rates must be non-negative");
        }
        if self.ce_weight < 0.0 || self.triplet_weight < 0.0 || self.margin < 0.0 {
            return bad("loss weights and margin must be non-negative");
        }
        Ok(())
    }

    pub fn loss(&self) -> LossConfig {
        LossConfig {
            ce_weight: self.ce_weight,
            triplet_weight: self.triplet_weight,
            margin: self.margin,
        }
    }
}

/// `base · decay^⌊epoch / period⌋`.
pub fn learning_rate(base: f64, decay: f64, period: usize, epoch: usize) -> f64 {
    base * decay.powi((epoch / period) as i32)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    pub ce_weight: f64,
    pub triplet_weight: f64,
    pub margin: f64,
}

/// Loss nodes on a head tape.
#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub total: Var,
    pub ce: Option<Var>,
    pub triplet: Option<Var>,
}

/// Per anchor, the farthest same-label and nearest other-label sample in a
/// distance matrix (lowest index on ties). `None` for anchors lacking
/// either.
pub fn hardest_pairs(dist: &[f64], labels: &[usize]) -> Vec<Option<(usize, usize)>> {
    let n = labels.len();
    (0..n)
        .map(|a| {
            let mut pos: Option<usize> = None;
            let mut neg: Option<usize> = None;
            for j in 0..n {
                let d = dist[a * n + j];
                if j != a && labels[j] == labels[a] {
                    if pos.is_none_or(|p| d > dist[a * n + p]) {
                        pos = Some(j);
                    }
                } else if labels[j] != labels[a] && neg.is_none_or(|q| d < dist[a * n + q]) {
                    neg = Some(j);
                }
            }
            pos.zip(neg)
        })
        .collect()
}

/// `[n × n]` euclidean distances between the rows of `x[n × d]`, flattened.
fn pairwise_distances(tape: &mut Tape, x: Var) -> Result<Var> {
    let n = tape.shape(x)[0];
    let (rows, cols): (Vec<usize>, Vec<usize>) = (0..n * n).map(|p| (p / n, p % n)).unzip();
    let a = tape.index_select(x, &rows)?;
    let b = tape.index_select(x, &cols)?;
    let d = tape.sub(a, b)?;
    Ok(tape.row_norm(d)?)
}

/// Batch-hard triplet loss `mean_a max(0, d(a, p*) − d(a, n*) + margin)`
/// over anchors that have both a positive and a negative.
pub fn triplet_loss(tape: &mut Tape, embeddings: Var, labels: &[usize], margin: f64) -> Result<Var> {
    let n = tape.shape(embeddings)[0];
    if labels.iter().all(|&l| l == labels[0]) {
        return Err(Error::SingleIdentityBatch);
    }
    let dist = pairwise_distances(tape, embeddings)?;
    let pairs: Vec<(usize, usize)> = hardest_pairs(tape.value(dist).data(), labels)
        .into_iter()
        .enumerate()
        .filter_map(|(a, p)| p.map(|(pos, neg)| (a * n + pos, a * n + neg)))
        .collect();
    if pairs.is_empty() {
        return Err(Error::Data("no anchor has both a positive and a negative".into()));
    }
    let (pi, ni): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
    let dp = tape.index_select(dist, &pi)?;
    let dn = tape.index_select(dist, &ni)?;
    let gap = tape.sub(dp, dn)?;
    let k = tape.shape(gap)[0];
    let m = tape.constant(Tensor::full([k], margin));
    let hinge = tape.add(gap, m)?;
    let hinge = tape.relu(hinge)?;
    Ok(tape.mean_all(hinge)?)
}

/// `λ_ce · CE(classifier(x), labels) + λ_tri · triplet(x, labels)`.
/// `classifier` is `(weight[d × classes], bias[classes])`; required when
/// the CE weight is positive.
pub fn batch_loss(
    tape: &mut Tape,
    embeddings: Var,
    labels: &[usize],
    classifier: Option<(Var, Var)>,
    cfg: &LossConfig,
) -> Result<LossParts> {
    let s = tape.shape(embeddings).to_vec();
    if s.len() != 2 || s[0] != labels.len() {
        return Err(Error::Shape {
            op: "batch_loss",
            expected: vec![labels.len(), s.get(1).copied().unwrap_or(0)],
            actual: s,
        });
    }
    if labels.len() < 2 {
        return Err(Error::BatchTooSmall(labels.len()));
    }
    let mut terms = Vec::new();
    let ce = if cfg.ce_weight > 0.0 {
        let (w, b) = classifier.ok_or_else(|| Error::Config("cross-entropy needs a classifier".into()))?;
        let logits = tape.matmul(embeddings, w)?;
        let logits = tape.add_bias(logits, b)?;
        let ce = tape.cross_entropy(logits, labels)?;
        terms.push(tape.scale(ce, cfg.ce_weight)?);
        Some(ce)
    } else {
        None
    };
    let triplet = if cfg.triplet_weight > 0.0 {
        let t = triplet_loss(tape, embeddings, labels, cfg.margin)?;
        terms.push(tape.scale(t, cfg.triplet_weight)?);
        Some(t)
    } else {
        None
    };
    let mut total = *terms
        .first()
        .ok_or_else(|| Error::Config("both loss weights are zero".into()))?;
    for &t in &terms[1..] {
        total = tape.add(total, t)?;
    }
    Ok(LossParts { total, ce, triplet })
}

/// Classic momentum SGD with L2 weight decay:
/// `v ← μ·v + (g + λ·p)`, `p ← p − lr·v`.
#[derive(Clone, Debug, Default)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: BTreeMap<String, Vec<f64>>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: BTreeMap::new(),
        }
    }

    /// Applies one update. Nothing changes if any gradient is non-finite
    /// or does not match its parameter.
    pub fn step(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Tensor>, lr: f64) -> Result<()> {
        for (name, g) in grads {
            if g.data().iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteGradient(name.clone()));
            }
            let p = params
                .get(name)
                .ok_or_else(|| Error::Config(format!("gradient for unknown parameter `{name}`")))?;
            if p.shape() != g.shape() {
                return Err(Error::Shape {
                    op: "sgd_step",
                    expected: p.shape().to_vec(),
                    actual: g.shape().to_vec(),
                });
            }
        }
        for (name, g) in grads {
            let p = params.get_mut(name).expect("checked above").data_mut();
            let v = self.velocity.entry(name.clone()).or_insert_with(|| vec![0.0; g.numel()]);
            for ((pi, vi), gi) in p.iter_mut().zip(v.iter_mut()).zip(g.data()) {
                *vi = self.momentum * *vi + gi + self.weight_decay * *pi;
                *pi -= lr * *vi;
            }
        }
        Ok(())
    }
}

/// One sampled batch: frames per tracklet and their class indices.
#[derive(Clone, Debug)]
pub struct Batch {
    pub frames: Vec<Tensor>,
    pub labels: Vec<usize>,
}

/// Draws P identities × T tracklets per batch, with a random contiguous
/// chunk of L frames from each tracklet.
#[derive(Debug)]
pub struct Sampler<'a> {
    by_class: Vec<Vec<&'a TrackletRecord>>,
    classes: BTreeMap<u32, usize>,
    rng: ChaCha8Rng,
}

impl<'a> Sampler<'a> {
    pub fn new(dataset: &'a Dataset, seed: u64) -> Result<Self> {
        if dataset.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let classes: BTreeMap<u32, usize> = dataset.identities().into_iter().enumerate().map(|(i, id)| (id, i)).collect();
        let mut by_class = vec![Vec::new(); classes.len()];
        for t in &dataset.tracklets {
            if t.is_empty() {
                return Err(Error::EmptyTracklet);
            }
            by_class[classes[&t.identity]].push(t);
        }
        Ok(Self {
            by_class,
            classes,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn num_classes(&self) -> usize {
        self.by_class.len()
    }

    /// Class index of each identity label.
    pub fn classes(&self) -> &BTreeMap<u32, usize> {
        &self.classes
    }

    /// Batches of one epoch: identities are shuffled and cut into groups of
    /// P (at least one batch, repeating identities if there are fewer than P).
    pub fn epoch(&mut self, cfg: &TrainConfig) -> Result<Vec<Batch>> {
        let n = self.num_classes();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut self.rng);
        let p = cfg.ids_per_batch;
        let mut groups: Vec<Vec<usize>> = order.chunks(p).filter(|c| c.len() == p).map(<[usize]>::to_vec).collect();
        if groups.is_empty() {
            groups.push((0..p).map(|i| order[i % n]).collect());
        }
        if cfg.steps_per_epoch > 0 {
            let base = groups.clone();
            while groups.len() < cfg.steps_per_epoch {
                let mut more = base.clone();
                let mut flat: Vec<usize> = more.concat();
                flat.shuffle(&mut self.rng);
                more = flat.chunks(p).map(<[usize]>::to_vec).collect();
                groups.extend(more);
            }
            groups.truncate(cfg.steps_per_epoch);
        }
        groups.into_iter().map(|g| self.batch(&g, cfg)).collect()
    }

    fn batch(&mut self, classes: &[usize], cfg: &TrainConfig) -> Result<Batch> {
        let mut frames = Vec::new();
        let mut labels = Vec::new();
        for &c in classes {
            let pool = &self.by_class[c];
            let mut picks: Vec<usize> = (0..pool.len()).collect();
            picks.shuffle(&mut self.rng);
            for k in 0..cfg.tracklets_per_id {
                let t = pool[picks[k % picks.len()]];
                let idx = random_chunk(t.len(), cfg.frames_per_tracklet, &mut self.rng);
                frames.push(t.model_input(&idx)?);
                labels.push(c);
            }
        }
        Ok(Batch { frames, labels })
    }
}

/// Which part of training produced a record.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Warmup,
    EndToEnd,
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub phase: Phase,
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ce: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub triplet: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub map: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rank1: Option<f64>,
}

/// Progress of one phase.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainState {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    /// Mean loss of each finished epoch.
    pub epoch_losses: Vec<f64>,
}

/// Callbacks invoked during training.
pub trait TrainHooks {
    fn on_step(&mut self, _record: &LogRecord) {}

    /// Called after each epoch; may return `(mAP, rank-1)` to be logged.
    fn on_epoch_end(&mut self, _model: &Model, _phase: Phase, _epoch: usize) -> Option<(f64, f64)> {
        None
    }
}

/// Hooks that do nothing.
pub struct NoHooks;

impl TrainHooks for NoHooks {}

/// Scalar values of one step's loss terms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLoss {
    pub total: f64,
    pub ce: Option<f64>,
    pub triplet: Option<f64>,
}

/// Loss and summed parameter gradients of one batch. `embed` records the
/// rows contributed by one tracklet (`[rows × d]`); each row gets the
/// tracklet's label.
pub fn batch_gradients<F>(model: &Model, batch: &Batch, loss_cfg: &LossConfig, embed: F) -> Result<(StepLoss, BTreeMap<String, Tensor>)>
where
    F: Fn(&mut Tape, &Model, Var) -> Result<Var> + Sync,
{
    let tapes: Vec<(Tape, Var)> = batch
        .frames
        .par_iter()
        .map(|frames| {
            let mut tape = Tape::new();
            let x = tape.constant(frames.clone());
            let out = embed(&mut tape, model, x)?;
            let out = if tape.shape(out).len() == 1 {
                let d = tape.shape(out)[0];
                tape.reshape(out, [1, d])?
            } else {
                out
            };
            Ok((tape, out))
        })
        .collect::<Result<_>>()?;

    let mut head = Tape::new();
    let mut leaves = Vec::with_capacity(tapes.len());
    let mut labels = Vec::new();
    for ((tape, out), &label) in tapes.iter().zip(&batch.labels) {
        let value = tape.value(*out).clone();
        labels.extend(std::iter::repeat_n(label, value.shape()[0]));
        leaves.push(head.leaf(value.with_grad(true)));
    }
    let mut rows = leaves[0];
    for &l in &leaves[1..] {
        rows = head.concat(rows, l, 0)?;
    }
    let classifier = if loss_cfg.ce_weight > 0.0 {
        Some((
            head.param(CLASSIFIER_WEIGHT, &model.params)?,
            head.param(CLASSIFIER_BIAS, &model.params)?,
        ))
    } else {
        None
    };
    let parts = batch_loss(&mut head, rows, &labels, classifier, loss_cfg)?;
    let head_grads = head.backward(parts.total)?;
    let loss = StepLoss {
        total: head.value(parts.total).item()?,
        ce: parts.ce.map(|v| head.value(v).data()[0]),
        triplet: parts.triplet.map(|v| head.value(v).data()[0]),
    };

    let per_tracklet: Vec<BTreeMap<String, Tensor>> = tapes
        .par_iter()
        .zip(&leaves)
        .map(|((tape, out), leaf)| {
            let seed = head_grads.wrt(*leaf).expect("leaf is differentiable");
            Ok(tape.backward_with_seed(*out, seed)?.into_named())
        })
        .collect::<Result<_>>()?;
    let mut grads = head_grads.into_named();
    for g in per_tracklet {
        accumulate(&mut grads, g);
    }
    Ok((loss, grads))
}

fn accumulate(into: &mut BTreeMap<String, Tensor>, from: BTreeMap<String, Tensor>) {
    for (name, g) in from {
        match into.get_mut(&name) {
            Some(acc) => acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += b),
            None => {
                into.insert(name, g);
            }
        }
    }
}

/// Frame-level rows for the warm-up phase.
pub fn embed_frames(tape: &mut Tape, model: &Model, frames: Var) -> Result<Var> {
    frame_embeddings(tape, &model.params, &model.config.backbone, frames)
}

/// Adds (or replaces) a classifier head with `classes` outputs.
pub fn ensure_classifier(model: &mut Model, classes: usize, seed: u64) {
    let d = model.config.backbone.embed_dim;
    let fits = model
        .params
        .get(CLASSIFIER_WEIGHT)
        .is_some_and(|w| w.shape() == [d, classes]);
    if fits {
        return;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dist = Normal::new(0.0, 1.0 / (d as f64).sqrt()).expect("positive std");
    let w = (0..d * classes).map(|_| dist.sample(&mut rng)).collect();
    model.params.insert(CLASSIFIER_WEIGHT, Tensor::new([d, classes], w).expect("finite"));
    model.params.insert(CLASSIFIER_BIAS, Tensor::zeros([classes]));
    model.config.num_classes = classes;
}

fn run_phase<F, H>(
    dataset: &Dataset,
    model: &mut Model,
    cfg: &TrainConfig,
    phase: Phase,
    seed: u64,
    embed: F,
    hooks: &mut H,
) -> Result<TrainState>
where
    F: Fn(&mut Tape, &Model, Var) -> Result<Var> + Sync,
    H: TrainHooks + ?Sized,
{
    let (epochs, base) = match phase {
        Phase::Warmup => (cfg.warmup_epochs, cfg.warmup_lr),
        Phase::EndToEnd => (cfg.epochs, cfg.base_lr),
    };
    let mut state = TrainState::default();
    if epochs == 0 {
        return Ok(state);
    }
    let mut sampler = Sampler::new(dataset, seed)?;
    ensure_classifier(model, sampler.num_classes(), seed ^ 0x5eed);
    let loss_cfg = match phase {
        Phase::Warmup => LossConfig {
            ce_weight: 1.0,
            triplet_weight: 0.0,
            margin: cfg.margin,
        },
        Phase::EndToEnd => cfg.loss(),
    };
    let mut opt = Sgd::new(cfg.momentum, cfg.weight_decay);
    for epoch in 0..epochs {
        state.epoch = epoch;
        state.lr = learning_rate(base, cfg.decay, cfg.decay_period, epoch);
        let batches = sampler.epoch(cfg)?;
        let mut total = 0.0;
        for batch in &batches {
            let (loss, grads) = batch_gradients(model, batch, &loss_cfg, &embed)?;
            opt.step(&mut model.params, &grads, state.lr)?;
            total += loss.total;
            hooks.on_step(&LogRecord {
                phase,
                epoch,
                step: state.step,
                lr: state.lr,
                loss: loss.total,
                ce: loss.ce,
                triplet: loss.triplet,
                map: None,
                rank1: None,
            });
            state.step += 1;
        }
        let mean = total / batches.len() as f64;
        state.epoch_losses.push(mean);
        if let Some((map, rank1)) = hooks.on_epoch_end(model, phase, epoch) {
            hooks.on_step(&LogRecord {
                phase,
                epoch,
                step: state.step,
                lr: state.lr,
                loss: mean,
                ce: None,
                triplet: None,
                map: Some(map),
                rank1: Some(rank1),
            });
        }
    }
    Ok(state)
}

/// Frame-level identity classification (cross-entropy only) of the
/// backbone and last projection; fusion branches are bypassed. Warns when the loss of the last epoch is not
/// below that of the first.
pub fn warm_up<H: TrainHooks + ?Sized>(dataset: &Dataset, model: &mut Model, cfg: &TrainConfig, seed: u64, hooks: &mut H) -> Result<TrainState> {
    cfg.validate()?;
    let state = run_phase(dataset, model, cfg, Phase::Warmup, seed, embed_frames, hooks)?;
    if state.step > 0 {
        share_projection(model);
    }
    if let (Some(first), Some(last)) = (state.epoch_losses.first(), state.epoch_losses.last()) {
        if state.epoch_losses.len() > 1 && last >= first {
            log::warn!("warm-up loss did not decrease ({first:.4} → {last:.4})");
        }
    }
    Ok(state)
}

/// Copies the warmed-up final projection into every other branch, so each
/// branch starts from the embedding the warm-up trained.
fn share_projection(model: &mut Model) {
    let last = model.config.backbone.num_stages;
    for part in ["weight", "bias"] {
        let trained = model.params.get(&projection_param(last, part)).expect("projection exists").clone();
        for s in 1..last {
            model.params.insert(projection_param(s, part), trained.clone());
        }
    }
}

/// End-to-end training of `variant` on tracklet embeddings. The
/// feature-average baseline has no fusion path and is left unchanged.
pub fn fine_tune<H: TrainHooks + ?Sized>(
    dataset: &Dataset,
    model: &mut Model,
    variant: Variant,
    cfg: &TrainConfig,
    seed: u64,
    hooks: &mut H,
) -> Result<TrainState> {
    cfg.validate()?;
    if variant.fusion == FusionMode::FeatureAverage {
        return Ok(TrainState::default());
    }
    let embed = move |tape: &mut Tape, model: &Model, frames: Var| -> Result<Var> {
        Ok(pipeline_graph::forward(tape, model, frames, variant)?.g_fused)
    };
    run_phase(dataset, model, cfg, Phase::EndToEnd, seed.wrapping_add(1), embed, hooks)
}

/// Warm-up followed by end-to-end training.
pub fn train<H: TrainHooks + ?Sized>(
    dataset: &Dataset,
    model: &mut Model,
    variant: Variant,
    cfg: &TrainConfig,
    seed: u64,
    hooks: &mut H,
) -> Result<(TrainState, TrainState)> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let warm = warm_up(dataset, model, cfg, seed, hooks)?;
    let e2e = fine_tune(dataset, model, variant, cfg, seed, hooks)?;
    Ok((warm, e2e))
}

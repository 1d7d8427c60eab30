//! Split-level evaluation and the fusion/attention ablation grid.

use std::fmt::Write as _;
use std::time::Instant;

use crate::config::RunConfig;
use crate::data::{evenly_spaced, split, Dataset, Split, TrackletRecord};
use crate::error::Result;
use crate::eval::{evaluate, EmbeddingSet, Metric, Report, Role};
use crate::model::Model;
use crate::semantic_fusion::{embed_all, EmbeddingRecord, FusionMode, Variant};
use crate::temporal_attention::AttentionMode;
use crate::training::{fine_tune, warm_up, NoHooks};

/// Model input for evaluation: `count` evenly spaced frames.
pub fn eval_frames(t: &TrackletRecord, count: usize) -> Result<crate::tensor::Tensor> {
    t.model_input(&evenly_spaced(t.len(), count))
}

/// Embeds query and gallery tracklets of `split`.
pub fn embed_split(split: &Split, model: &Model, variant: Variant, frames: usize) -> Result<Vec<EmbeddingRecord>> {
    let tagged: Vec<(&TrackletRecord, Role)> = split
        .query
        .iter()
        .map(|t| (t, Role::Query))
        .chain(split.gallery.iter().map(|t| (t, Role::Gallery)))
        .collect();
    let inputs = tagged
        .iter()
        .map(|(t, _)| eval_frames(t, frames))
        .collect::<Result<Vec<_>>>()?;
    let embeddings = embed_all(&inputs, model, variant)?;
    Ok(tagged
        .into_iter()
        .zip(embeddings)
        .map(|((t, role), e)| EmbeddingRecord {
            tracklet_id: t.id.clone(),
            identity: t.identity,
            camera: t.camera,
            role,
            embedding: e.into_data(),
        })
        .collect())
}

pub fn evaluate_records(records: &[EmbeddingRecord], metric: Metric, ranks: &[usize]) -> Result<Report> {
    let query = EmbeddingSet::from_records(records, Role::Query)?;
    let gallery = EmbeddingSet::from_records(records, Role::Gallery)?;
    evaluate(&query, &gallery, metric, ranks)
}

pub fn evaluate_split(split: &Split, model: &Model, variant: Variant, cfg: &RunConfig) -> Result<Report> {
    let records = embed_split(split, model, variant, cfg.data.eval_frames)?;
    evaluate_records(&records, cfg.eval.metric, &cfg.eval.ranks)
}

/// Rows of the fusion-method comparison (all with plain average pooling).
pub fn fusion_variants() -> Vec<Variant> {
    let avg = |fusion| Variant {
        fusion,
        attention: AttentionMode::AvgPool,
    };
    vec![
        Variant::FEATURE_AVERAGE,
        avg(FusionMode::EarlyFusion),
        avg(FusionMode::LateFusion),
        avg(FusionMode::MsAverage),
        avg(FusionMode::MsSemanticAttention),
    ]
}

/// Rows of the attention comparison: every attention mode on late fusion,
/// plus the full multi-stage model.
pub fn attention_variants() -> Vec<Variant> {
    let mut v: Vec<Variant> = AttentionMode::ALL
        .iter()
        .map(|&attention| Variant {
            fusion: FusionMode::LateFusion,
            attention,
        })
        .collect();
    v.push(Variant::FULL);
    v
}

/// Mean mAP and rank-1 of one variant over the splits.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub variant: Variant,
    pub maps: Vec<f64>,
    pub rank1: Vec<f64>,
}

impl AblationRow {
    pub fn mean_map(&self) -> f64 {
        mean(&self.maps)
    }

    pub fn mean_rank1(&self) -> f64 {
        mean(&self.rank1)
    }
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Smallest mAP gap (as a fraction) counted as a reproduced difference.
pub const MIN_GAP: f64 = 0.01;

/// One expected ordering between two variants' mean mAP.
#[derive(Clone, Debug, PartialEq)]
pub struct OrderingCheck {
    pub lower: Variant,
    pub higher: Variant,
    /// `<` when true, `≤` otherwise.
    pub strict: bool,
    /// `mAP(higher) − mAP(lower)`.
    pub gap: f64,
}

impl OrderingCheck {
    pub fn holds(&self) -> bool {
        if self.strict {
            self.gap > 0.0
        } else {
            self.gap >= 0.0
        }
    }

    /// Ordering holds but by less than [`MIN_GAP`].
    pub fn narrow(&self) -> bool {
        self.holds() && self.gap < MIN_GAP
    }

    pub fn verdict(&self) -> &'static str {
        match (self.holds(), self.narrow()) {
            (false, _) => "REPRODUCTION FAILURE (order reversed)",
            (true, true) => "REPRODUCTION FAILURE (gap < 1 mAP point)",
            (true, false) => "ok",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationReport {
    pub splits: usize,
    pub fusion: Vec<AblationRow>,
    pub attention: Vec<AblationRow>,
    pub checks: Vec<OrderingCheck>,
    pub seconds: f64,
}

impl AblationReport {
    pub fn row(&self, variant: Variant) -> Option<&AblationRow> {
        self.fusion.iter().chain(&self.attention).find(|r| r.variant == variant)
    }

    /// Every expected ordering holds (narrow gaps are flagged, not failed).
    pub fn ordering_holds(&self) -> bool {
        self.checks.iter().all(OrderingCheck::holds)
    }

    pub fn table(&self) -> String {
        let mut s = String::new();
        let section = |s: &mut String, title: &str, rows: &[AblationRow]| {
            writeln!(s, "{title}").unwrap();
            writeln!(s, "{:<44} {:>7} {:>7}", "variant", "mAP", "rank-1").unwrap();
            for r in rows {
                writeln!(s, "{:<44} {:>7.2} {:>7.2}", r.variant.to_string(), 100.0 * r.mean_map(), 100.0 * r.mean_rank1()).unwrap();
            }
        };
        section(&mut s, "Fusion methods (average pooling)", &self.fusion);
        writeln!(s).unwrap();
        section(&mut s, "Attention methods", &self.attention);
        writeln!(s).unwrap();
        writeln!(s, "Expected orderings (mean mAP over {} splits)", self.splits).unwrap();
        for c in &self.checks {
            writeln!(
                s,
                "{} {} {}: gap {:+.2} points: {}",
                c.lower,
                if c.strict { "<" } else { "<=" },
                c.higher,
                100.0 * c.gap,
                c.verdict()
            )
            .unwrap();
        }
        writeln!(s, "elapsed {:.1} s", self.seconds).unwrap();
        s
    }
}

/// Orderings the grid is expected to show.
pub fn expected_orderings() -> Vec<(Variant, Variant, bool)> {
    let avg = |fusion| Variant {
        fusion,
        attention: AttentionMode::AvgPool,
    };
    let late = |attention| Variant {
        fusion: FusionMode::LateFusion,
        attention,
    };
    vec![
        (Variant::FEATURE_AVERAGE, avg(FusionMode::LateFusion), true),
        (avg(FusionMode::LateFusion), avg(FusionMode::MsAverage), false),
        (avg(FusionMode::MsAverage), avg(FusionMode::MsSemanticAttention), false),
        (late(AttentionMode::AvgPool), late(AttentionMode::IntraInterRn), true),
    ]
}

/// Progress callback of [`run_ablation`]: `(split, variant, report)`.
pub trait AblationProgress {
    fn on_result(&mut self, _split: usize, _variant: Variant, _report: &Report) {}
}

impl AblationProgress for () {}

/// Trains and evaluates every variant of both comparisons on
/// `cfg.data.num_splits` identity splits. Per split the warm-up runs once;
/// each variant fine-tunes its own copy of the warmed-up model. The
/// feature-average baseline is the warmed-up model itself.
pub fn run_ablation<P: AblationProgress + ?Sized>(dataset: &Dataset, cfg: &RunConfig, progress: &mut P) -> Result<AblationReport> {
    run_ablation_with(dataset, cfg, &fusion_variants(), &attention_variants(), progress)
}

pub fn run_ablation_with<P: AblationProgress + ?Sized>(
    dataset: &Dataset,
    cfg: &RunConfig,
    fusion: &[Variant],
    attention: &[Variant],
    progress: &mut P,
) -> Result<AblationReport> {
    cfg.validate()?;
    let start = Instant::now();
    let mut variants: Vec<Variant> = Vec::new();
    for v in fusion.iter().chain(attention) {
        if !variants.contains(v) {
            variants.push(*v);
        }
    }
    let mut results: Vec<AblationRow> = variants
        .iter()
        .map(|&variant| AblationRow {
            variant,
            maps: Vec::new(),
            rank1: Vec::new(),
        })
        .collect();

    for s in 0..cfg.data.num_splits {
        let split_seed = cfg.seed.wrapping_add(1000 * s as u64);
        let sp = split(dataset, cfg.data.train_fraction, split_seed)?;
        let mut base = Model::init(cfg.model_config(), split_seed)?;
        warm_up(&sp.train, &mut base, &cfg.train, split_seed, &mut NoHooks)?;
        for row in &mut results {
            let mut model = base.clone();
            fine_tune(&sp.train, &mut model, row.variant, &cfg.train, split_seed, &mut NoHooks)?;
            let report = evaluate_split(&sp, &model, row.variant, cfg)?;
            progress.on_result(s, row.variant, &report);
            row.maps.push(report.map);
            row.rank1.push(report.rank(1).unwrap_or(f64::NAN));
        }
    }

    let find = |v: Variant| results.iter().find(|r| r.variant == v);
    let checks = expected_orderings()
        .into_iter()
        .filter_map(|(lower, higher, strict)| {
            let (l, h) = (find(lower)?, find(higher)?);
            Some(OrderingCheck {
                lower,
                higher,
                strict,
                gap: h.mean_map() - l.mean_map(),
            })
        })
        .collect();
    let pick = |set: &[Variant]| -> Vec<AblationRow> { set.iter().filter_map(|&v| find(v).cloned()).collect() };
    Ok(AblationReport {
        splits: cfg.data.num_splits,
        fusion: pick(fusion),
        attention: pick(attention),
        checks,
        seconds: start.elapsed().as_secs_f64(),
    })
}

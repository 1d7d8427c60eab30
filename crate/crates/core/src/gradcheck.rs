//! Finite-difference suite over every tape op, the attention and loss
//! modules, and the parameters of the full tracklet pipeline.

use std::fmt::Write as _;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::config::RunConfig;
use crate::data::PIXEL_MEAN;
use crate::error::Result;
use crate::model::Model;
use crate::semantic_fusion::{graph as pipeline, FusionMode, Variant};
use crate::temporal_attention::graph::{self as attn, IntraVars, RelationVars};
use crate::temporal_attention::AttentionMode;
use crate::tensor::finite_diff::{check_gradients, ProbeReport};
use crate::tensor::{Tape, TensorError, Tensor, Var};
use crate::training::{batch_loss, triplet_loss, LossConfig};

/// Largest accepted relative error.
pub const TOLERANCE: f64 = 1e-4;
/// Random instances per op.
pub const SEEDS_PER_OP: u64 = 20;
/// Random tracklets per pipeline variant.
pub const PIPELINE_SEEDS: u64 = 2;
/// Coordinates probed per pipeline parameter tensor.
pub const PIPELINE_PROBES: usize = 2;

#[derive(Clone, Debug, PartialEq)]
pub struct CaseResult {
    pub name: String,
    pub report: ProbeReport,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub cases: Vec<CaseResult>,
    pub seconds: f64,
}

impl GradcheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.cases.iter().map(|c| c.report.max_rel_err).fold(0.0, f64::max)
    }

    pub fn checked(&self) -> usize {
        self.cases.iter().map(|c| c.report.checked).sum()
    }

    pub fn passed(&self) -> bool {
        self.max_rel_err() < TOLERANCE && self.cases.iter().all(|c| c.report.checked > 0)
    }

    pub fn table(&self) -> String {
        let mut s = String::new();
        writeln!(s, "{:<48} {:>8} {:>8} {:>12}", "case", "checked", "skipped", "max rel err").unwrap();
        for c in &self.cases {
            writeln!(
                s,
                "{:<48} {:>8} {:>8} {:>12.3e}",
                c.name, c.report.checked, c.report.skipped, c.report.max_rel_err
            )
            .unwrap();
        }
        writeln!(
            s,
            "overall max rel err {:.3e} over {} probes in {:.1} s: {}",
            self.max_rel_err(),
            self.checked(),
            self.seconds,
            if self.passed() { "PASS" } else { "FAIL" }
        )
        .unwrap();
        s
    }
}

type Build = Box<dyn Fn(&mut Tape, &[Var]) -> std::result::Result<Var, TensorError>>;

/// One random instance: inputs and the scalar function over them.
struct Instance {
    inputs: Vec<Tensor>,
    build: Build,
}

fn randn<R: Rng>(rng: &mut R, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::new(shape.to_vec(), data).expect("finite")
}

fn positive<R: Rng>(rng: &mut R, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(0.1..2.0)).collect();
    Tensor::new(shape.to_vec(), data).expect("finite")
}

/// Reduces `out` to `Σ out ⊙ r` for a fixed random `r`.
fn project(tape: &mut Tape, out: Var, r: &Tensor) -> std::result::Result<Var, TensorError> {
    let r = tape.constant(r.clone());
    let p = tape.mul(out, r)?;
    tape.sum_all(p)
}

fn lift<T>(r: Result<T>) -> std::result::Result<T, TensorError> {
    r.map_err(|e| TensorError::Invalid {
        op: "gradcheck",
        msg: e.to_string(),
    })
}

/// An op taking the inputs and returning a tensor, reduced by projection.
fn projected<R, F>(rng: &mut R, inputs: Vec<Tensor>, out_shape: &[usize], f: F) -> Instance
where
    R: Rng,
    F: Fn(&mut Tape, &[Var]) -> std::result::Result<Var, TensorError> + 'static,
{
    let r = randn(rng, out_shape);
    Instance {
        inputs,
        build: Box::new(move |tape, v| {
            let out = f(tape, v)?;
            project(tape, out, &r)
        }),
    }
}

type Case = (&'static str, fn(&mut ChaCha8Rng) -> Instance);

fn op_cases() -> Vec<Case> {
    vec![
        ("op matmul", |rng| {
            let (a, b) = (randn(rng, &[3, 4]), randn(rng, &[4, 5]));
            projected(rng, vec![a, b], &[3, 5], |t, v| t.matmul(v[0], v[1]))
        }),
        ("op conv2d stride 1", |rng| {
            let x = randn(rng, &[2, 3, 5, 4]);
            let k = randn(rng, &[4, 3, 3, 3]);
            let b = randn(rng, &[4]);
            projected(rng, vec![x, k, b], &[2, 4, 5, 4], |t, v| t.conv2d(v[0], v[1], Some(v[2]), 1))
        }),
        ("op conv2d stride 2", |rng| {
            let x = randn(rng, &[1, 2, 6, 5]);
            let k = randn(rng, &[3, 2, 3, 3]);
            projected(rng, vec![x, k], &[1, 3, 3, 3], |t, v| t.conv2d(v[0], v[1], None, 2))
        }),
        ("op avg_pool2", |rng| {
            let x = randn(rng, &[2, 3, 4, 6]);
            projected(rng, vec![x], &[2, 3, 2, 3], |t, v| t.avg_pool2(v[0]))
        }),
        ("op add_bias", |rng| {
            let (x, b) = (randn(rng, &[2, 3, 4]), randn(rng, &[4]));
            projected(rng, vec![x, b], &[2, 3, 4], |t, v| t.add_bias(v[0], v[1]))
        }),
        ("op relu", |rng| {
            let x = randn(rng, &[3, 4]);
            projected(rng, vec![x], &[3, 4], |t, v| t.relu(v[0]))
        }),
        ("op sigmoid", |rng| {
            let x = randn(rng, &[3, 4]);
            projected(rng, vec![x], &[3, 4], |t, v| t.sigmoid(v[0]))
        }),
        ("op add", |rng| {
            let (a, b) = (randn(rng, &[3, 4]), randn(rng, &[3, 4]));
            projected(rng, vec![a, b], &[3, 4], |t, v| t.add(v[0], v[1]))
        }),
        ("op sub", |rng| {
            let (a, b) = (randn(rng, &[3, 4]), randn(rng, &[3, 4]));
            projected(rng, vec![a, b], &[3, 4], |t, v| t.sub(v[0], v[1]))
        }),
        ("op mul", |rng| {
            let (a, b) = (randn(rng, &[3, 4]), randn(rng, &[3, 4]));
            projected(rng, vec![a, b], &[3, 4], |t, v| t.mul(v[0], v[1]))
        }),
        ("op mul (shared input)", |rng| {
            let a = randn(rng, &[5]);
            projected(rng, vec![a], &[5], |t, v| t.mul(v[0], v[0]))
        }),
        ("op scale", |rng| {
            let x = randn(rng, &[3, 4]);
            let c: f64 = rng.random_range(-2.0..2.0);
            projected(rng, vec![x], &[3, 4], move |t, v| t.scale(v[0], c))
        }),
        ("op sum axis 1", |rng| {
            let x = randn(rng, &[3, 4, 2]);
            projected(rng, vec![x], &[3, 2], |t, v| t.sum(v[0], 1))
        }),
        ("op mean axis 0", |rng| {
            let x = randn(rng, &[3, 4, 2]);
            projected(rng, vec![x], &[4, 2], |t, v| t.mean(v[0], 0))
        }),
        ("op max axis 2", |rng| {
            let x = randn(rng, &[3, 4, 5]);
            projected(rng, vec![x], &[3, 4], |t, v| t.max(v[0], 2))
        }),
        ("op sum_all", |rng| {
            let x = randn(rng, &[3, 4]);
            let r = randn(rng, &[3, 4]);
            Instance {
                inputs: vec![x],
                build: Box::new(move |t, v| {
                    let r = t.constant(r.clone());
                    let sq = t.mul(v[0], r)?;
                    t.sum_all(sq)
                }),
            }
        }),
        ("op mean_all", |rng| {
            let x = randn(rng, &[3, 4]);
            Instance {
                inputs: vec![x],
                build: Box::new(|t, v| {
                    let sq = t.mul(v[0], v[0])?;
                    t.mean_all(sq)
                }),
            }
        }),
        ("op softmax axis 1", |rng| {
            let x = randn(rng, &[3, 5]);
            projected(rng, vec![x], &[3, 5], |t, v| t.softmax(v[0], 1))
        }),
        ("op softmax axis 0", |rng| {
            let x = randn(rng, &[4, 2]);
            projected(rng, vec![x], &[4, 2], |t, v| t.softmax(v[0], 0))
        }),
        ("op normalize", |rng| {
            let x = positive(rng, &[6]);
            projected(rng, vec![x], &[6], |t, v| t.normalize(v[0]))
        }),
        ("op row_norm", |rng| {
            let x = randn(rng, &[4, 6]);
            projected(rng, vec![x], &[4], |t, v| t.row_norm(v[0]))
        }),
        ("op cross_entropy", |rng| {
            let x = randn(rng, &[4, 5]);
            let targets: Vec<usize> = (0..4).map(|_| rng.random_range(0..5)).collect();
            Instance {
                inputs: vec![x],
                build: Box::new(move |t, v| t.cross_entropy(v[0], &targets)),
            }
        }),
        ("op concat axis 0", |rng| {
            let (a, b) = (randn(rng, &[2, 3]), randn(rng, &[4, 3]));
            projected(rng, vec![a, b], &[6, 3], |t, v| t.concat(v[0], v[1], 0))
        }),
        ("op concat axis 1", |rng| {
            let (a, b) = (randn(rng, &[2, 3]), randn(rng, &[2, 2]));
            projected(rng, vec![a, b], &[2, 5], |t, v| t.concat(v[0], v[1], 1))
        }),
        ("op stack", |rng| {
            let xs: Vec<Tensor> = (0..3).map(|_| randn(rng, &[2, 3])).collect();
            projected(rng, xs, &[3, 2, 3], |t, v| t.stack(v))
        }),
        ("op index_select", |rng| {
            let x = randn(rng, &[5, 3]);
            let index: Vec<usize> = (0..7).map(|_| rng.random_range(0..5)).collect();
            projected(rng, vec![x], &[7, 3], move |t, v| t.index_select(v[0], &index))
        }),
        ("op weighted_sum", |rng| {
            let (w, x) = (randn(rng, &[4]), randn(rng, &[4, 3, 2]));
            projected(rng, vec![w, x], &[3, 2], |t, v| t.weighted_sum(v[0], v[1]))
        }),
        ("op reshape", |rng| {
            let x = randn(rng, &[2, 6]);
            projected(rng, vec![x], &[3, 4], |t, v| t.reshape(v[0], [3, 4]))
        }),
    ]
}

fn module_cases() -> Vec<Case> {
    vec![
        ("intra_attention", |rng| {
            let (f, w, b) = (randn(rng, &[5, 4]), randn(rng, &[4, 1]), randn(rng, &[1]));
            projected(rng, vec![f, w, b], &[5], |t, v| {
                lift(attn::intra_attention(t, v[0], IntraVars { weight: v[1], bias: v[2] }))
            })
        }),
        ("inter_attention_euclidean", |rng| {
            let f = randn(rng, &[5, 4]);
            projected(rng, vec![f], &[5], |t, v| lift(attn::inter_attention_euclidean(t, v[0])))
        }),
        ("relation_embed", |rng| {
            let mut inputs = vec![randn(rng, &[4, 3])];
            inputs.extend(relation_params(rng, 3, 6, 5));
            projected(rng, inputs, &[16, 5], |t, v| lift(attn::relation_embed(t, v[0], relation_vars(v))))
        }),
        ("inter_attention_rn", |rng| {
            let mut inputs = vec![randn(rng, &[4, 3])];
            inputs.extend(relation_params(rng, 3, 6, 5));
            projected(rng, inputs, &[4], |t, v| Ok(lift(attn::inter_attention_rn(t, v[0], relation_vars(v)))?.0))
        }),
        ("combine", |rng| {
            let (w, v) = (positive(rng, &[5]), positive(rng, &[5]));
            projected(rng, vec![w, v], &[5], |t, x| lift(attn::combine(t, x[0], x[1])))
        }),
        ("temporal_fuse", |rng| {
            let (maps, a) = (randn(rng, &[4, 3, 2, 2]), positive(rng, &[4]));
            projected(rng, vec![maps, a], &[3, 2, 2], |t, v| lift(attn::temporal_fuse(t, v[0], v[1])))
        }),
        ("semantic_attention", |rng| {
            let (g, w, b) = (randn(rng, &[4, 6]), randn(rng, &[6, 4]), randn(rng, &[4]));
            projected(rng, vec![g, w, b], &[4], |t, v| lift(pipeline::semantic_attention(t, v[0], v[1], v[2])))
        }),
        ("triplet_loss", |rng| {
            let e = randn(rng, &[8, 5]);
            Instance {
                inputs: vec![e],
                build: Box::new(|t, v| lift(triplet_loss(t, v[0], &[0, 0, 1, 1, 2, 2, 3, 3], 0.3))),
            }
        }),
        ("batch_loss", |rng| {
            let (e, w, b) = (randn(rng, &[8, 5]), randn(rng, &[5, 4]), randn(rng, &[4]));
            Instance {
                inputs: vec![e, w, b],
                build: Box::new(|t, v| {
                    let cfg = LossConfig {
                        ce_weight: 1.0,
                        triplet_weight: 1.0,
                        margin: 0.3,
                    };
                    Ok(lift(batch_loss(t, v[0], &[0, 0, 1, 1, 2, 2, 3, 3], Some((v[1], v[2])), &cfg))?.total)
                }),
            }
        }),
    ]
}

fn relation_params<R: Rng>(rng: &mut R, d_f: usize, hidden: usize, d_r: usize) -> Vec<Tensor> {
    vec![
        randn(rng, &[2 * d_f, hidden]),
        randn(rng, &[hidden]),
        randn(rng, &[hidden, d_r]),
        randn(rng, &[d_r]),
        randn(rng, &[d_r, 1]),
        positive(rng, &[1]),
    ]
}

fn relation_vars(v: &[Var]) -> RelationVars {
    RelationVars {
        p1_weight: v[1],
        p1_bias: v[2],
        p2_weight: v[3],
        p2_bias: v[4],
        theta_weight: v[5],
        theta_bias: v[6],
    }
}

/// Variants whose union touches every trainable parameter and every
/// attention mode.
pub fn pipeline_variants() -> Vec<Variant> {
    let v = |fusion, attention| Variant { fusion, attention };
    vec![
        Variant::FULL,
        v(FusionMode::MsAverage, AttentionMode::IntraInterEuclid),
        v(FusionMode::LateFusion, AttentionMode::InterRn),
        v(FusionMode::EarlyFusion, AttentionMode::Intra),
        v(FusionMode::LateFusion, AttentionMode::AvgPool),
        Variant::FEATURE_AVERAGE,
    ]
}

/// Parameter gradients of `Σ g_fused ⊙ r` for one random tracklet.
fn pipeline_case(model: &Model, variant: Variant, frames: usize, seed: u64, probes: usize) -> Result<ProbeReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let [c, h, w] = model.config.backbone.input_shape();
    let data = (0..frames * c * h * w).map(|_| rng.random::<f64>() - PIXEL_MEAN).collect();
    let x = Tensor::new([frames, c, h, w], data)?;
    let r = randn(&mut rng, &[model.config.backbone.embed_dim]);

    let mut probe = Tape::new();
    let xv = probe.constant(x.clone());
    pipeline::forward(&mut probe, model, xv, variant)?;
    let names: Vec<String> = probe.bound_params().keys().cloned().collect();
    let inputs: Vec<Tensor> = names
        .iter()
        .map(|n| model.params.get(n).expect("bound from the store").clone())
        .collect();

    let report = check_gradients(
        &inputs,
        |tape, vars| {
            for (name, &v) in names.iter().zip(vars) {
                tape.bind(name, v);
            }
            let xv = tape.constant(x.clone());
            let g = lift(pipeline::forward(tape, model, xv, variant))?.g_fused;
            project(tape, g, &r)
        },
        probes,
        &mut rng,
    )?;
    Ok(report)
}

fn case_rng(seed: u64, case: usize, instance: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((case as u64) << 32) | instance);
    rng
}

/// Runs every case. Op and module cases use [`SEEDS_PER_OP`] random
/// instances with every coordinate probed; the pipeline cases probe
/// [`PIPELINE_PROBES`] coordinates of each parameter tensor of a model
/// built from `cfg`.
pub fn run_gradcheck(cfg: &RunConfig, seed: u64) -> Result<GradcheckReport> {
    cfg.validate()?;
    let start = Instant::now();
    let mut cases = Vec::new();
    for (index, (name, make)) in op_cases().into_iter().chain(module_cases()).enumerate() {
        let mut report = ProbeReport::default();
        for instance in 0..SEEDS_PER_OP {
            let mut rng = case_rng(seed, index, instance);
            let inst = make(&mut rng);
            report.merge(check_gradients(&inst.inputs, &inst.build, usize::MAX, &mut rng)?);
        }
        cases.push(CaseResult {
            name: name.to_string(),
            report,
        });
    }

    let mut model = Model::init(cfg.model_config(), seed)?;
    perturb_heads(&mut model, seed);
    let frames = 3;
    for (k, variant) in pipeline_variants().into_iter().enumerate() {
        let mut report = ProbeReport::default();
        for i in 0..PIPELINE_SEEDS {
            let case_seed = seed.wrapping_add(1 + 100 * k as u64 + i);
            report.merge(pipeline_case(&model, variant, frames, case_seed, PIPELINE_PROBES)?);
        }
        cases.push(CaseResult {
            name: format!("pipeline {variant}"),
            report,
        });
    }
    Ok(GradcheckReport {
        cases,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Gives attention heads and the semantic classifier non-trivial weights so
/// their gradients are not vanishingly small at the probe point.
fn perturb_heads(model: &mut Model, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let names: Vec<String> = model
        .params
        .names()
        .filter(|n| n.contains(".intra.") || n.starts_with("semantic."))
        .map(str::to_string)
        .collect();
    for name in names {
        let t = model.params.get_mut(&name).expect("listed");
        let scale = 0.5 / (t.shape()[0] as f64).sqrt();
        for v in t.data_mut() {
            *v = scale * Distribution::<f64>::sample(&StandardNormal, &mut rng);
        }
    }
}

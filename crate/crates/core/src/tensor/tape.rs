use std::collections::BTreeMap;

use super::kernels::{col2im, gemm, im2col, ConvGeom};
use super::{axis_extents, ParamStore, Result, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Unary {
    Relu,
    Sigmoid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Reduce {
    Sum,
    Mean,
    Max,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
    },
    Conv2d {
        x: Var,
        kernel: Var,
        bias: Option<Var>,
        geom: ConvGeom,
        batch: usize,
        cols: Vec<f64>,
    },
    AvgPool2 {
        x: Var,
    },
    AddBias {
        x: Var,
        bias: Var,
    },
    Unary {
        x: Var,
        kind: Unary,
    },
    Binary {
        a: Var,
        b: Var,
        kind: Binary,
    },
    Scale {
        x: Var,
        factor: f64,
    },
    Reduce {
        x: Var,
        kind: Reduce,
        axis: usize,
        argmax: Vec<usize>,
    },
    ReduceAll {
        x: Var,
        kind: Reduce,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    Concat {
        a: Var,
        b: Var,
        axis: usize,
    },
    IndexSelect {
        x: Var,
        index: Vec<usize>,
    },
    Reshape {
        x: Var,
    },
    RowNorm {
        x: Var,
    },
    Normalize {
        x: Var,
        fallback: bool,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    WeightedSum {
        weights: Var,
        x: Var,
    },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul { a, b } | Op::Binary { a, b, .. } | Op::Concat { a, b, .. } => vec![*a, *b],
            Op::WeightedSum { weights, x } => vec![*weights, *x],
            Op::Conv2d { x, kernel, bias, .. } => {
                let mut v = vec![*x, *kernel];
                v.extend(bias);
                v
            }
            Op::AddBias { x, bias } => vec![*x, *bias],
            Op::AvgPool2 { x }
            | Op::Unary { x, .. }
            | Op::Scale { x, .. }
            | Op::Reduce { x, .. }
            | Op::ReduceAll { x, .. }
            | Op::Softmax { x, .. }
            | Op::IndexSelect { x, .. }
            | Op::Reshape { x }
            | Op::RowNorm { x }
            | Op::Normalize { x, .. } => vec![*x],
            Op::CrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only record of a forward computation.
///
/// Every op checks its operands, appends one node and returns its [`Var`].
/// Inputs always precede their consumers, so a reverse sweep is a valid
/// topological order. A tape is single-writer; independent tracklets get
/// independent tapes.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: BTreeMap<String, Var>,
}

/// Gradients of every differentiable leaf, keyed by tape position.
#[derive(Debug)]
pub struct Gradients {
    leaves: BTreeMap<usize, Tensor>,
    params: BTreeMap<String, Var>,
}

impl Gradients {
    /// Gradient for a differentiable leaf; `None` for untracked values.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.leaves.get(&v.0)
    }

    /// Gradient for a parameter bound with [`Tape::param`].
    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name).and_then(|v| self.leaves.get(&v.0))
    }

    pub fn into_named(mut self) -> BTreeMap<String, Tensor> {
        self.params
            .into_iter()
            .filter_map(|(name, v)| self.leaves.remove(&v.0).map(|g| (name, g)))
            .collect()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Records a leaf; it is differentiable iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let requires_grad = t.requires_grad();
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a non-differentiable leaf.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t.with_grad(false))
    }

    /// Binds a named parameter from `store`, once per tape. Later calls with
    /// the same name return the same [`Var`], so shared layers accumulate
    /// gradient from every use.
    pub fn param(&mut self, name: &str, store: &ParamStore) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let t = store
            .get(name)
            .ok_or_else(|| TensorError::UnknownParameter(name.to_string()))?;
        let v = self.leaf(t.clone().with_grad(true));
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    /// Makes later [`Tape::param`] lookups of `name` resolve to `v`.
    pub fn bind(&mut self, name: &str, v: Var) {
        self.params.insert(name.to_string(), v);
    }

    pub fn bound_params(&self) -> &BTreeMap<String, Var> {
        &self.params
    }

    /// Sign pattern of every ReLU input on the tape, in recording order.
    /// Two evaluations with equal signatures lie on the same linear piece of
    /// every ReLU.
    pub fn relu_signature(&self) -> Vec<bool> {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Unary { x, kind: Unary::Relu } => Some(x),
                _ => None,
            })
            .flat_map(|x| self.nodes[x.0].value.data().iter().map(|&v| v > 0.0))
            .collect()
    }

    fn push(&mut self, op_name: &'static str, shape: Vec<usize>, data: Vec<f64>, op: Op) -> Result<Var> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op: op_name });
        }
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value: Tensor::from_parts(shape, data),
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn mismatch(op: &'static str, lhs: &[usize], rhs: &[usize]) -> TensorError {
        TensorError::ShapeMismatch {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    // ── linear algebra ────────────────────────────────────────────────

    /// `[m×k] · [k×n] → [m×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Self::mismatch("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, &mut out, false);
        self.push("matmul", vec![m, n], out, Op::MatMul { a, b })
    }

    /// Zero-padded (pad 1) cross-correlation.
    ///
    /// `x` is `[C×H×W]` or a batch `[N×C×H×W]`; `kernel` is `[C'×C×kh×kw]`;
    /// `bias`, when given, is `[C']`.
    pub fn conv2d(&mut self, x: Var, kernel: Var, bias: Option<Var>, stride: usize) -> Result<Var> {
        const PAD: usize = 1;
        let sx = self.shape(x).to_vec();
        let sk = self.shape(kernel).to_vec();
        let (batch, c, h, w) = match sx[..] {
            [c, h, w] => (None, c, h, w),
            [n, c, h, w] => (Some(n), c, h, w),
            _ => return Err(Self::mismatch("conv2d", &sx, &sk)),
        };
        if sk.len() != 4 || sk[1] != c {
            return Err(Self::mismatch("conv2d", &sx, &sk));
        }
        if stride == 0 {
            return Err(TensorError::Invalid {
                op: "conv2d",
                msg: "stride must be positive".into(),
            });
        }
        let (co, kh, kw) = (sk[0], sk[2], sk[3]);
        if kh > h + 2 * PAD || kw > w + 2 * PAD {
            return Err(TensorError::Invalid {
                op: "conv2d",
                msg: format!("kernel {kh}×{kw} larger than padded input {}×{}", h + 2 * PAD, w + 2 * PAD),
            });
        }
        if let Some(b) = bias {
            if self.shape(b) != [co] {
                return Err(Self::mismatch("conv2d", self.shape(b), &[co]));
            }
        }
        let geom = ConvGeom {
            channels: c,
            height: h,
            width: w,
            kh,
            kw,
            stride,
            pad: PAD,
            out_h: (h + 2 * PAD - kh) / stride + 1,
            out_w: (w + 2 * PAD - kw) / stride + 1,
        };
        let n = batch.unwrap_or(1);
        let (patch, per) = (geom.patch_len(), geom.out_len());
        let cols_w = n * per;
        let mut cols = vec![0.0; patch * cols_w];
        let xd = self.value(x).data();
        for i in 0..n {
            im2col(&xd[i * c * h * w..(i + 1) * c * h * w], &geom, &mut cols, cols_w, i * per);
        }
        let mut tmp = vec![0.0; co * cols_w];
        gemm(co, patch, cols_w, self.value(kernel).data(), false, &cols, false, &mut tmp, false);
        let bias_data = bias.map(|b| self.value(b).data().to_vec());
        let mut out = vec![0.0; n * co * per];
        for i in 0..n {
            for o in 0..co {
                let src = &tmp[o * cols_w + i * per..][..per];
                let dst = &mut out[(i * co + o) * per..][..per];
                let b = bias_data.as_ref().map_or(0.0, |b| b[o]);
                for (d, s) in dst.iter_mut().zip(src) {
                    *d = s + b;
                }
            }
        }
        let shape = match batch {
            Some(n) => vec![n, co, geom.out_h, geom.out_w],
            None => vec![co, geom.out_h, geom.out_w],
        };
        self.push(
            "conv2d",
            shape,
            out,
            Op::Conv2d {
                x,
                kernel,
                bias,
                geom,
                batch: n,
                cols,
            },
        )
    }

    /// 2×2 average pooling with stride 2 over the two trailing axes.
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 || s[s.len() - 2] < 2 || s[s.len() - 1] < 2 {
            return Err(TensorError::Invalid {
                op: "avg_pool2",
                msg: format!("needs trailing spatial extent ≥ 2×2, got {s:?}"),
            });
        }
        let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
        let (oh, ow) = (h / 2, w / 2);
        let planes: usize = s[..s.len() - 2].iter().product();
        let xd = self.value(x).data();
        let mut out = vec![0.0; planes * oh * ow];
        for p in 0..planes {
            let src = &xd[p * h * w..];
            for y in 0..oh {
                for xx in 0..ow {
                    let i = 2 * y * w + 2 * xx;
                    out[(p * oh + y) * ow + xx] = 0.25 * (src[i] + src[i + 1] + src[i + w] + src[i + w + 1]);
                }
            }
        }
        let mut shape = s[..s.len() - 2].to_vec();
        shape.extend([oh, ow]);
        self.push("avg_pool2", shape, out, Op::AvgPool2 { x })
    }

    /// Adds `bias[n]` to every row of `x[… × n]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(bias));
        if sb.len() != 1 || sx.last() != Some(&sb[0]) {
            return Err(Self::mismatch("add_bias", sx, sb));
        }
        let n = sb[0];
        let b = self.value(bias).data();
        let out: Vec<f64> = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + b[i % n])
            .collect();
        let shape = sx.to_vec();
        self.push("add_bias", shape, out, Op::AddBias { x, bias })
    }

    // ── pointwise ─────────────────────────────────────────────────────

    fn unary(&mut self, x: Var, kind: Unary) -> Result<Var> {
        let f: fn(f64) -> f64 = match kind {
            Unary::Relu => |v| if v > 0.0 { v } else { 0.0 },
            Unary::Sigmoid => |v| {
                if v >= 0.0 {
                    1.0 / (1.0 + (-v).exp())
                } else {
                    let e = v.exp();
                    e / (1.0 + e)
                }
            },
        };
        let out = self.value(x).data().iter().map(|&v| f(v)).collect();
        let shape = self.shape(x).to_vec();
        let name = match kind {
            Unary::Relu => "relu",
            Unary::Sigmoid => "sigmoid",
        };
        self.push(name, shape, out, Op::Unary { x, kind })
    }

    /// `max(x, 0)`; the derivative at exactly 0 is taken as 0.
    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Relu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Sigmoid)
    }

    fn binary(&mut self, a: Var, b: Var, kind: Binary) -> Result<Var> {
        let name = match kind {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
        };
        if self.shape(a) != self.shape(b) {
            return Err(Self::mismatch(name, self.shape(a), self.shape(b)));
        }
        let f: fn(f64, f64) -> f64 = match kind {
            Binary::Add => |x, y| x + y,
            Binary::Sub => |x, y| x - y,
            Binary::Mul => |x, y| x * y,
        };
        let out = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        self.push(name, shape, out, Op::Binary { a, b, kind })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Mul)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let out = self.value(x).data().iter().map(|v| v * factor).collect();
        let shape = self.shape(x).to_vec();
        self.push("scale", shape, out, Op::Scale { x, factor })
    }

    // ── reductions ────────────────────────────────────────────────────

    fn reduce(&mut self, x: Var, axis: usize, kind: Reduce) -> Result<Var> {
        let name = match kind {
            Reduce::Sum => "sum",
            Reduce::Mean => "mean",
            Reduce::Max => "max",
        };
        let s = self.shape(x).to_vec();
        if axis >= s.len() {
            return Err(TensorError::AxisOutOfRange {
                op: name,
                axis,
                rank: s.len(),
            });
        }
        let (outer, n, inner) = axis_extents(&s, axis);
        if n == 0 {
            return Err(TensorError::EmptyAxis { op: name, axis });
        }
        let xd = self.value(x).data();
        let mut out = vec![0.0; outer * inner];
        let mut argmax = Vec::new();
        if kind == Reduce::Max {
            argmax = vec![0; outer * inner];
        }
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| xd[(o * n + k) * inner + i];
                let slot = o * inner + i;
                match kind {
                    Reduce::Sum | Reduce::Mean => {
                        let mut acc = 0.0;
                        for k in 0..n {
                            acc += at(k);
                        }
                        out[slot] = if kind == Reduce::Mean { acc / n as f64 } else { acc };
                    }
                    Reduce::Max => {
                        let mut best = 0;
                        for k in 1..n {
                            if at(k) > at(best) {
                                best = k;
                            }
                        }
                        argmax[slot] = best;
                        out[slot] = at(best);
                    }
                }
            }
        }
        let mut shape = s;
        shape.remove(axis);
        self.push(name, shape, out, Op::Reduce { x, kind, axis, argmax })
    }

    pub fn sum(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce(x, axis, Reduce::Sum)
    }

    pub fn mean(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce(x, axis, Reduce::Mean)
    }

    /// Maximum along `axis`; ties resolve (and route gradient) to the lowest index.
    pub fn max(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce(x, axis, Reduce::Max)
    }

    /// Sum of every element, as a rank-0 tensor.
    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let total = self.value(x).data().iter().sum();
        self.push("sum_all", vec![], vec![total], Op::ReduceAll { x, kind: Reduce::Sum })
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        if n == 0 {
            return Err(TensorError::EmptyAxis { op: "mean_all", axis: 0 });
        }
        let total: f64 = self.value(x).data().iter().sum();
        self.push(
            "mean_all",
            vec![],
            vec![total / n as f64],
            Op::ReduceAll { x, kind: Reduce::Mean },
        )
    }

    // ── normalisers ───────────────────────────────────────────────────

    /// Softmax along `axis`, stabilised by subtracting the running maximum.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() {
            return Err(TensorError::AxisOutOfRange {
                op: "softmax",
                axis,
                rank: s.len(),
            });
        }
        let (outer, n, inner) = axis_extents(&s, axis);
        if n == 0 {
            return Err(TensorError::EmptyAxis { op: "softmax", axis });
        }
        let xd = self.value(x).data();
        let mut out = vec![0.0; xd.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |k: usize| (o * n + k) * inner + i;
                let peak = (0..n).map(|k| xd[idx(k)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for k in 0..n {
                    let e = (xd[idx(k)] - peak).exp();
                    out[idx(k)] = e;
                    total += e;
                }
                for k in 0..n {
                    out[idx(k)] /= total;
                }
            }
        }
        self.push("softmax", s, out, Op::Softmax { x, axis })
    }

    /// Divides a non-negative vector by its total. A zero (or non-positive)
    /// total yields the uniform vector and blocks gradient.
    pub fn normalize(&mut self, x: Var) -> Result<Var> {
        let xd = self.value(x).data();
        let n = xd.len();
        if n == 0 {
            return Err(TensorError::EmptyAxis { op: "normalize", axis: 0 });
        }
        let total: f64 = xd.iter().sum();
        let fallback = total <= 0.0;
        let out = if fallback {
            vec![1.0 / n as f64; n]
        } else {
            xd.iter().map(|v| v / total).collect()
        };
        let shape = self.shape(x).to_vec();
        self.push("normalize", shape, out, Op::Normalize { x, fallback })
    }

    /// Euclidean norm over the last axis. The gradient at the zero vector is 0.
    pub fn row_norm(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let Some((&d, lead)) = s.split_last() else {
            return Err(TensorError::AxisOutOfRange {
                op: "row_norm",
                axis: 0,
                rank: 0,
            });
        };
        let out = if d == 0 {
            vec![0.0; lead.iter().product()]
        } else {
            self.value(x)
                .data()
                .chunks(d)
                .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
                .collect()
        };
        self.push("row_norm", lead.to_vec(), out, Op::RowNorm { x })
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `logits[n×c]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != targets.len() || s[0] == 0 {
            return Err(Self::mismatch("cross_entropy", &s, &[targets.len()]));
        }
        let (n, c) = (s[0], s[1]);
        if let Some(&t) = targets.iter().find(|&&t| t >= c) {
            return Err(TensorError::Invalid {
                op: "cross_entropy",
                msg: format!("target {t} out of range for {c} classes"),
            });
        }
        let xd = self.value(logits).data();
        let mut probs = vec![0.0; n * c];
        let mut nll = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            let row = &xd[r * c..(r + 1) * c];
            let peak = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let total: f64 = row.iter().map(|v| (v - peak).exp()).sum();
            let log_z = peak + total.ln();
            nll += log_z - row[t];
            for (p, v) in probs[r * c..(r + 1) * c].iter_mut().zip(row) {
                *p = (v - log_z).exp();
            }
        }
        self.push(
            "cross_entropy",
            vec![],
            vec![nll / n as f64],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        )
    }

    // ── structure ─────────────────────────────────────────────────────

    pub fn concat(&mut self, a: Var, b: Var, axis: usize) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != sb.len() {
            return Err(Self::mismatch("concat", &sa, &sb));
        }
        if axis >= sa.len() {
            return Err(TensorError::AxisOutOfRange {
                op: "concat",
                axis,
                rank: sa.len(),
            });
        }
        if sa.iter().zip(&sb).enumerate().any(|(i, (x, y))| i != axis && x != y) {
            return Err(Self::mismatch("concat", &sa, &sb));
        }
        let (outer, na, inner) = axis_extents(&sa, axis);
        let nb = sb[axis];
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(ad.len() + bd.len());
        for o in 0..outer {
            out.extend_from_slice(&ad[o * na * inner..(o + 1) * na * inner]);
            out.extend_from_slice(&bd[o * nb * inner..(o + 1) * nb * inner]);
        }
        let mut shape = sa;
        shape[axis] = na + nb;
        self.push("concat", shape, out, Op::Concat { a, b, axis })
    }

    /// Concatenates along a new leading axis: `k` tensors of shape `s` → `[k, s…]`.
    pub fn stack(&mut self, items: &[Var]) -> Result<Var> {
        let Some((&first, rest)) = items.split_first() else {
            return Err(TensorError::Invalid {
                op: "stack",
                msg: "nothing to stack".into(),
            });
        };
        let lift = |tape: &mut Tape, v: Var| {
            let mut s = vec![1];
            s.extend_from_slice(tape.shape(v));
            tape.reshape(v, s)
        };
        let mut acc = lift(self, first)?;
        for &v in rest {
            let next = lift(self, v)?;
            acc = self.concat(acc, next, 0)?;
        }
        Ok(acc)
    }

    /// Gathers entries of the leading axis: `[n, …] → [index.len(), …]`.
    pub fn index_select(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let Some((&n, rest)) = s.split_first() else {
            return Err(TensorError::AxisOutOfRange {
                op: "index_select",
                axis: 0,
                rank: 0,
            });
        };
        if let Some(&bad) = index.iter().find(|&&i| i >= n) {
            return Err(TensorError::Invalid {
                op: "index_select",
                msg: format!("index {bad} out of range for leading dimension {n}"),
            });
        }
        let stride: usize = rest.iter().product();
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(index.len() * stride);
        for &i in index {
            out.extend_from_slice(&xd[i * stride..(i + 1) * stride]);
        }
        let mut shape = vec![index.len()];
        shape.extend_from_slice(rest);
        self.push(
            "index_select",
            shape,
            out,
            Op::IndexSelect {
                x,
                index: index.to_vec(),
            },
        )
    }

    /// `Σ_i weights[i] · x[i]` over the leading axis of `x[n × …]`,
    /// accumulated in index order.
    pub fn weighted_sum(&mut self, weights: Var, x: Var) -> Result<Var> {
        let (sw, sx) = (self.shape(weights).to_vec(), self.shape(x).to_vec());
        if sw.len() != 1 || sx.first() != Some(&sw[0]) {
            return Err(Self::mismatch("weighted_sum", &sw, &sx));
        }
        let stride: usize = sx[1..].iter().product();
        let (wd, xd) = (self.value(weights).data(), self.value(x).data());
        let mut out = vec![0.0; stride];
        for (i, &w) in wd.iter().enumerate() {
            for (o, v) in out.iter_mut().zip(&xd[i * stride..(i + 1) * stride]) {
                *o += w * v;
            }
        }
        self.push("weighted_sum", sx[1..].to_vec(), out, Op::WeightedSum { weights, x })
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != self.value(x).numel() {
            return Err(Self::mismatch("reshape", self.shape(x), &shape));
        }
        let data = self.value(x).data().to_vec();
        self.push("reshape", shape, data, Op::Reshape { x })
    }

    // ── reverse sweep ─────────────────────────────────────────────────

    /// Reverse-mode sweep from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let t = self.value(loss);
        if t.numel() != 1 {
            return Err(TensorError::NotScalar(t.shape().to_vec()));
        }
        self.backward_with_seed(loss, &Tensor::full(t.shape().to_vec(), 1.0))
    }

    /// Vector-Jacobian product: propagates `seed` (shaped like `output`)
    /// back to every differentiable leaf.
    pub fn backward_with_seed(&self, output: Var, seed: &Tensor) -> Result<Gradients> {
        if seed.shape() != self.shape(output) {
            return Err(Self::mismatch("backward", seed.shape(), self.shape(output)));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=output.0).map(|_| None).collect();
        if self.nodes[output.0].requires_grad {
            grads[output.0] = Some(seed.data().to_vec());
        }
        for id in (0..=output.0).rev() {
            let node = &self.nodes[id];
            for input in node.op.inputs() {
                if input.0 >= id {
                    return Err(TensorError::Cycle { node: id, input: input.0 });
                }
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(id, &g, &mut grads);
        }
        let leaves = self.nodes[..=output.0]
            .iter()
            .enumerate()
            .filter(|(_, n)| n.requires_grad && matches!(n.op, Op::Leaf))
            .map(|(i, n)| {
                let data = grads[i].take().unwrap_or_else(|| vec![0.0; n.value.numel()]);
                (i, Tensor::from_parts(n.value.shape().to_vec(), data))
            })
            .collect();
        let params = self
            .params
            .iter()
            .filter(|(_, v)| v.0 <= output.0)
            .map(|(k, v)| (k.clone(), *v))
            .collect();
        Ok(Gradients { leaves, params })
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let n = self.nodes[v.0].value.numel();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn propagate(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if let Some(da) = self.slot(grads, *a) {
                    gemm(m, n, k, g, false, self.value(*b).data(), true, da, true);
                }
                if let Some(db) = self.slot(grads, *b) {
                    gemm(k, m, n, self.value(*a).data(), true, g, false, db, true);
                }
            }
            Op::Conv2d {
                x,
                kernel,
                bias,
                geom,
                batch,
                cols,
            } => {
                let (co, patch, per) = (self.shape(*kernel)[0], geom.patch_len(), geom.out_len());
                let cols_w = batch * per;
                let mut gp = vec![0.0; co * cols_w];
                for i in 0..*batch {
                    for o in 0..co {
                        gp[o * cols_w + i * per..][..per].copy_from_slice(&g[(i * co + o) * per..][..per]);
                    }
                }
                if let Some(dk) = self.slot(grads, *kernel) {
                    gemm(co, cols_w, patch, &gp, false, cols, true, dk, true);
                }
                if let Some(b) = bias {
                    if let Some(db) = self.slot(grads, *b) {
                        for (o, d) in db.iter_mut().enumerate() {
                            *d += gp[o * cols_w..(o + 1) * cols_w].iter().sum::<f64>();
                        }
                    }
                }
                if self.nodes[x.0].requires_grad {
                    let mut dcols = vec![0.0; patch * cols_w];
                    gemm(patch, co, cols_w, self.value(*kernel).data(), true, &gp, false, &mut dcols, false);
                    let img = geom.channels * geom.height * geom.width;
                    let dx = self.slot(grads, *x).expect("checked");
                    for i in 0..*batch {
                        col2im(&dcols, geom, &mut dx[i * img..(i + 1) * img], cols_w, i * per);
                    }
                }
            }
            Op::AvgPool2 { x } => {
                let s = self.shape(*x);
                let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
                let (oh, ow) = (h / 2, w / 2);
                if let Some(dx) = self.slot(grads, *x) {
                    for (o, &gv) in g.iter().enumerate() {
                        let (p, rem) = (o / (oh * ow), o % (oh * ow));
                        let (y, xx) = (rem / ow, rem % ow);
                        let i = p * h * w + 2 * y * w + 2 * xx;
                        for j in [i, i + 1, i + w, i + w + 1] {
                            dx[j] += 0.25 * gv;
                        }
                    }
                }
            }
            Op::AddBias { x, bias } => {
                if let Some(dx) = self.slot(grads, *x) {
                    dx.iter_mut().zip(g).for_each(|(d, v)| *d += v);
                }
                if let Some(db) = self.slot(grads, *bias) {
                    let n = db.len();
                    for (i, v) in g.iter().enumerate() {
                        db[i % n] += v;
                    }
                }
            }
            Op::Unary { x, kind } => {
                let xv = self.value(*x).data();
                if let Some(dx) = self.slot(grads, *x) {
                    for i in 0..dx.len() {
                        dx[i] += match kind {
                            Unary::Relu if xv[i] > 0.0 => g[i],
                            Unary::Relu => 0.0,
                            Unary::Sigmoid => g[i] * out[i] * (1.0 - out[i]),
                        };
                    }
                }
            }
            Op::Binary { a, b, kind } => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if let Some(da) = self.slot(grads, *a) {
                    for i in 0..da.len() {
                        da[i] += match kind {
                            Binary::Add | Binary::Sub => g[i],
                            Binary::Mul => g[i] * bv[i],
                        };
                    }
                }
                if let Some(db) = self.slot(grads, *b) {
                    for i in 0..db.len() {
                        db[i] += match kind {
                            Binary::Add => g[i],
                            Binary::Sub => -g[i],
                            Binary::Mul => g[i] * av[i],
                        };
                    }
                }
            }
            Op::Scale { x, factor } => {
                if let Some(dx) = self.slot(grads, *x) {
                    dx.iter_mut().zip(g).for_each(|(d, v)| *d += factor * v);
                }
            }
            Op::Reduce { x, kind, axis, argmax } => {
                let (outer, n, inner) = axis_extents(self.shape(*x), *axis);
                if let Some(dx) = self.slot(grads, *x) {
                    for o in 0..outer {
                        for i in 0..inner {
                            let gv = g[o * inner + i];
                            match kind {
                                Reduce::Sum | Reduce::Mean => {
                                    let scale = if *kind == Reduce::Mean { 1.0 / n as f64 } else { 1.0 };
                                    for k in 0..n {
                                        dx[(o * n + k) * inner + i] += gv * scale;
                                    }
                                }
                                Reduce::Max => {
                                    dx[(o * n + argmax[o * inner + i]) * inner + i] += gv;
                                }
                            }
                        }
                    }
                }
            }
            Op::ReduceAll { x, kind } => {
                if let Some(dx) = self.slot(grads, *x) {
                    let scale = if *kind == Reduce::Mean { 1.0 / dx.len() as f64 } else { 1.0 };
                    dx.iter_mut().for_each(|d| *d += g[0] * scale);
                }
            }
            Op::Softmax { x, axis } => {
                let (outer, n, inner) = axis_extents(self.shape(*x), *axis);
                if let Some(dx) = self.slot(grads, *x) {
                    for o in 0..outer {
                        for i in 0..inner {
                            let idx = |k: usize| (o * n + k) * inner + i;
                            let dot: f64 = (0..n).map(|k| g[idx(k)] * out[idx(k)]).sum();
                            for k in 0..n {
                                dx[idx(k)] += out[idx(k)] * (g[idx(k)] - dot);
                            }
                        }
                    }
                }
            }
            Op::Concat { a, b, axis } => {
                let (outer, na, inner) = axis_extents(self.shape(*a), *axis);
                let nb = self.shape(*b)[*axis];
                let block = (na + nb) * inner;
                if let Some(da) = self.slot(grads, *a) {
                    for o in 0..outer {
                        let src = &g[o * block..][..na * inner];
                        da[o * na * inner..][..na * inner]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(d, v)| *d += v);
                    }
                }
                if let Some(db) = self.slot(grads, *b) {
                    for o in 0..outer {
                        let src = &g[o * block + na * inner..][..nb * inner];
                        db[o * nb * inner..][..nb * inner]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(d, v)| *d += v);
                    }
                }
            }
            Op::IndexSelect { x, index } => {
                let stride: usize = self.shape(*x)[1..].iter().product();
                if let Some(dx) = self.slot(grads, *x) {
                    for (r, &i) in index.iter().enumerate() {
                        dx[i * stride..(i + 1) * stride]
                            .iter_mut()
                            .zip(&g[r * stride..(r + 1) * stride])
                            .for_each(|(d, v)| *d += v);
                    }
                }
            }
            Op::Reshape { x } => {
                if let Some(dx) = self.slot(grads, *x) {
                    dx.iter_mut().zip(g).for_each(|(d, v)| *d += v);
                }
            }
            Op::RowNorm { x } => {
                let d = *self.shape(*x).last().expect("rank ≥ 1");
                let xv = self.value(*x).data();
                if let Some(dx) = self.slot(grads, *x) {
                    if d > 0 {
                        for (r, (&norm, &gv)) in out.iter().zip(g).enumerate() {
                            if norm > 0.0 {
                                for j in 0..d {
                                    dx[r * d + j] += gv * xv[r * d + j] / norm;
                                }
                            }
                        }
                    }
                }
            }
            Op::Normalize { x, fallback } => {
                if *fallback {
                    return;
                }
                let total: f64 = self.value(*x).data().iter().sum();
                let dot: f64 = g.iter().zip(out).map(|(a, b)| a * b).sum();
                if let Some(dx) = self.slot(grads, *x) {
                    for (k, d) in dx.iter_mut().enumerate() {
                        *d += (g[k] - dot) / total;
                    }
                }
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let c = self.shape(*logits)[1];
                let n = targets.len() as f64;
                if let Some(dl) = self.slot(grads, *logits) {
                    for (r, &t) in targets.iter().enumerate() {
                        for j in 0..c {
                            let onehot = if j == t { 1.0 } else { 0.0 };
                            dl[r * c + j] += g[0] * (probs[r * c + j] - onehot) / n;
                        }
                    }
                }
            }
            Op::WeightedSum { weights, x } => {
                let stride = g.len();
                let (wd, xd) = (self.value(*weights).data(), self.value(*x).data());
                if let Some(dw) = self.slot(grads, *weights) {
                    for (i, d) in dw.iter_mut().enumerate() {
                        *d += xd[i * stride..(i + 1) * stride].iter().zip(g).map(|(a, b)| a * b).sum::<f64>();
                    }
                }
                if let Some(dx) = self.slot(grads, *x) {
                    for (i, &w) in wd.iter().enumerate() {
                        for (d, v) in dx[i * stride..(i + 1) * stride].iter_mut().zip(g) {
                            *d += w * v;
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_orthogonal() {
        let mut tape = Tape::new();
        let eye = tape.leaf(t(&[2, 2], &[1., 0., 0., 1.]));
        let m = tape.leaf(t(&[2, 2], &[1., 2., 3., 4.]));
        let p = tape.matmul(eye, m).unwrap();
        assert_eq!(tape.value(p).data(), &[1., 2., 3., 4.]);

        let row = tape.leaf(t(&[1, 2], &[1., 0.]));
        let col = tape.leaf(t(&[2, 1], &[0., 1.]));
        let z = tape.matmul(row, col).unwrap();
        assert_eq!(tape.value(z).shape(), &[1, 1]);
        assert_eq!(tape.value(z).data(), &[0.]);

        assert!(matches!(
            tape.matmul(row, row),
            Err(TensorError::ShapeMismatch { op: "matmul", .. })
        ));
    }

    #[test]
    fn relu_sigmoid_values() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[3], &[-1., 0., 2.]));
        let r = tape.relu(x).unwrap();
        assert_eq!(tape.value(r).data(), &[0., 0., 2.]);
        let z = tape.leaf(Tensor::scalar(0.0));
        let s = tape.sigmoid(z).unwrap();
        assert_eq!(tape.value(s).item().unwrap(), 0.5);
    }

    #[test]
    fn relu_gradient_at_zero_is_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[3], &[-1., 0., 2.]).with_grad(true));
        let r = tape.relu(x).unwrap();
        let s = tape.sum_all(r).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(x).unwrap().data(), &[0., 0., 1.]);
    }

    #[test]
    fn reductions() {
        let mut tape = Tape::new();
        let v = tape.leaf(t(&[2], &[2., 4.]));
        let m = tape.mean(v, 0).unwrap();
        assert_eq!(tape.value(m).item().unwrap(), 3.0);
        let ones = tape.leaf(Tensor::ones([3, 2]));
        let s = tape.sum(ones, 0).unwrap();
        assert_eq!(tape.value(s).data(), &[3., 3.]);
        let empty = tape.leaf(Tensor::zeros([2, 0]));
        assert!(matches!(tape.mean(empty, 1), Err(TensorError::EmptyAxis { .. })));
        assert!(matches!(tape.sum(ones, 2), Err(TensorError::AxisOutOfRange { .. })));
    }

    #[test]
    fn max_ties_route_to_lowest_index() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[4], &[1., 3., 3., 0.]).with_grad(true));
        let m = tape.max(x, 0).unwrap();
        assert_eq!(tape.value(m).item().unwrap(), 3.0);
        let g = tape.backward(m).unwrap();
        assert_eq!(g.wrt(x).unwrap().data(), &[0., 1., 0., 0.]);
    }

    #[test]
    fn softmax_cases() {
        let mut tape = Tape::new();
        let z = tape.leaf(Tensor::zeros([3]));
        let s = tape.softmax(z, 0).unwrap();
        for &p in tape.value(s).data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
        let one = tape.leaf(t(&[1], &[42.0]));
        let s1 = tape.softmax(one, 0).unwrap();
        assert_eq!(tape.value(s1).data(), &[1.0]);

        // softmax([1000, 999]) = [1/(1+e^-1), e^-1/(1+e^-1)], evaluated in log space.
        let big = tape.leaf(t(&[2], &[1000., 999.]));
        let sb = tape.softmax(big, 0).unwrap();
        let p = tape.value(sb).data();
        let e = (-1.0f64).exp();
        assert!((p[0] - 1.0 / (1.0 + e)).abs() < 1e-15);
        assert!((p[1] - e / (1.0 + e)).abs() < 1e-15);
        assert!((p[0] + p[1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn concat_cases() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[1], &[1.]));
        let b = tape.leaf(t(&[1], &[2.]));
        let c = tape.concat(a, b, 0).unwrap();
        assert_eq!(tape.value(c).data(), &[1., 2.]);

        let x = tape.leaf(t(&[3], &[4., 5., 6.]));
        let e = tape.leaf(Tensor::zeros([0]));
        let xe = tape.concat(x, e, 0).unwrap();
        assert_eq!(tape.value(xe), tape.value(x));

        let m = tape.leaf(Tensor::zeros([2, 3]));
        let n = tape.leaf(Tensor::zeros([3, 3]));
        assert!(tape.concat(m, n, 1).is_err());
        let mn = tape.concat(m, n, 0).unwrap();
        assert_eq!(tape.shape(mn), &[5, 3]);
    }

    #[test]
    fn conv_zero_and_delta_kernels() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1, 3, 3], &[1., 2., 3., 4., 5., 6., 7., 8., 9.]));
        let zero = tape.leaf(Tensor::zeros([2, 1, 3, 3]));
        let y = tape.conv2d(x, zero, None, 1).unwrap();
        assert_eq!(tape.shape(y), &[2, 3, 3]);
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));

        let mut delta = vec![0.0; 9];
        delta[4] = 1.0;
        let k = tape.leaf(t(&[1, 1, 3, 3], &delta));
        let y = tape.conv2d(x, k, None, 1).unwrap();
        assert_eq!(tape.value(y), tape.value(x));

        let tiny = tape.leaf(Tensor::zeros([1, 1, 1]));
        let wide = tape.leaf(Tensor::zeros([1, 1, 5, 5]));
        assert!(matches!(tape.conv2d(tiny, wide, None, 1), Err(TensorError::Invalid { .. })));
    }

    #[test]
    fn backward_basics() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new([2, 2], vec![1., -2., 3., 0.5]).unwrap().with_grad(true));
        let unused = tape.leaf(Tensor::ones([3]).with_grad(true));
        let s = tape.sum_all(x).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(x).unwrap().data(), &[1.; 4]);
        assert_eq!(g.wrt(unused).unwrap().data(), &[0.; 3]);
        assert!(matches!(tape.backward(x), Err(TensorError::NotScalar(_))));
    }

    #[test]
    fn value_used_twice_sums_contributions() {
        // f = sum(x*x) uses x twice: gradient 2x = grad via a + grad via b.
        let data = [0.3, -1.2, 2.0];
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[3], &data).with_grad(true));
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum_all(sq).unwrap();
        let both = tape.backward(s).unwrap().wrt(x).unwrap().clone();

        let mut single = vec![0.0; 3];
        for _ in 0..2 {
            let mut tape = Tape::new();
            let x = tape.leaf(t(&[3], &data).with_grad(true));
            let c = tape.constant(t(&[3], &data));
            let p = tape.mul(x, c).unwrap();
            let s = tape.sum_all(p).unwrap();
            let g = tape.backward(s).unwrap();
            for (acc, v) in single.iter_mut().zip(g.wrt(x).unwrap().data()) {
                *acc += v;
            }
        }
        assert_eq!(both.data(), &single[..]);
    }

    #[test]
    fn normalize_fallback_is_uniform() {
        let mut tape = Tape::new();
        let z = tape.leaf(Tensor::zeros([4]).with_grad(true));
        let n = tape.normalize(z).unwrap();
        assert_eq!(tape.value(n).data(), &[0.25; 4]);
        let s = tape.sum_all(n).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(z).unwrap().data(), &[0.0; 4]);
    }

    #[test]
    fn params_bind_once() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::ones([2]));
        let mut tape = Tape::new();
        let a = tape.param("w", &store).unwrap();
        let b = tape.param("w", &store).unwrap();
        assert_eq!(a, b);
        assert!(matches!(tape.param("nope", &store), Err(TensorError::UnknownParameter(_))));
        let p = tape.mul(a, b).unwrap();
        let s = tape.sum_all(p).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.param("w").unwrap().data(), &[2.0, 2.0]);
    }

    #[test]
    fn non_finite_outputs_are_errors() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1], &[1e300]));
        let y = tape.mul(x, x);
        assert!(matches!(y, Err(TensorError::NonFinite { op: "mul" })));
    }
}

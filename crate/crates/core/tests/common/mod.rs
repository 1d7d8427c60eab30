//! Loop-based reference implementations shared by the integration tests.
//! None of these touch the tape.

#![allow(dead_code)]

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use tracklet_fusion::tensor::Tensor;
use tracklet_fusion::temporal_attention::RelationNetwork;

pub fn randn<R: Rng>(rng: &mut R, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| StandardNormal.sample(rng)).collect()).unwrap()
}

pub fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    let n = t.shape()[0];
    let d = t.numel() / n.max(1);
    (0..n).map(|i| t.data()[i * d..(i + 1) * d].to_vec()).collect()
}

fn dense(x: &[f64], w: &Tensor, b: &Tensor) -> Vec<f64> {
    let (k, n) = (w.shape()[0], w.shape()[1]);
    assert_eq!(x.len(), k);
    (0..n)
        .map(|j| {
            let mut acc = b.data()[j];
            for i in 0..k {
                acc += x[i] * w.data()[i * n + j];
            }
            acc
        })
        .collect()
}

pub fn pair_mlp(rn: &RelationNetwork, a: &[f64], b: &[f64]) -> Vec<f64> {
    let x: Vec<f64> = a.iter().chain(b).copied().collect();
    let h: Vec<f64> = dense(&x, &rn.p1_weight, &rn.p1_bias).into_iter().map(|v| v.max(0.0)).collect();
    dense(&h, &rn.p2_weight, &rn.p2_bias)
}

/// `r_ij = P([f_i, f_j]) + P([f_j, f_i])`.
pub fn relation_oracle(f: &[Vec<f64>], rn: &RelationNetwork) -> Vec<Vec<Vec<f64>>> {
    f.iter()
        .map(|fi| {
            f.iter()
                .map(|fj| {
                    let (p, q) = (pair_mlp(rn, fi, fj), pair_mlp(rn, fj, fi));
                    p.iter().zip(&q).map(|(x, y)| x + y).collect()
                })
                .collect()
        })
        .collect()
}

/// `v_i = 1/(L−1) Σ_{j≠i} ReLU(θ · r_ij + b)` by double loop.
pub fn rn_attention_oracle(f: &[Vec<f64>], rn: &RelationNetwork) -> Vec<f64> {
    let r = relation_oracle(f, rn);
    let l = f.len();
    (0..l)
        .map(|i| {
            let mut total = 0.0;
            for j in 0..l {
                if j != i {
                    let s = dense(&r[i][j], &rn.theta_weight, &rn.theta_bias)[0];
                    total += s.max(0.0);
                }
            }
            total / (l - 1) as f64
        })
        .collect()
}

/// `v_i = 1/L Σ_j ‖f_i − f_j‖`.
pub fn euclidean_oracle(f: &[Vec<f64>]) -> Vec<f64> {
    let l = f.len() as f64;
    f.iter()
        .map(|fi| {
            f.iter()
                .map(|fj| fi.iter().zip(fj).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
                .sum::<f64>()
                / l
        })
        .collect()
}

/// `u_j = 1/K Σ_i softmax(g_i B + b)_j`.
pub fn semantic_oracle(g: &[Vec<f64>], w: &Tensor, b: &Tensor) -> Vec<f64> {
    let k = w.shape()[1];
    let mut u = vec![0.0; k];
    for gi in g {
        let logits = dense(gi, w, b);
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logits.iter().map(|z| (z - m).exp()).collect();
        let z: f64 = e.iter().sum();
        for j in 0..k {
            u[j] += e[j] / z;
        }
    }
    u.iter().map(|x| x / g.len() as f64).collect()
}

/// Exhaustive retrieval metrics: `(cmc at ranks, mAP, valid queries)`.
/// Gallery entries sharing identity and camera with the query are dropped;
/// equal distances keep gallery order.
pub fn retrieval_oracle(
    dist: &[Vec<f64>],
    q_ids: &[u32],
    q_cams: &[u32],
    g_ids: &[u32],
    g_cams: &[u32],
    ranks: &[usize],
) -> (Vec<f64>, f64, usize) {
    let mut hits_at = vec![0usize; ranks.len()];
    let mut ap_sum = 0.0;
    let mut valid = 0;
    for qi in 0..dist.len() {
        let kept: Vec<usize> = (0..g_ids.len())
            .filter(|&j| !(g_ids[j] == q_ids[qi] && g_cams[j] == q_cams[qi]))
            .collect();
        // Position of each kept entry = number of kept entries ordered before it.
        let position = |j: usize| {
            kept.iter()
                .filter(|&&o| dist[qi][o] < dist[qi][j] || (dist[qi][o] == dist[qi][j] && o < j))
                .count()
        };
        let mut positions: Vec<usize> = kept.iter().filter(|&&j| g_ids[j] == q_ids[qi]).map(|&j| position(j)).collect();
        if positions.is_empty() {
            continue;
        }
        valid += 1;
        positions.sort_unstable();
        for (r, &k) in ranks.iter().enumerate() {
            if positions[0] < k {
                hits_at[r] += 1;
            }
        }
        let ap: f64 = positions
            .iter()
            .enumerate()
            .map(|(n, &p)| (n + 1) as f64 / (p + 1) as f64)
            .sum::<f64>()
            / positions.len() as f64;
        ap_sum += ap;
    }
    let cmc = hits_at.iter().map(|&h| h as f64 / valid.max(1) as f64).collect();
    (cmc, ap_sum / valid.max(1) as f64, valid)
}

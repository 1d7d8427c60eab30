mod common;

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{euclidean_oracle, randn, relation_oracle, rn_attention_oracle, rows, semantic_oracle};
use tracklet_fusion::data::{export_manifest, generate, load_manifest, SyntheticConfig};
use tracklet_fusion::semantic_fusion::{semantic_attention, semantic_fuse, SemanticClassifier};
use tracklet_fusion::tensor::{ParamStore, Tape, Tensor};
use tracklet_fusion::temporal_attention::{inter_attention_euclidean, inter_attention_rn, relation_embed, RelationNetwork};
use tracklet_fusion::training::{triplet_loss, Sgd};

#[test]
fn relation_attention_matches_double_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for trial in 0..30 {
        let l = 2 + trial % 6;
        let d = 1 + trial % 4;
        let f = randn(&mut rng, &[l, d]);
        let mut rn = RelationNetwork::random(d, 7, 5, 0.8, &mut rng);
        rn.theta_bias = Tensor::vector(vec![0.3]).unwrap();
        let (v, _) = inter_attention_rn(&f, &rn).unwrap();
        let want = rn_attention_oracle(&rows(&f), &rn);
        for i in 0..l {
            assert!((v.data()[i] - want[i]).abs() < 1e-10, "trial {trial}: {} vs {}", v.data()[i], want[i]);
        }
        let r = relation_embed(&f, &rn).unwrap();
        let r_ref = relation_oracle(&rows(&f), &rn);
        for i in 0..l {
            for j in 0..l {
                for c in 0..5 {
                    assert!((r.at(&[i, j, c]) - r_ref[i][j][c]).abs() < 1e-10);
                }
            }
        }
    }
}

#[test]
fn euclidean_attention_matches_double_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for l in 2..10 {
        let f = randn(&mut rng, &[l, 6]);
        let v = inter_attention_euclidean(&f).unwrap();
        for (got, want) in v.data().iter().zip(euclidean_oracle(&rows(&f))) {
            assert!((got - want).abs() < 1e-12);
        }
    }
}

#[test]
fn semantic_weights_match_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for k in 1..6 {
        let g = randn(&mut rng, &[k, 9]);
        let cls = SemanticClassifier {
            weight: randn(&mut rng, &[9, k]),
            bias: randn(&mut rng, &[k]),
        };
        let u = semantic_attention(&g, &cls).unwrap();
        let want = semantic_oracle(&rows(&g), &cls.weight, &cls.bias);
        for (a, b) in u.data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-10);
        }
        assert!((u.data().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let fused = semantic_fuse(&g, &u).unwrap();
        for c in 0..9 {
            let want: f64 = (0..k).map(|j| u.data()[j] * g.at(&[j, c])).sum();
            assert!((fused.data()[c] - want).abs() < 1e-12);
        }
    }
}

#[test]
fn batch_hard_triplet_matches_exhaustive_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..40 {
        let n = 8;
        let labels: Vec<usize> = (0..n).map(|i| i / 2 % 3).collect();
        let emb = randn(&mut rng, &[n, 4]);
        let x = rows(&emb);
        let d = |i: usize, j: usize| x[i].iter().zip(&x[j]).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        // Every (a, p, n) triplet; the batch-hard term keeps the worst one per anchor.
        let mut worst: BTreeMap<usize, f64> = BTreeMap::new();
        for a in 0..n {
            for p in (0..n).filter(|&p| p != a && labels[p] == labels[a]) {
                for q in (0..n).filter(|&q| labels[q] != labels[a]) {
                    let gap = d(a, p) - d(a, q);
                    let e = worst.entry(a).or_insert(f64::NEG_INFINITY);
                    *e = e.max(gap);
                }
            }
        }
        let want = worst.values().map(|g| (g + 0.3).max(0.0)).sum::<f64>() / worst.len() as f64;
        let mut tape = Tape::new();
        let e = tape.constant(emb);
        let loss = triplet_loss(&mut tape, e, &labels, 0.3).unwrap();
        assert!((tape.value(loss).item().unwrap() - want).abs() < 1e-12);
    }
}

#[test]
fn momentum_recursion_unrolled() {
    let (mu, lam, lr) = (0.9, 0.01, 0.1);
    let p0 = 1.5;
    let gs = [0.4, -0.2, 0.7];
    let mut params = ParamStore::new();
    params.insert("p", Tensor::vector(vec![p0]).unwrap());
    let mut opt = Sgd::new(mu, lam);
    for g in gs {
        let grads = BTreeMap::from([("p".to_string(), Tensor::vector(vec![g]).unwrap())]);
        opt.step(&mut params, &grads, lr).unwrap();
    }
    let v1 = gs[0] + lam * p0;
    let p1 = p0 - lr * v1;
    let v2 = mu * v1 + gs[1] + lam * p1;
    let p2 = p1 - lr * v2;
    let v3 = mu * v2 + gs[2] + lam * p2;
    let p3 = p2 - lr * v3;
    assert_eq!(params.get("p").unwrap().data()[0], p3);
}

#[test]
fn manifest_round_trip_within_quantization() {
    let cfg = SyntheticConfig {
        num_identities: 3,
        tracklets_per_identity: 2,
        frames_per_tracklet: 3,
        ..SyntheticConfig::default()
    };
    let dataset = generate(&cfg, 5).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let manifest = export_manifest(&dataset, dir.path()).unwrap();
    let back = load_manifest(&manifest, [cfg.channels, cfg.height, cfg.width]).unwrap();
    assert_eq!(back.len(), dataset.len());
    for (a, b) in dataset.tracklets.iter().zip(&back.tracklets) {
        assert_eq!((&a.id, a.identity, a.camera), (&b.id, b.identity, b.camera));
        assert_eq!(a.frames.shape(), b.frames.shape());
        assert!(a.frames.max_abs_diff(&b.frames) <= 1.0 / 255.0 + 1e-12);
    }
}

#[test]
fn manifest_edge_cases() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty.tsv");
    std::fs::write(&empty, "").unwrap();
    assert!(load_manifest(&empty, [3, 32, 16]).unwrap().is_empty());

    let cfg = SyntheticConfig {
        num_identities: 2,
        tracklets_per_identity: 2,
        frames_per_tracklet: 1,
        ..SyntheticConfig::default()
    };
    let manifest = export_manifest(&generate(&cfg, 0).unwrap(), dir.path()).unwrap();
    let first_line = std::fs::read_to_string(&manifest).unwrap().lines().next().unwrap().to_string();
    let one = dir.path().join("one.tsv");
    std::fs::write(&one, format!("{first_line}\n")).unwrap();
    let ds = load_manifest(&one, [3, 32, 16]).unwrap();
    assert_eq!(ds.len(), 1);
    assert_eq!(ds.tracklets[0].len(), 1);

    let bad = dir.path().join("bad.tsv");
    std::fs::write(&bad, format!("{first_line}\nbroken line\n")).unwrap();
    let err = load_manifest(&bad, [3, 32, 16]).unwrap_err().to_string();
    assert!(err.contains("bad.tsv:2:"), "{err}");
    assert!(load_manifest(&dir.path().join("missing.tsv"), [3, 32, 16]).is_err());
}

#[test]
fn duplicate_flags_are_consistent() {
    let cfg = SyntheticConfig {
        duplicate_run_prob: 0.6,
        ..SyntheticConfig::default()
    };
    let ds = generate(&cfg, 9).unwrap();
    let n = cfg.channels * cfg.height * cfg.width;
    let mut dups = 0;
    for t in &ds.tracklets {
        assert_eq!(t.flags.len(), t.len());
        for i in 1..t.len() {
            if t.flags[i].kind == tracklet_fusion::data::FrameKind::Duplicate {
                dups += 1;
                let d = t.frames.data()[i * n..(i + 1) * n]
                    .iter()
                    .zip(&t.frames.data()[(i - 1) * n..i * n])
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max);
                assert!(d < cfg.duplicate_sigma);
            }
        }
    }
    assert!(dups > 0);
}

#[test]
fn one_distinct_frame_when_every_run_spans_the_tracklet() {
    let cfg = SyntheticConfig {
        num_identities: 4,
        frames_per_tracklet: 6,
        duplicate_run_prob: 1.0,
        duplicate_run_length: 5,
        ..SyntheticConfig::default()
    };
    for t in &generate(&cfg, 2).unwrap().tracklets {
        let distinct = t.flags.iter().filter(|f| f.kind == tracklet_fusion::data::FrameKind::Distinct).count();
        assert_eq!(distinct, 1);
    }
}

#[test]
fn noise_free_two_view_tracklets_are_constant() {
    let cfg = SyntheticConfig {
        num_identities: 3,
        num_views: 2,
        num_cameras: 2,
        noise_sigma: 0.0,
        duplicate_run_prob: 0.0,
        occlusion_prob: 0.0,
        ..SyntheticConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for t in &generate(&cfg, rng.random()).unwrap().tracklets {
        let n = t.frames.numel() / t.len();
        for i in 1..t.len() {
            assert_eq!(t.frames.data()[i * n..(i + 1) * n], t.frames.data()[..n]);
        }
    }
}

mod common;

use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use common::{randn, retrieval_oracle};
use tracklet_fusion::data::{generate, split, SyntheticConfig};
use tracklet_fusion::eval::{cmc, mean_average_precision, Labels};
use tracklet_fusion::tensor::{ParamStore, Tape, Tensor};
use tracklet_fusion::temporal_attention::{
    combine_and_normalize, inter_attention_euclidean, inter_attention_rn, intra_attention, relation_embed, temporal_fuse,
    IntraAttentionHead, RelationNetwork,
};
use tracklet_fusion::training::{learning_rate, triplet_loss};

fn permute_rows(t: &Tensor, perm: &[usize]) -> Tensor {
    let n = t.shape()[0];
    let d = t.numel() / n;
    let mut data = Vec::with_capacity(t.numel());
    for &p in perm {
        data.extend_from_slice(&t.data()[p * d..(p + 1) * d]);
    }
    Tensor::new(t.shape().to_vec(), data).unwrap()
}

fn assert_close(a: &[f64], b: &[f64], tol: f64) -> Result<(), TestCaseError> {
    prop_assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(b) {
        prop_assert!((x - y).abs() <= tol, "{} vs {}", x, y);
    }
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn attention_is_permutation_equivariant(seed in any::<u64>(), l in 2usize..9, d in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = randn(&mut rng, &[l, d]);
        let head = IntraAttentionHead::random(d, 0.7, &mut rng);
        let rn = RelationNetwork::random(d, 6, 4, 0.7, &mut rng);
        let mut perm: Vec<usize> = (0..l).collect();
        perm.shuffle(&mut rng);
        let fp = permute_rows(&f, &perm);

        let w = intra_attention(&f, &head).unwrap();
        let v = inter_attention_euclidean(&f).unwrap();
        let (vr, _) = inter_attention_rn(&f, &rn).unwrap();
        for (orig, permuted) in [
            (w.clone(), intra_attention(&fp, &head).unwrap()),
            (v.clone(), inter_attention_euclidean(&fp).unwrap()),
            (vr.clone(), inter_attention_rn(&fp, &rn).unwrap().0),
        ] {
            assert_close(permute_rows(&orig, &perm).data(), permuted.data(), 1e-12)?;
        }
        let a = combine_and_normalize(&w, &vr).unwrap();
        let ap = combine_and_normalize(&permute_rows(&w, &perm), &permute_rows(&vr, &perm)).unwrap();
        assert_close(permute_rows(&a, &perm).data(), ap.data(), 1e-12)?;

        let maps = randn(&mut rng, &[l, 2, 3, 2]);
        let fused = temporal_fuse(&maps, &a).unwrap();
        let fused_p = temporal_fuse(&permute_rows(&maps, &perm), &ap).unwrap();
        assert_close(fused.data(), fused_p.data(), 1e-12)?;
    }

    #[test]
    fn euclidean_scores_suppress_duplicates(seed in any::<u64>(), k in 2usize..9, d in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dup = randn(&mut rng, &[1, d]);
        let odd = randn(&mut rng, &[1, d]);
        prop_assume!(dup.max_abs_diff(&odd) > 1e-6);
        let build = |k: usize| {
            let mut data = odd.data().to_vec();
            for _ in 0..k {
                data.extend_from_slice(dup.data());
            }
            Tensor::new([k + 1, d], data).unwrap()
        };
        let v = inter_attention_euclidean(&build(k)).unwrap();
        for i in 1..=k {
            prop_assert!(v.data()[i] < v.data()[0]);
        }
        let zero = Tensor::zeros([k + 1]);
        let a = combine_and_normalize(&zero, &v).unwrap();
        let zero_next = Tensor::zeros([k + 2]);
        let a_next = combine_and_normalize(&zero_next, &inter_attention_euclidean(&build(k + 1)).unwrap()).unwrap();
        prop_assert!(a_next.data()[1] <= a.data()[1] + 1e-15);
    }

    #[test]
    fn relation_embedding_is_bit_symmetric(seed in any::<u64>(), l in 2usize..7, d in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = randn(&mut rng, &[l, d]);
        let rn = RelationNetwork::random(d, 5, 3, 1.0, &mut rng);
        let r = relation_embed(&f, &rn).unwrap();
        for i in 0..l {
            for j in 0..l {
                for c in 0..3 {
                    prop_assert_eq!(r.at(&[i, j, c]).to_bits(), r.at(&[j, i, c]).to_bits());
                }
            }
        }
    }

    #[test]
    fn metrics_ignore_monotone_distance_transforms(seed in any::<u64>(), nq in 1usize..8, ng in 1usize..16) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let q_ids: Vec<u32> = (0..nq).map(|_| rand::Rng::random_range(&mut rng, 0..4)).collect();
        let g_ids: Vec<u32> = (0..ng).map(|_| rand::Rng::random_range(&mut rng, 0..4)).collect();
        let q_cams = vec![0u32; nq];
        let g_cams: Vec<u32> = (0..ng).map(|_| rand::Rng::random_range(&mut rng, 0..2)).collect();
        let dist = randn(&mut rng, &[nq, ng]);
        let warped = Tensor::new([nq, ng], dist.data().iter().map(|d| (3.0 * d).exp() + 0.5).collect()).unwrap();
        let (q, g) = (Labels { identities: &q_ids, cameras: &q_cams }, Labels { identities: &g_ids, cameras: &g_cams });
        let ranks = [1, 3, 5];
        match (cmc(&dist, q, g, &ranks), cmc(&warped, q, g, &ranks)) {
            (Ok(a), Ok(b)) => {
                prop_assert_eq!(a, b);
                prop_assert_eq!(mean_average_precision(&dist, q, g).unwrap(), mean_average_precision(&warped, q, g).unwrap());
            }
            (Err(_), Err(_)) => {}
            _ => prop_assert!(false, "only one ranking was rejected"),
        }
    }

    #[test]
    fn metrics_match_brute_force(seed in any::<u64>(), nq in 1usize..6, ng in 2usize..12) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let q_ids: Vec<u32> = (0..nq).map(|_| rand::Rng::random_range(&mut rng, 0..3)).collect();
        let g_ids: Vec<u32> = (0..ng).map(|_| rand::Rng::random_range(&mut rng, 0..3)).collect();
        let q_cams: Vec<u32> = (0..nq).map(|_| rand::Rng::random_range(&mut rng, 0..2)).collect();
        let g_cams: Vec<u32> = (0..ng).map(|_| rand::Rng::random_range(&mut rng, 0..2)).collect();
        // Integer distances force ties.
        let dist: Vec<Vec<f64>> = (0..nq).map(|_| (0..ng).map(|_| rand::Rng::random_range(&mut rng, 0..4) as f64).collect()).collect();
        let t = Tensor::new([nq, ng], dist.concat()).unwrap();
        let (q, g) = (Labels { identities: &q_ids, cameras: &q_cams }, Labels { identities: &g_ids, cameras: &g_cams });
        let ranks = [1, 2, 5];
        let (cmc_ref, map_ref, valid) = retrieval_oracle(&dist, &q_ids, &q_cams, &g_ids, &g_cams, &ranks);
        if valid == 0 {
            prop_assert!(cmc(&t, q, g, &ranks).is_err());
        } else {
            let c = cmc(&t, q, g, &ranks).unwrap();
            prop_assert_eq!(c.valid_queries, valid);
            for (k, want) in ranks.iter().zip(&cmc_ref) {
                prop_assert!((c.at(*k).unwrap() - want).abs() < 1e-12);
            }
            prop_assert!((mean_average_precision(&t, q, g).unwrap() - map_ref).abs() < 1e-12);
        }
    }

    #[test]
    fn triplet_loss_is_zero_iff_every_anchor_clears_the_margin(seed in any::<u64>(), spread in 0.0f64..3.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let labels = [0usize, 0, 1, 1, 2, 2];
        let centers = randn(&mut rng, &[3, 4]);
        let noise = randn(&mut rng, &[6, 4]);
        let data: Vec<f64> = (0..6)
            .flat_map(|i| (0..4).map(move |c| (i, c)))
            .map(|(i, c)| spread * centers.data()[labels[i] * 4 + c] + 0.3 * noise.data()[i * 4 + c])
            .collect();
        let emb = Tensor::new([6, 4], data.clone()).unwrap();
        let mut tape = Tape::new();
        let e = tape.constant(emb);
        let loss = triplet_loss(&mut tape, e, &labels, 0.3).unwrap();
        let value = tape.value(loss).item().unwrap();
        prop_assert!(value >= 0.0);
        let d = |i: usize, j: usize| (0..4).map(|c| (data[i * 4 + c] - data[j * 4 + c]).powi(2)).sum::<f64>().sqrt();
        let clears = (0..6).all(|a| {
            let pos = (0..6).filter(|&p| p != a && labels[p] == labels[a]).map(|p| d(a, p)).fold(0.0, f64::max);
            let neg = (0..6).filter(|&n| labels[n] != labels[a]).map(|n| d(a, n)).fold(f64::INFINITY, f64::min);
            neg - pos >= 0.3
        });
        prop_assert_eq!(value == 0.0, clears);
    }

    #[test]
    fn schedule_matches_closed_form(base in 1e-4f64..1.0, epoch in 0usize..400) {
        let mut expected = base;
        for _ in 0..epoch / 20 {
            expected *= 0.8;
        }
        prop_assert!((learning_rate(base, 0.8, 20, epoch) - expected).abs() <= 1e-15 * base);
        prop_assert!(learning_rate(base, 0.8, 20, epoch) <= base);
    }

    #[test]
    fn checkpoint_round_trip(seed in any::<u64>(), n in 0usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        for i in 0..n {
            let rank = rand::Rng::random_range(&mut rng, 0..4);
            let shape: Vec<usize> = (0..rank).map(|_| rand::Rng::random_range(&mut rng, 1..4)).collect();
            store.insert(format!("layer{i}.weight"), randn(&mut rng, &shape));
        }
        let mut bytes = Vec::new();
        store.write_to(&mut bytes).unwrap();
        let back = ParamStore::read_from(bytes.as_slice()).unwrap();
        prop_assert_eq!(back, store);
    }
}

#[test]
fn generation_and_split_are_deterministic() {
    let cfg = SyntheticConfig {
        num_identities: 6,
        frames_per_tracklet: 4,
        ..SyntheticConfig::default()
    };
    let a = generate(&cfg, 11).unwrap();
    let b = generate(&cfg, 11).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, generate(&cfg, 12).unwrap());
    assert_eq!(split(&a, 0.5, 3).unwrap(), split(&b, 0.5, 3).unwrap());
}

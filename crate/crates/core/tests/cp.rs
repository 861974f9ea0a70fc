mod support;

use cpnet_core::cp::{
    activation_set, correspondence_embed, displacements, embed, feature_change_heatmap, init_params, residual_insert,
    ActivationProvenance, CpModuleParams,
};
use cpnet_core::knn::{knn_brute, Dims, FeaturePointCloud, TopKIndex};
use cpnet_core::ops::BnMode;
use cpnet_core::Tensor;
use proptest::prelude::*;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use support::{activation_set_oracle, assert_close, embed_oracle, jittered_cloud, rng, uniform};

/// Fresh parameters with every normalization scale and shift randomized.
fn random_params(c: usize, r: &mut ChaCha8Rng) -> CpModuleParams {
    let mut p = init_params(c, r.random()).unwrap();
    for layer in p.layers.iter_mut() {
        let n = layer.fan_out();
        layer.gamma = Tensor::from_fn(&[n], |_| r.random_range(0.5f32..1.5));
        layer.beta = uniform(&[n], r);
        layer.bias = uniform(&[n], r);
        layer.running.mean = (0..n).map(|_| r.random_range(-0.5f32..0.5)).collect();
        layer.running.var = (0..n).map(|_| r.random_range(0.5f32..2.0)).collect();
    }
    p
}

fn rows_of(idx: &TopKIndex) -> Vec<Vec<usize>> {
    (0..idx.rows()).map(|i| idx.row(i).to_vec()).collect()
}

/// Every other-frame row of each anchor, ascending.
fn all_candidates(dims: Dims) -> TopKIndex {
    let hw = dims.frame_size();
    let idx = (0..dims.points())
        .flat_map(|i| (0..dims.points()).filter(move |&j| j / hw != i / hw))
        .collect();
    TopKIndex::new(idx, dims.other_frame_candidates()).unwrap()
}

#[test]
fn zero_final_gamma_gives_zero_output() {
    let mut r = rng(20);
    let dims = Dims::new(2, 2, 2);
    let feats = uniform(&[8, 8], &mut r);
    let cloud = FeaturePointCloud::new(Tensor::from_fn(&[8, 8], |i| 5.0 * feats.data()[i]), dims).unwrap();
    let mut p = random_params(8, &mut r);
    p.layers[2].gamma = Tensor::zeros(&[8]);
    p.layers[2].beta = Tensor::zeros(&[8]);
    let topk = knn_brute(&cloud, 3).unwrap();
    for mode in [BnMode::Train, BnMode::Eval] {
        let (g, _) = correspondence_embed(&cloud, &topk, &p, mode).unwrap();
        assert_eq!(g.shape(), &[8, 8]);
        assert!(g.data().iter().all(|&v| v == 0.0));
    }
}

#[test]
fn fresh_module_outputs_zero() {
    let mut r = rng(21);
    let cloud = FeaturePointCloud::new(uniform(&[18, 16], &mut r), Dims::new(2, 3, 3)).unwrap();
    let p = init_params(16, 5).unwrap();
    let (g, _) = correspondence_embed(&cloud, &knn_brute(&cloud, 4).unwrap(), &p, BnMode::Train).unwrap();
    assert!(g.data().iter().all(|&v| v == 0.0));
}

#[test]
fn single_proposal_is_the_pair_output() {
    let mut r = rng(22);
    let dims = Dims::new(2, 2, 2);
    let cloud = jittered_cloud(dims, 8, &mut r);
    let p = random_params(8, &mut r);
    let topk = knn_brute(&cloud, 1).unwrap();
    let e = embed(&cloud, &topk, &p, BnMode::Train).unwrap();
    assert_eq!(e.output.data(), e.pairs.data());
    let (g, _) = embed_oracle(&cloud, &rows_of(&topk), &p);
    assert_close(e.output.data(), &g, 1e-4, "g");
    for i in 0..dims.points() {
        assert_eq!(
            activation_set(&e.provenance, i)
                .unwrap()
                .into_iter()
                .collect::<Vec<_>>(),
            vec![0]
        );
    }
}

#[test]
fn embedding_matches_pair_loop() {
    let mut r = rng(23);
    let cloud = jittered_cloud(Dims::new(2, 2, 2), 8, &mut r);
    let p = random_params(8, &mut r);
    let topk = knn_brute(&cloud, 2).unwrap();
    let e = embed(&cloud, &topk, &p, BnMode::Train).unwrap();
    let (g, zeta) = embed_oracle(&cloud, &rows_of(&topk), &p);
    assert_close(e.output.data(), &g, 1e-4, "g");
    assert_close(e.pairs.data(), &zeta, 1e-4, "zeta");
}

#[test]
fn channel_mismatch_rejected() {
    let mut r = rng(24);
    let cloud = FeaturePointCloud::new(uniform(&[8, 8], &mut r), Dims::new(2, 2, 2)).unwrap();
    let topk = knn_brute(&cloud, 2).unwrap();
    let p = init_params(16, 0).unwrap();
    assert!(correspondence_embed(&cloud, &topk, &p, BnMode::Train).is_err());
}

#[test]
fn displacements_are_neighbor_minus_anchor() {
    // Rows (t, h, w): 0 = (0,0,0), 1 = (0,1,0), 2 = (1,0,0), 3 = (1,1,0).
    let dims = Dims::new(2, 2, 1);
    let topk = TopKIndex::new(vec![3, 2, 1, 0], 1).unwrap();
    let d = displacements(dims, &topk);
    assert_eq!(d, vec![0.5, 0.5, 0.0, 0.5, -0.5, 0.0, -0.5, 0.5, 0.0, -0.5, -0.5, 0.0]);
}

#[test]
fn residual_insert_examples() {
    let mut r = rng(25);
    let a = uniform(&[3, 4], &mut r);
    let b = uniform(&[3, 4], &mut r);
    let zero = Tensor::zeros(&[3, 4]);
    assert_eq!(residual_insert(&a, &zero).unwrap().data(), a.data());
    assert_eq!(residual_insert(&zero, &b).unwrap().data(), b.data());
    let sum = residual_insert(&a, &b).unwrap();
    let expected: Vec<f64> = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| x as f64 + y as f64)
        .collect();
    assert_close(sum.data(), &expected, 1e-6, "sum");
    assert!(residual_insert(&a, &Tensor::zeros(&[4, 3])).is_err());
}

#[test]
fn singleton_set_when_k_is_one() {
    let prov = ActivationProvenance::new(vec![0; 12], 1, 4).unwrap();
    for i in 0..3 {
        assert_eq!(
            activation_set(&prov, i).unwrap().into_iter().collect::<Vec<_>>(),
            vec![0]
        );
    }
    assert!(activation_set(&prov, 3).is_err());
    assert!(ActivationProvenance::new(vec![1], 1, 1).is_err());
}

/// Anchor and an ordered candidate pair `(j_hi, j_lo)` where `j_hi`'s pair
/// output exceeds `j_lo`'s on every channel, from eval-mode outputs over all
/// candidates.
fn dominating_pair(zeta: &[f32], m: usize, n: usize, c: usize) -> Option<(usize, usize, usize)> {
    for i in 0..m {
        for a in 0..n {
            for b in 0..n {
                let za = &zeta[(i * n + a) * c..(i * n + a + 1) * c];
                let zb = &zeta[(i * n + b) * c..(i * n + b + 1) * c];
                if za.iter().zip(zb).all(|(x, y)| x > y) {
                    return Some((i, a, b));
                }
            }
        }
    }
    None
}

#[test]
fn dominating_proposal_is_the_whole_set() {
    let dims = Dims::new(2, 3, 3);
    let m = dims.points();
    let all = all_candidates(dims);
    let n = all.k();
    let (cloud, p, (i, hi, lo)) = (26..76)
        .find_map(|seed| {
            let mut r = rng(seed);
            let cloud = FeaturePointCloud::new(uniform(&[m, 8], &mut r), dims).unwrap();
            let p = random_params(8, &mut r);
            let full = embed(&cloud, &all, &p, BnMode::Eval).unwrap();
            dominating_pair(full.pairs.data(), m, n, 8).map(|found| (cloud, p, found))
        })
        .expect("a dominated candidate");
    // Place the dominated proposal first so the winner is slot 1.
    let mut idx = Vec::new();
    for row in 0..m {
        if row == i {
            idx.extend([all.row(i)[lo], all.row(i)[hi]]);
        } else {
            idx.extend(&all.row(row)[..2]);
        }
    }
    let topk = TopKIndex::new(idx, 2).unwrap();
    let e = embed(&cloud, &topk, &p, BnMode::Eval).unwrap();
    assert_eq!(
        activation_set(&e.provenance, i)
            .unwrap()
            .into_iter()
            .collect::<Vec<_>>(),
        vec![1]
    );
}

#[test]
fn init_widths_and_zero_gamma() {
    let p = init_params(16, 9).unwrap();
    assert_eq!(p.widths(), [35, 4, 8, 16]);
    assert_eq!(p.channels(), 16);
    for seed in [0, 1, u64::MAX] {
        let q = init_params(16, seed).unwrap();
        assert!(q.final_gamma().data().iter().all(|&g| g == 0.0));
        for layer in &q.layers[..2] {
            assert!(layer.gamma.data().iter().all(|&g| g == 1.0));
        }
        for layer in &q.layers {
            assert!(layer.bias.data().iter().all(|&b| b == 0.0));
            assert!(layer.beta.data().iter().all(|&b| b == 0.0));
        }
    }
    assert_eq!(init_params(16, 9).unwrap(), p);
    assert_ne!(init_params(16, 10).unwrap(), p);
    for bad in [0, 6, 10] {
        assert!(init_params(bad, 0).is_err());
    }
}

#[test]
fn init_weight_variance_is_two_over_fan_in() {
    let p = init_params(256, 4).unwrap();
    for layer in &p.layers {
        let w = layer.weight.data();
        let n = w.len() as f64;
        let mean = w.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = w.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
        let expected = 2.0 / layer.fan_in() as f64;
        assert!((var / expected - 1.0).abs() < 0.1, "var {var} vs {expected}");
    }
}

#[test]
fn heatmap_examples() {
    let dims = Dims::new(2, 1, 2);
    let mut r = rng(27);
    let before = uniform(&[4, 3], &mut r);
    let same = feature_change_heatmap(&before, &before, dims).unwrap();
    assert_eq!(same.shape(), &[2, 1, 2]);
    assert!(same.data().iter().all(|&v| v == 0.0));

    let base = Tensor::zeros(&[4, 3]);
    let mut after = base.clone();
    after.data_mut()[7] = 2.0;
    let h = feature_change_heatmap(&base, &after, dims).unwrap();
    assert_eq!(h.data(), &[0.0, 0.0, 2.0, 0.0]);

    let after = uniform(&[4, 3], &mut r);
    let h = feature_change_heatmap(&before, &after, dims).unwrap();
    let expected: Vec<f64> = (0..4)
        .map(|p| {
            (0..3)
                .map(|c| (after.data()[p * 3 + c] as f64 - before.data()[p * 3 + c] as f64).abs())
                .sum()
        })
        .collect();
    assert_close(h.data(), &expected, 1e-5, "heat");
    assert!(feature_change_heatmap(&before, &after, Dims::new(1, 1, 2)).is_err());
}

/// Embedding case: geometry, channels, k and seed.
fn embed_case() -> impl Strategy<Value = (Dims, usize, usize, u64)> {
    (
        2usize..4,
        1usize..4,
        1usize..4,
        prop::sample::select(vec![4usize, 8, 12]),
        any::<u64>(),
    )
        .prop_flat_map(|(t, h, w, c, seed)| {
            let avail = (t - 1) * h * w;
            (Just(Dims::new(t, h, w)), Just(c), 1..=avail.min(5), Just(seed))
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(50))]

    #[test]
    fn batched_embedding_matches_pair_loop((dims, c, k, seed) in embed_case()) {
        let mut r = rng(seed);
        let cloud = jittered_cloud(dims, c, &mut r);
        let p = random_params(c, &mut r);
        let topk = knn_brute(&cloud, k).unwrap();
        let e = embed(&cloud, &topk, &p, BnMode::Train).unwrap();
        prop_assert_eq!(e.output.shape(), cloud.features().shape());
        let (g, zeta) = embed_oracle(&cloud, &rows_of(&topk), &p);
        assert_close(e.output.data(), &g, 1e-4, "g");
        assert_close(e.pairs.data(), &zeta, 1e-4, "zeta");
    }

    #[test]
    fn activation_sets_match_recomputation((dims, c, k, seed) in embed_case()) {
        let mut r = rng(seed);
        let cloud = FeaturePointCloud::new(uniform(&[dims.points(), c], &mut r), dims).unwrap();
        let p = random_params(c, &mut r);
        let topk = knn_brute(&cloud, k).unwrap();
        let e = embed(&cloud, &topk, &p, BnMode::Train).unwrap();
        for i in 0..dims.points() {
            prop_assert_eq!(activation_set(&e.provenance, i).unwrap(), activation_set_oracle(e.pairs.data(), k, c, i));
        }
    }

    #[test]
    fn neighbor_order_is_irrelevant((dims, c, k, seed) in embed_case()) {
        let mut r = rng(seed);
        let cloud = FeaturePointCloud::new(uniform(&[dims.points(), c], &mut r), dims).unwrap();
        let p = random_params(c, &mut r);
        let topk = knn_brute(&cloud, k).unwrap();
        let mut perms = Vec::new();
        let mut idx = Vec::new();
        for i in 0..topk.rows() {
            let mut perm: Vec<usize> = (0..k).collect();
            for a in (1..k).rev() {
                perm.swap(a, r.random_range(0..=a));
            }
            idx.extend(perm.iter().map(|&j| topk.row(i)[j]));
            perms.push(perm);
        }
        let shuffled = TopKIndex::new(idx, k).unwrap();
        for mode in [BnMode::Train, BnMode::Eval] {
            let a = embed(&cloud, &topk, &p, mode).unwrap();
            let b = embed(&cloud, &shuffled, &p, mode).unwrap();
            prop_assert_eq!(a.output.data(), b.output.data());
            for i in 0..topk.rows() {
                for ch in 0..c {
                    let wa = a.provenance.winner(i, ch);
                    let wb = perms[i][b.provenance.winner(i, ch)];
                    // Only an exact tie may move the winning slot.
                    prop_assert!(wa == wb || a.pairs.data()[(i * k + wa) * c + ch] == a.pairs.data()[(i * k + wb) * c + ch]);
                }
            }
        }
    }

    #[test]
    fn dominated_extra_proposal_changes_nothing(seed in any::<u64>()) {
        let mut r = rng(seed);
        let dims = Dims::new(3, 2, 2);
        let c = 4;
        let cloud = FeaturePointCloud::new(uniform(&[dims.points(), c], &mut r), dims).unwrap();
        let p = random_params(c, &mut r);
        let k = 3;
        let all = all_candidates(dims);
        let n = all.k();
        let full = embed(&cloud, &all, &p, BnMode::Eval).unwrap();
        let zeta = full.pairs.data();
        // For each anchor: its first k candidates, plus the first later
        // candidate dominated on every channel by their maximum.
        let mut found = 0;
        for i in 0..dims.points() {
            let g: Vec<f32> = (0..c)
                .map(|ch| (0..k).map(|j| zeta[(i * n + j) * c + ch]).fold(f32::MIN, f32::max))
                .collect();
            let Some(extra) = (k..n).find(|&j| (0..c).all(|ch| zeta[(i * n + j) * c + ch] < g[ch])) else {
                continue;
            };
            found += 1;
            let base_rows: Vec<usize> = (0..dims.points()).flat_map(|a| all.row(a)[..k].to_vec()).collect();
            let mut ext_rows = Vec::new();
            for a in 0..dims.points() {
                ext_rows.extend(&all.row(a)[..k]);
                ext_rows.push(if a == i { all.row(a)[extra] } else { all.row(a)[0] });
            }
            let base = embed(&cloud, &TopKIndex::new(base_rows, k).unwrap(), &p, BnMode::Eval).unwrap();
            let ext = embed(&cloud, &TopKIndex::new(ext_rows, k + 1).unwrap(), &p, BnMode::Eval).unwrap();
            prop_assert_eq!(&base.output.data()[i * c..(i + 1) * c], &ext.output.data()[i * c..(i + 1) * c]);
            prop_assert_eq!(activation_set(&base.provenance, i).unwrap(), activation_set(&ext.provenance, i).unwrap());
        }
        prop_assume!(found > 0);
    }
}

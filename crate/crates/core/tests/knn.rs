mod support;

use cpnet_core::knn::{
    arg_top_k, knn_brute, knn_tree, mask_same_frame, pairwise_similarity, Dims, FeaturePointCloud, KnnBackend,
    TopKIndex, MASKED,
};
use cpnet_core::{Error, Tensor};
use proptest::prelude::*;
use support::{jittered_cloud, rng, sq_dist, topk_oracle, uniform};

fn cloud(rows: &[&[f32]], dims: Dims) -> FeaturePointCloud {
    let c = rows[0].len();
    let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
    FeaturePointCloud::new(Tensor::new(vec![rows.len(), c], data).unwrap(), dims).unwrap()
}

fn map(t: &Tensor, f: impl Fn(f32) -> f32) -> Tensor {
    Tensor::from_fn(t.shape(), |i| f(t.data()[i]))
}

fn rows_of(idx: &TopKIndex) -> Vec<Vec<usize>> {
    (0..idx.rows()).map(|i| idx.row(i).to_vec()).collect()
}

#[test]
fn coincident_points_have_zero_similarity() {
    let c = cloud(&[&[0.5, -2.0], &[0.5, -2.0]], Dims::new(2, 1, 1));
    let s = pairwise_similarity(&c).unwrap();
    assert_eq!(s.get(0, 1), 0.0);
    assert_eq!(s.get(0, 0), 0.0);
}

#[test]
fn three_four_five_similarity() {
    let c = cloud(&[&[0.0, 0.0], &[3.0, 4.0]], Dims::new(2, 1, 1));
    let s = pairwise_similarity(&c).unwrap();
    assert_eq!(s.get(0, 1), -25.0);
    assert_eq!(s.get(1, 0), -25.0);
}

#[test]
fn similarity_matches_double_loop() {
    let c = FeaturePointCloud::new(uniform(&[6, 3], &mut rng(10)), Dims::new(2, 1, 3)).unwrap();
    let s = pairwise_similarity(&c).unwrap();
    assert!(!s.is_masked());
    for i in 0..6 {
        for j in 0..6 {
            assert_eq!(s.get(i, j), s.get(j, i));
            let expected = -sq_dist(c.row(i), c.row(j));
            assert!((s.get(i, j) as f64 - expected).abs() <= 1e-4, "({i},{j})");
        }
    }
}

#[test]
fn mask_single_pixel_frames() {
    let c = cloud(&[&[1.0], &[2.0]], Dims::new(2, 1, 1));
    let m = mask_same_frame(pairwise_similarity(&c).unwrap(), c.dims()).unwrap();
    assert!(m.is_masked());
    assert_eq!(m.get(0, 0), MASKED);
    assert_eq!(m.get(1, 1), MASKED);
    assert_eq!(m.get(0, 1), -1.0);
}

#[test]
fn mask_single_frame_masks_everything() {
    let c = FeaturePointCloud::new(uniform(&[4, 2], &mut rng(11)), Dims::new(1, 2, 2)).unwrap();
    let m = mask_same_frame(pairwise_similarity(&c).unwrap(), c.dims()).unwrap();
    assert!(m.values().data().iter().all(|&v| v == MASKED));
}

#[test]
fn mask_matches_frame_index_arithmetic() {
    let dims = Dims::new(2, 1, 2);
    let c = FeaturePointCloud::new(uniform(&[4, 3], &mut rng(12)), dims).unwrap();
    let raw = pairwise_similarity(&c).unwrap();
    let m = mask_same_frame(raw.clone(), dims).unwrap();
    for i in 0..4 {
        for j in 0..4 {
            if i / 2 == j / 2 {
                assert_eq!(m.get(i, j), MASKED, "({i},{j})");
            } else {
                assert_eq!(m.get(i, j), raw.get(i, j), "({i},{j})");
                assert!(m.get(i, j) > MASKED);
            }
            assert_eq!(m.get(i, j), m.get(j, i));
        }
    }
}

#[test]
fn double_masking_rejected() {
    let c = cloud(&[&[1.0], &[2.0]], Dims::new(2, 1, 1));
    let m = mask_same_frame(pairwise_similarity(&c).unwrap(), c.dims()).unwrap();
    assert!(matches!(mask_same_frame(m, c.dims()), Err(Error::AlreadyMasked)));
}

#[test]
fn top_k_requires_mask() {
    let c = cloud(&[&[1.0], &[2.0]], Dims::new(2, 1, 1));
    assert!(matches!(
        arg_top_k(&pairwise_similarity(&c).unwrap(), 1),
        Err(Error::NotMasked)
    ));
}

#[test]
fn top_k_only_candidate() {
    let c = cloud(&[&[1.0], &[5.0]], Dims::new(2, 1, 1));
    let m = mask_same_frame(pairwise_similarity(&c).unwrap(), c.dims()).unwrap();
    let idx = arg_top_k(&m, 1).unwrap();
    assert_eq!(rows_of(&idx), vec![vec![1], vec![0]]);
}

#[test]
fn identical_features_break_ties_by_index() {
    let c = cloud(&[&[0.3, 0.3], &[0.3, 0.3], &[0.3, 0.3]], Dims::new(3, 1, 1));
    let expected = vec![vec![1, 2], vec![0, 2], vec![0, 1]];
    for backend in [KnnBackend::Brute, KnnBackend::Tree] {
        assert_eq!(rows_of(&backend.select(&c, 2).unwrap()), expected, "{backend}");
    }
}

#[test]
fn top_k_matches_sort_oracle() {
    let c = jittered_cloud(Dims::new(2, 2, 2), 4, &mut rng(13));
    let idx = knn_brute(&c, 3).unwrap();
    assert_eq!(rows_of(&idx), topk_oracle(&c, 3));
}

#[test]
fn oversized_k_rejected_with_sizing() {
    let c = FeaturePointCloud::new(uniform(&[8, 2], &mut rng(14)), Dims::new(2, 2, 2)).unwrap();
    for backend in [KnnBackend::Brute, KnnBackend::Tree] {
        match backend.select(&c, 5) {
            Err(Error::TooFewCandidates {
                k,
                available,
                frames,
                frame_size,
            }) => {
                assert_eq!((k, available, frames, frame_size), (5, 4, 2, 4));
            }
            other => panic!("{backend}: expected sizing error, got {other:?}"),
        }
        assert!(backend.select(&c, 0).is_err());
        assert!(backend.select(&c, 4).is_ok());
    }
    let single = FeaturePointCloud::new(uniform(&[4, 2], &mut rng(15)), Dims::new(1, 2, 2)).unwrap();
    let m = mask_same_frame(pairwise_similarity(&single).unwrap(), single.dims()).unwrap();
    assert!(matches!(arg_top_k(&m, 1), Err(Error::TooFewCandidates { .. })));
    assert!(knn_tree(&single, 1).is_err());
}

#[test]
fn backend_names_roundtrip() {
    for b in [KnnBackend::Brute, KnnBackend::Tree] {
        assert_eq!(b.to_string().parse::<KnnBackend>().unwrap(), b);
    }
    assert!("ball".parse::<KnnBackend>().is_err());
    assert_eq!(KnnBackend::default(), KnnBackend::Tree);
}

#[test]
fn selection_never_hits_masked_entries() {
    // Huge features push real distances toward the floor; they must still
    // rank above the mask.
    let c = cloud(&[&[3e19], &[-3e19], &[3e19]], Dims::new(3, 1, 1));
    for backend in [KnnBackend::Brute, KnnBackend::Tree] {
        let idx = backend.select(&c, 2).unwrap();
        idx.validate(c.dims()).unwrap();
    }
}

/// Top-k under the unsquared distance, by full sort.
fn topk_unsquared(cloud: &FeaturePointCloud, k: usize) -> Vec<Vec<usize>> {
    let hw = cloud.dims().frame_size();
    (0..cloud.len())
        .map(|i| {
            let mut cand: Vec<(f64, usize)> = (0..cloud.len())
                .filter(|&j| j / hw != i / hw)
                .map(|j| (-sq_dist(cloud.row(i), cloud.row(j)).sqrt(), j))
                .collect();
            cand.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
            cand.into_iter().take(k).map(|(_, j)| j).collect()
        })
        .collect()
}

fn small_case() -> impl Strategy<Value = (Dims, usize, usize, u64)> {
    (2usize..5, 1usize..4, 1usize..5, 1usize..17, any::<u64>()).prop_flat_map(|(t, h, w, c, seed)| {
        let avail = (t - 1) * h * w;
        (Just(Dims::new(t, h, w)), Just(c), 1..=avail.min(8), Just(seed))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn tree_equals_brute((dims, c, k, seed) in small_case()) {
        let cl = jittered_cloud(dims, c, &mut rng(seed));
        let brute = knn_brute(&cl, k).unwrap();
        let tree = knn_tree(&cl, k).unwrap();
        prop_assert_eq!(brute.as_slice(), tree.as_slice());
        prop_assert_eq!(rows_of(&brute), topk_oracle(&cl, k));
    }

    #[test]
    fn tree_equals_brute_on_quantized_features((dims, c, k, seed) in small_case()) {
        // Few distinct values, so ties are everywhere.
        let mut r = rng(seed);
        let t = map(&uniform(&[dims.points(), c], &mut r), |v| (v * 2.0).round());
        let cl = FeaturePointCloud::new(t, dims).unwrap();
        prop_assert_eq!(knn_brute(&cl, k).unwrap().as_slice().to_vec(), knn_tree(&cl, k).unwrap().as_slice().to_vec());
    }

    #[test]
    fn proposals_come_from_other_frames((dims, c, k, seed) in small_case()) {
        let cl = FeaturePointCloud::new(uniform(&[dims.points(), c], &mut rng(seed)), dims).unwrap();
        for backend in [KnnBackend::Brute, KnnBackend::Tree] {
            let idx = backend.select(&cl, k).unwrap();
            idx.validate(dims).unwrap();
            for i in 0..idx.rows() {
                let row = idx.row(i);
                for (a, &j) in row.iter().enumerate() {
                    prop_assert_ne!(dims.frame_of(j), dims.frame_of(i));
                    prop_assert!(!row[..a].contains(&j));
                }
            }
        }
    }

    #[test]
    fn unsquared_distance_selects_the_same((dims, c, k, seed) in small_case()) {
        let cl = jittered_cloud(dims, c, &mut rng(seed));
        prop_assert_eq!(rows_of(&knn_brute(&cl, k).unwrap()), topk_unsquared(&cl, k));
    }

    #[test]
    fn positive_scaling_keeps_selection((dims, c, k, seed) in small_case(), scale in 0.1f32..10.0) {
        let cl = jittered_cloud(dims, c, &mut rng(seed));
        let scaled = FeaturePointCloud::new(map(cl.features(), |v| v * scale), dims).unwrap();
        let before = knn_brute(&cl, k).unwrap();
        prop_assert_eq!(before.as_slice(), knn_brute(&scaled, k).unwrap().as_slice().to_vec());
        prop_assert_eq!(before.as_slice(), knn_tree(&scaled, k).unwrap().as_slice().to_vec());
    }

    #[test]
    fn selection_is_deterministic((dims, c, k, seed) in small_case()) {
        let cl = FeaturePointCloud::new(uniform(&[dims.points(), c], &mut rng(seed)), dims).unwrap();
        for backend in [KnnBackend::Brute, KnnBackend::Tree] {
            prop_assert_eq!(backend.select(&cl, k).unwrap().as_slice().to_vec(), backend.select(&cl, k).unwrap().as_slice().to_vec());
        }
    }
}

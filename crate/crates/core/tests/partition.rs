//! Normalized-cut partitioning and mask construction against brute force.

mod common;

use proptest::prelude::*;
use rand::Rng;

use common::{brute_force_ncut, graph, planted_weights, random_weights, rng};
use selfmae::numerics::Matrix;
use selfmae::partition::{
    build_informed_mask, ncut_bipartition, random_mask, ratio_count, recursive_kway, relevance_scores, HintStrategy,
    NegativeWeights, SimilarityGraph,
};
use selfmae::relations::similarity_matrix;

/// Mean thresholding is a heuristic: single graphs can exceed the optimum
/// by more than 10%, but the excess is small on average.
#[test]
fn spectral_energy_close_to_brute_force_on_average() {
    let mut r = rng(100);
    let mut ratios = Vec::new();
    for case in 0..200 {
        let n = 3 + case % 8;
        let w = random_weights(n, 0.0, 1.0, &mut r);
        let (opt, _) = brute_force_ncut(&w);
        let p = ncut_bipartition(&graph(w)).unwrap();
        assert!(p.energy >= opt * (1.0 - 1e-6));
        ratios.push(p.energy / opt);
    }
    let mean = ratios.iter().sum::<f64>() / ratios.len() as f64;
    assert!(mean <= 1.02, "mean spectral/optimal energy ratio {mean}");
    assert!(ratios.iter().all(|&x| x < 1.5));
}

#[test]
fn well_separated_graphs_are_recovered_exactly() {
    let mut r = rng(101);
    for case in 0..200 {
        let n = 4 + case % 7;
        let (w, group) = planted_weights(n, 0.09, &mut r);
        let (_, best) = brute_force_ncut(&w);
        let p = ncut_bipartition(&graph(w)).unwrap();
        let mut side = vec![false; n];
        for &i in &p.cluster_a {
            side[i] = true;
        }
        let same = side == group || side.iter().zip(&group).all(|(a, b)| a != b);
        assert!(same, "case {case}: planted {group:?}, got {side:?}");
        let best_same = best == group || best.iter().zip(&group).all(|(a, b)| a != b);
        assert!(best_same, "brute force disagrees with the planted split");
    }
}

#[test]
fn disconnected_components_split_with_zero_energy() {
    let mut w = Matrix::zeros(6, 6);
    for (i, j) in [(0, 1), (1, 2), (0, 2), (3, 4), (4, 5), (3, 5)] {
        w[(i, j)] = 1.0;
        w[(j, i)] = 1.0;
    }
    let p = ncut_bipartition(&graph(w)).unwrap();
    let mut a = p.cluster_a.clone();
    a.sort();
    assert!(a == vec![0, 1, 2] || a == vec![3, 4, 5]);
    assert!(p.energy.abs() < 1e-12);
}

#[test]
fn clip_mode_matches_elementwise_oracle() {
    let mut r = rng(102);
    let x = Matrix::from_fn(9, 5, |_, _| r.gen_range(-1.0..1.0));
    let m = similarity_matrix(&x).unwrap();
    let g = SimilarityGraph::from_similarity(&m, NegativeWeights::Clip).unwrap();
    let rescaled = SimilarityGraph::from_similarity(&m, NegativeWeights::Rescale).unwrap();
    for i in 0..9 {
        for j in 0..9 {
            let (want_clip, want_rescale) = if i == j {
                (0.0, 0.0)
            } else {
                (m.matrix[(i, j)].max(0.0), (m.matrix[(i, j)] + 1.0) / 2.0)
            };
            assert_eq!(g.weights()[(i, j)], want_clip);
            assert!((rescaled.weights()[(i, j)] - want_rescale).abs() < 1e-15);
        }
    }
}

#[test]
fn all_negative_similarity_is_degenerate() {
    // two antipodal tokens: the only off-diagonal entry is -1
    let x = Matrix::from_rows(&[vec![1.0, 0.0], vec![-1.0, 0.0]]).unwrap();
    let m = similarity_matrix(&x).unwrap();
    assert!(SimilarityGraph::from_similarity(&m, NegativeWeights::Clip).is_err());
}

#[test]
fn kway_partitions_cover_every_node_once() {
    let mut r = rng(103);
    for k in 2..=5 {
        let w = random_weights(12, 0.0, 1.0, &mut r);
        let parts = recursive_kway(&graph(w), k).unwrap();
        assert_eq!(parts.len(), k);
        let mut all: Vec<usize> = parts.concat();
        all.sort();
        assert_eq!(all, (0..12).collect::<Vec<_>>());
        assert!(parts.iter().all(|p| !p.is_empty()));
    }
}

proptest! {
    #[test]
    fn bipartition_is_a_partition(n in 2usize..20, seed in any::<u64>()) {
        let w = random_weights(n, 0.0, 1.0, &mut rng(seed));
        let p = ncut_bipartition(&graph(w)).unwrap();
        prop_assert!(!p.cluster_a.is_empty() && !p.cluster_b.is_empty());
        let mut all: Vec<usize> = p.cluster_a.iter().chain(&p.cluster_b).copied().collect();
        all.sort();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        prop_assert!(p.energy >= 0.0 && p.energy <= 2.0 + 1e-9);
    }

    #[test]
    fn informed_mask_counts(
        n in 4usize..80,
        ratio in 0.3f64..0.9,
        hint in 0.0f64..0.2,
        seed in any::<u64>(),
        strategy in prop_oneof![Just(HintStrategy::Random), Just(HintStrategy::Score), Just(HintStrategy::None)],
    ) {
        let mut r = rng(seed);
        let x = Matrix::from_fn(n, 6, |_, _| r.gen_range(-1.0..1.0));
        let cluster: Vec<usize> = (0..n).filter(|i| i % 3 == 0).collect();
        let ranking = relevance_scores(&x, &cluster).unwrap();
        let candidates = ratio_count(ratio, n);
        let hints = if strategy == HintStrategy::None { 0 } else { ratio_count(hint, n) };
        match build_informed_mask(&ranking, ratio, hint, strategy, seed) {
            Ok(mask) => {
                prop_assert_eq!(mask.hints().len(), hints);
                prop_assert_eq!(mask.masked().len(), candidates - hints);
                // hints and masked tokens all come from the top-ranked candidates
                let top: Vec<usize> = ranking.order[..candidates].to_vec();
                prop_assert!(mask.masked().iter().chain(mask.hints()).all(|t| top.contains(t)));
                prop_assert_eq!(mask.visible().len() + mask.masked().len(), n);
            }
            Err(_) => prop_assert!(hints >= candidates || candidates >= n),
        }
    }

    #[test]
    fn random_mask_counts_and_seed(n in 2usize..200, ratio in 0.05f64..0.95, seed in any::<u64>()) {
        let k = ratio_count(ratio, n);
        prop_assume!(k > 0 && k < n);
        let a = random_mask(n, ratio, seed).unwrap();
        prop_assert_eq!(a.masked().len(), k);
        prop_assert_eq!(a, random_mask(n, ratio, seed).unwrap());
    }
}

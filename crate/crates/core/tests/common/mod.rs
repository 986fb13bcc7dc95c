//! Independent oracles shared by the integration and acceptance tests.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use selfmae::numerics::Matrix;
use selfmae::partition::SimilarityGraph;

/// Exhaustive minimum normalized cut over all nontrivial bipartitions.
/// Returns the energy and one optimal side assignment (node 0 on side A).
pub fn brute_force_ncut(w: &Matrix<f64>) -> (f64, Vec<bool>) {
    let n = w.rows();
    assert!((2..=16).contains(&n));
    let mut best = (f64::INFINITY, Vec::new());
    // node 0 fixed in A removes the mirror duplicates
    for bits in 0u32..(1 << (n - 1)) {
        let in_a: Vec<bool> = (0..n).map(|i| i == 0 || bits & (1 << (i - 1)) == 0).collect();
        if in_a.iter().all(|&a| a) {
            continue;
        }
        let (mut cut, mut assoc_a, mut assoc_b) = (0.0, 0.0, 0.0);
        for i in 0..n {
            for j in 0..n {
                let x = w[(i, j)];
                if in_a[i] {
                    assoc_a += x;
                } else {
                    assoc_b += x;
                }
                if in_a[i] && !in_a[j] {
                    cut += x;
                }
            }
        }
        let e = if cut == 0.0 { 0.0 } else { cut / assoc_a + cut / assoc_b };
        if e < best.0 {
            best = (e, in_a);
        }
    }
    best
}

/// Symmetric weights with uniform entries in `[lo, hi)` and zero diagonal.
pub fn random_weights(n: usize, lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Matrix<f64> {
    let mut w = Matrix::zeros(n, n);
    for i in 0..n {
        for j in i + 1..n {
            let x = rng.gen_range(lo..hi);
            w[(i, j)] = x;
            w[(j, i)] = x;
        }
    }
    w
}

/// Two planted groups with intra weights in `[0.5, 1)` and inter weights
/// below `ratio * 0.5`. Returns the weights and the group of each node.
pub fn planted_weights(n: usize, ratio: f64, rng: &mut ChaCha8Rng) -> (Matrix<f64>, Vec<bool>) {
    let split = rng.gen_range(2..=n - 2);
    let mut nodes: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        nodes.swap(i, rng.gen_range(0..=i));
    }
    let mut group = vec![false; n];
    for &i in &nodes[..split] {
        group[i] = true;
    }
    let mut w = Matrix::zeros(n, n);
    for i in 0..n {
        for j in i + 1..n {
            let x = if group[i] == group[j] {
                rng.gen_range(0.5..1.0)
            } else {
                rng.gen_range(0.0..ratio * 0.5)
            };
            w[(i, j)] = x;
            w[(j, i)] = x;
        }
    }
    (w, group)
}

pub fn graph(w: Matrix<f64>) -> SimilarityGraph {
    SimilarityGraph::from_weights(w).expect("valid weights")
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Row-stochastic matrix with positive entries.
pub fn random_attention(n: usize, rng: &mut ChaCha8Rng) -> Matrix<f64> {
    let mut a = Matrix::from_fn(n, n, |_, _| rng.gen_range(0.01..1.0f64).powi(3));
    for r in 0..n {
        let s: f64 = a.row(r).iter().sum();
        a.row_mut(r).iter_mut().for_each(|x| *x /= s);
    }
    a
}

/// Attention whose entries depend only on the (query set, key set) pair:
/// a query in set `s` gives total mass `share[s][t]` to set `t`, spread
/// uniformly over its members.
pub fn homogeneous_attention(is_masked: &[bool], rng: &mut ChaCha8Rng) -> Matrix<f64> {
    let n = is_masked.len();
    let nm = is_masked.iter().filter(|&&m| m).count();
    let size = [n - nm, nm];
    let to_masked = [rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)];
    Matrix::from_fn(n, n, |i, j| {
        let s = is_masked[i] as usize;
        let t = is_masked[j] as usize;
        let mass = if t == 1 { to_masked[s] } else { 1.0 - to_masked[s] };
        mass / size[t] as f64
    })
}

/// Token-level provenance rollout: each token starts with all of its own
/// set's information and mixes it through the attention stack. Returns
/// `(visible share, masked share)` per token.
pub fn token_rollout(stack: &[Matrix<f64>], is_masked: &[bool]) -> Vec<(f64, f64)> {
    let mut p: Vec<(f64, f64)> = is_masked
        .iter()
        .map(|&m| if m { (0.0, 1.0) } else { (1.0, 0.0) })
        .collect();
    for a in stack {
        p = (0..p.len())
            .map(|i| {
                p.iter().enumerate().fold((0.0, 0.0), |acc, (j, q)| {
                    (acc.0 + a[(i, j)] * q.0, acc.1 + a[(i, j)] * q.1)
                })
            })
            .collect();
    }
    p
}

//! Normalized-cut bipartitioning, relevance ranking and mask construction.

use log::warn;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::model::MaskSpec;
use crate::numerics::{generalized_eigen_pair, Matrix};
use crate::relations::{normalize_rows, RelationKind, RelationMatrix};

/// Added to every degree so the generalized problem stays well posed.
pub const DEGREE_FLOOR: f64 = 1e-8;

/// Number of tokens selected by a ratio: `ceil(ratio * n)` with a small
/// tolerance so that exact products are not rounded up.
pub fn ratio_count(ratio: f64, n: usize) -> usize {
    ((ratio * n as f64) - 1e-9).ceil().max(0.0) as usize
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NegativeWeights {
    /// `max(M, 0)`.
    #[default]
    Clip,
    /// `(M + 1) / 2`.
    Rescale,
}

/// Nonnegative symmetric weights with zero diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityGraph {
    weights: Matrix<f64>,
    degrees: Vec<f64>,
}

impl SimilarityGraph {
    pub fn from_similarity(m: &RelationMatrix, mode: NegativeWeights) -> Result<Self> {
        if m.kind != RelationKind::Cosine {
            return Err(invalid("similarity graph needs a cosine relation"));
        }
        let w = match mode {
            NegativeWeights::Clip => m.matrix.map(|v| v.max(0.0)),
            NegativeWeights::Rescale => m.matrix.map(|v| ((v + 1.0) / 2.0).max(0.0)),
        };
        Self::from_weights(w)
    }

    /// Validates and zeroes the diagonal.
    pub fn from_weights(mut w: Matrix<f64>) -> Result<Self> {
        let n = w.rows();
        if n < 2 || w.cols() != n {
            return Err(Error::DegenerateGraph(format!(
                "need a square graph with n >= 2, got {:?}",
                w.shape()
            )));
        }
        w.ensure_finite("graph weights")?;
        if !w.is_symmetric(1e-9) {
            return Err(invalid("graph weights not symmetric"));
        }
        if w.data().iter().any(|&v| v < 0.0) {
            return Err(invalid("graph weights must be nonnegative"));
        }
        for i in 0..n {
            w[(i, i)] = 0.0;
        }
        if w.data().iter().all(|&v| v == 0.0) {
            return Err(Error::DegenerateGraph("all edge weights are zero".into()));
        }
        let degrees = (0..n).map(|i| w.row(i).iter().sum()).collect();
        Ok(Self { weights: w, degrees })
    }

    pub fn n(&self) -> usize {
        self.weights.rows()
    }

    pub fn weights(&self) -> &Matrix<f64> {
        &self.weights
    }

    /// Row sums without the floor.
    pub fn degrees(&self) -> &[f64] {
        &self.degrees
    }

    /// Induced subgraph; `None` when it has no edges.
    pub fn subgraph(&self, nodes: &[usize]) -> Option<Self> {
        let w = Matrix::from_fn(nodes.len(), nodes.len(), |a, b| self.weights[(nodes[a], nodes[b])]);
        Self::from_weights(w).ok()
    }

    /// `cut/assoc(A) + cut/assoc(B)` for the split given by `in_a`.
    pub fn ncut_energy(&self, in_a: &[bool]) -> f64 {
        let n = self.n();
        let (mut cut, mut assoc_a, mut assoc_b) = (0.0, 0.0, 0.0);
        for i in 0..n {
            if in_a[i] {
                assoc_a += self.degrees[i];
            } else {
                assoc_b += self.degrees[i];
            }
            for j in 0..n {
                if in_a[i] && !in_a[j] {
                    cut += self.weights[(i, j)];
                }
            }
        }
        cut / (assoc_a + DEGREE_FLOOR) + cut / (assoc_b + DEGREE_FLOOR)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ClusterId {
    A,
    B,
}

impl ClusterId {
    pub fn other(self) -> Self {
        match self {
            ClusterId::A => ClusterId::B,
            ClusterId::B => ClusterId::A,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PartitionResult {
    pub fiedler: Vec<f64>,
    pub eigenvalue: f64,
    /// Tokens with Fiedler entry at or above the mean.
    pub cluster_a: Vec<usize>,
    pub cluster_b: Vec<usize>,
    pub object: ClusterId,
    pub energy: f64,
}

impl PartitionResult {
    pub fn cluster(&self, id: ClusterId) -> &[usize] {
        match id {
            ClusterId::A => &self.cluster_a,
            ClusterId::B => &self.cluster_b,
        }
    }

    pub fn object_tokens(&self) -> &[usize] {
        self.cluster(self.object)
    }

    pub fn background_tokens(&self) -> &[usize] {
        self.cluster(self.object.other())
    }
}

/// Splits `y` at its mean; if one side is empty the token closest to the
/// mean (lowest index on ties) moves across.
pub fn threshold_split(y: &[f64]) -> Vec<bool> {
    let mean = y.iter().sum::<f64>() / y.len() as f64;
    let mut in_a: Vec<bool> = y.iter().map(|&v| v >= mean).collect();
    let count = in_a.iter().filter(|&&a| a).count();
    if count == 0 || count == y.len() {
        let closest = (0..y.len())
            .min_by(|&i, &j| (y[i] - mean).abs().total_cmp(&(y[j] - mean).abs()).then(i.cmp(&j)))
            .expect("nonempty");
        in_a[closest] = !in_a[closest];
    }
    in_a
}

/// Cluster holding the largest-magnitude Fiedler entry (lowest index on
/// ties).
pub fn select_object_cluster(fiedler: &[f64], cluster_a: &[usize]) -> ClusterId {
    let pivot = (0..fiedler.len())
        .max_by(|&i, &j| fiedler[i].abs().total_cmp(&fiedler[j].abs()).then(j.cmp(&i)))
        .expect("nonempty");
    if cluster_a.contains(&pivot) {
        ClusterId::A
    } else {
        ClusterId::B
    }
}

/// Spectral relaxation of the normalized cut.
pub fn ncut_bipartition(g: &SimilarityGraph) -> Result<PartitionResult> {
    let n = g.n();
    let w = g.weights();
    let laplacian = Matrix::from_fn(n, n, |i, j| if i == j { g.degrees[i] } else { -w[(i, j)] });
    let d: Vec<f64> = g.degrees.iter().map(|v| v + DEGREE_FLOOR).collect();
    let [_, second] = generalized_eigen_pair(&laplacian, &d)?;
    let in_a = threshold_split(&second.vector);
    let cluster_a: Vec<usize> = (0..n).filter(|&i| in_a[i]).collect();
    let cluster_b: Vec<usize> = (0..n).filter(|&i| !in_a[i]).collect();
    let object = select_object_cluster(&second.vector, &cluster_a);
    Ok(PartitionResult {
        energy: g.ncut_energy(&in_a),
        fiedler: second.vector,
        eigenvalue: second.value,
        cluster_a,
        cluster_b,
        object,
    })
}

/// Cosine relevance of every token to a cluster's mean embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct RelevanceRanking {
    pub scores: Vec<f64>,
    /// Token indices by descending score, lower index first on ties.
    pub order: Vec<usize>,
    pub centroid: Vec<f64>,
}

impl RelevanceRanking {
    /// Reorders so that the given cluster's tokens come first, each group
    /// keeping its score order.
    pub fn cluster_first(&self, cluster: &[usize]) -> Self {
        let mut inside = vec![false; self.scores.len()];
        cluster.iter().for_each(|&i| inside[i] = true);
        let (mut first, rest): (Vec<usize>, Vec<usize>) = self.order.iter().partition(|&&i| inside[i]);
        first.extend(rest);
        Self {
            order: first,
            ..self.clone()
        }
    }
}

pub fn relevance_scores(x: &Matrix<f64>, cluster: &[usize]) -> Result<RelevanceRanking> {
    if cluster.is_empty() {
        return Err(invalid("relevance cluster is empty"));
    }
    let d = x.cols();
    let mut centroid = vec![0.0; d];
    for &i in cluster {
        if i >= x.rows() {
            return Err(invalid(format!("cluster token {i} out of range")));
        }
        for (c, v) in centroid.iter_mut().zip(x.row(i)) {
            *c += v / cluster.len() as f64;
        }
    }
    let cn = centroid.iter().map(|v| v * v).sum::<f64>().sqrt();
    if cn == 0.0 {
        return Err(invalid("cluster mean embedding has zero norm"));
    }
    let xn = normalize_rows(x)?;
    let scores: Vec<f64> = (0..x.rows())
        .map(|r| {
            let dot: f64 = xn.row(r).iter().zip(&centroid).map(|(a, b)| a * b).sum();
            (dot / cn).clamp(-1.0, 1.0)
        })
        .collect();
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&i, &j| scores[j].total_cmp(&scores[i]).then(i.cmp(&j)));
    Ok(RelevanceRanking {
        scores,
        order,
        centroid,
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HintStrategy {
    #[default]
    Random,
    /// Probability proportional to the (nonnegative part of the) score.
    Score,
    None,
}

/// Masks the top `ceil(ratio*n)` ranked tokens, then re-exposes
/// `ceil(hint_ratio*n)` of them as hints.
pub fn build_informed_mask(
    ranking: &RelevanceRanking,
    ratio: f64,
    hint_ratio: f64,
    strategy: HintStrategy,
    seed: u64,
) -> Result<MaskSpec> {
    let n = ranking.scores.len();
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(invalid(format!("masking ratio {ratio} not in (0, 1)")));
    }
    if !(0.0..ratio).contains(&hint_ratio) {
        return Err(invalid(format!("hint ratio {hint_ratio} must be in [0, {ratio})")));
    }
    let candidates: Vec<usize> = ranking.order[..ratio_count(ratio, n)].to_vec();
    let k = if strategy == HintStrategy::None {
        0
    } else {
        ratio_count(hint_ratio, n)
    };
    if k >= candidates.len() {
        return Err(invalid(format!(
            "{k} hints would unmask all {} candidates",
            candidates.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let hints: Vec<usize> = match strategy {
        HintStrategy::None => Vec::new(),
        HintStrategy::Random => sample(&mut rng, candidates.len(), k)
            .into_iter()
            .map(|i| candidates[i])
            .collect(),
        HintStrategy::Score => {
            let mut pool = candidates.clone();
            let mut out = Vec::with_capacity(k);
            for _ in 0..k {
                let weights: Vec<f64> = pool.iter().map(|&i| ranking.scores[i].max(0.0)).collect();
                let total: f64 = weights.iter().sum();
                let pick = if total > 0.0 {
                    let mut u = rng.gen::<f64>() * total;
                    let mut idx = pool.len() - 1;
                    for (j, w) in weights.iter().enumerate() {
                        if u < *w {
                            idx = j;
                            break;
                        }
                        u -= w;
                    }
                    idx
                } else {
                    rng.gen_range(0..pool.len())
                };
                out.push(pool.remove(pick));
            }
            out
        }
    };
    let masked: Vec<usize> = candidates.into_iter().filter(|i| !hints.contains(i)).collect();
    MaskSpec::new(n, masked, hints)
}

/// Uniform mask of `ceil(ratio*n)` tokens.
pub fn random_mask(n: usize, ratio: f64, seed: u64) -> Result<MaskSpec> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(invalid(format!("masking ratio {ratio} not in (0, 1)")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    MaskSpec::new(n, sample(&mut rng, n, ratio_count(ratio, n)).into_vec(), vec![])
}

struct Split {
    cluster: usize,
    a: Vec<usize>,
    b: Vec<usize>,
    energy: f64,
}

fn best_split(g: &SimilarityGraph, nodes: &[usize]) -> Result<Option<(Vec<usize>, Vec<usize>, f64)>> {
    if nodes.len() < 2 {
        return Ok(None);
    }
    match g.subgraph(nodes) {
        Some(sub) => {
            let p = ncut_bipartition(&sub)?;
            let map = |v: &[usize]| v.iter().map(|&i| nodes[i]).collect::<Vec<_>>();
            Ok(Some((map(&p.cluster_a), map(&p.cluster_b), p.energy)))
        }
        None => {
            warn!("splitting an edgeless cluster of {} tokens by index", nodes.len());
            Ok(Some((vec![nodes[0]], nodes[1..].to_vec(), 0.0)))
        }
    }
}

/// Repeated bipartitioning until `k` clusters exist. Each round splits the
/// cluster whose own bipartition has the lowest normalized-cut energy;
/// ties go to the larger cluster, then to the cluster with the smaller
/// first token. Returns every level, `levels[j]` holding `j + 2` clusters.
pub fn recursive_kway_levels(g: &SimilarityGraph, k: usize) -> Result<Vec<Vec<Vec<usize>>>> {
    let n = g.n();
    if k < 2 || k > n {
        return Err(invalid(format!("K = {k} must be in [2, {n}]")));
    }
    let p = ncut_bipartition(g)?;
    let mut clusters = vec![p.cluster_a, p.cluster_b];
    clusters.sort_by_key(|c| c[0]);
    let mut levels = vec![clusters.clone()];
    while clusters.len() < k {
        let mut best: Option<Split> = None;
        for (ci, nodes) in clusters.iter().enumerate() {
            if let Some((a, b, energy)) = best_split(g, nodes)? {
                let better = match &best {
                    None => true,
                    Some(s) => {
                        let cur = &clusters[s.cluster];
                        energy < s.energy
                            || (energy == s.energy
                                && (nodes.len() > cur.len() || (nodes.len() == cur.len() && nodes[0] < cur[0])))
                    }
                };
                if better {
                    best = Some(Split {
                        cluster: ci,
                        a,
                        b,
                        energy,
                    });
                }
            }
        }
        let s = best.expect("a cluster with >= 2 tokens exists while fewer than n clusters");
        clusters[s.cluster] = s.a;
        clusters.push(s.b);
        clusters.iter_mut().for_each(|c| c.sort_unstable());
        clusters.sort_by_key(|c| c[0]);
        levels.push(clusters.clone());
    }
    Ok(levels)
}

pub fn recursive_kway(g: &SimilarityGraph, k: usize) -> Result<Vec<Vec<usize>>> {
    Ok(recursive_kway_levels(g, k)?.pop().expect("at least one level"))
}

pub const PGM_MASKED: u8 = 0;
pub const PGM_HINT: u8 = 128;
pub const PGM_VISIBLE: u8 = 255;

/// Binary PGM with one `scale x scale` block per token.
pub fn mask_to_pgm(mask: &MaskSpec, grid: usize, scale: usize) -> Result<Vec<u8>> {
    if grid * grid != mask.n() || scale == 0 {
        return Err(invalid(format!("grid {grid} does not cover {} tokens", mask.n())));
    }
    let mut level = vec![PGM_VISIBLE; mask.n()];
    mask.masked().iter().for_each(|&i| level[i] = PGM_MASKED);
    mask.hints().iter().for_each(|&i| level[i] = PGM_HINT);
    Ok(levels_to_pgm(&level, grid, scale))
}

/// Binary PGM of per-token gray levels.
pub fn levels_to_pgm(level: &[u8], grid: usize, scale: usize) -> Vec<u8> {
    let side = grid * scale;
    let mut out = format!("P5\n{side} {side}\n255\n").into_bytes();
    for y in 0..side {
        for x in 0..side {
            out.push(level[(y / scale) * grid + x / scale]);
        }
    }
    out
}

/// JSON index lists of a mask.
pub fn mask_to_json(mask: &MaskSpec) -> serde_json::Value {
    serde_json::json!({
        "n": mask.n(),
        "visible": mask.visible(),
        "masked": mask.masked(),
        "hints": mask.hints(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blocks(sizes: &[usize], intra: f64, inter: f64) -> SimilarityGraph {
        let mut label = Vec::new();
        for (b, &s) in sizes.iter().enumerate() {
            label.extend(std::iter::repeat_n(b, s));
        }
        let n = label.len();
        SimilarityGraph::from_weights(Matrix::from_fn(
            n,
            n,
            |i, j| if label[i] == label[j] { intra } else { inter },
        ))
        .unwrap()
    }

    #[test]
    fn ratio_counts() {
        assert_eq!(ratio_count(0.75, 196), 147);
        assert_eq!(ratio_count(0.75, 64), 48);
        assert_eq!(ratio_count(0.05, 64), 4);
        assert_eq!(ratio_count(0.001, 64), 1);
    }

    #[test]
    fn near_disconnected_blocks_split_exactly() {
        let p = ncut_bipartition(&blocks(&[4, 4], 1.0, 0.01)).unwrap();
        let mut sides = [p.cluster_a.clone(), p.cluster_b.clone()];
        sides.sort();
        assert_eq!(sides, [vec![0, 1, 2, 3], vec![4, 5, 6, 7]]);
        let direct =
            blocks(&[4, 4], 1.0, 0.01).ncut_energy(&(0..8).map(|i| p.cluster_a.contains(&i)).collect::<Vec<_>>());
        assert!((p.energy - direct).abs() < 1e-12);
    }

    #[test]
    fn uniform_graph_gives_nonempty_sides() {
        let p = ncut_bipartition(&blocks(&[6], 1.0, 1.0)).unwrap();
        assert!(!p.cluster_a.is_empty() && !p.cluster_b.is_empty());
    }

    #[test]
    fn degenerate_graphs_rejected() {
        assert!(SimilarityGraph::from_weights(Matrix::identity(4)).is_err());
        let m = RelationMatrix {
            matrix: Matrix::identity(3),
            kind: RelationKind::Cosine,
            layer: 0,
            setting: crate::relations::Setting::IntactEncoder,
        };
        assert!(matches!(
            SimilarityGraph::from_similarity(&m, NegativeWeights::Clip),
            Err(Error::DegenerateGraph(_))
        ));
    }

    #[test]
    fn threshold_tie_break_moves_closest() {
        assert_eq!(threshold_split(&[1.0, 1.0, 1.0]), vec![false, true, true]);
        let y = [0.9, 0.1, -0.1, -0.2];
        let a = threshold_split(&y);
        assert_eq!(a, vec![true, false, false, false]);
        assert_eq!(select_object_cluster(&y, &[0]), ClusterId::A);
        let neg: Vec<f64> = y.iter().map(|v| -v).collect();
        let a2: Vec<usize> = threshold_split(&neg)
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(|(i, _)| i)
            .collect();
        assert_eq!(a2, vec![1, 2, 3]);
        assert_eq!(select_object_cluster(&neg, &a2), ClusterId::B);
    }

    #[test]
    fn relevance_examples() {
        let x = Matrix::from_rows(&[vec![1.0, 0.0], vec![2.0, 0.0], vec![0.0, 3.0], vec![1.0, 1.0]]).unwrap();
        let r = relevance_scores(&x, &[0, 1]).unwrap();
        assert!((r.scores[0] - 1.0).abs() < 1e-12);
        assert!(r.scores[2].abs() < 1e-12);
        assert_eq!(r.order, vec![0, 1, 3, 2]);
        let anti = Matrix::from_rows(&[vec![1.0, 0.0], vec![-1.0, 0.0]]).unwrap();
        assert!(relevance_scores(&anti, &[0, 1]).is_err());
    }

    #[test]
    fn informed_mask_counts() {
        let x = Matrix::from_fn(196, 4, |r, c| ((r * 7 + c * 3) % 11) as f64 + 1.0);
        let r = relevance_scores(&x, &[0, 1, 2]).unwrap();
        let m = build_informed_mask(&r, 0.75, 0.0, HintStrategy::Random, 1).unwrap();
        assert_eq!(m.masked().len(), 147);
        assert_eq!(&m.masked().to_vec(), &{
            let mut v = r.order[..147].to_vec();
            v.sort_unstable();
            v
        });
        let h = build_informed_mask(&r, 0.75, 0.05, HintStrategy::Score, 1).unwrap();
        assert_eq!(h.hints().len(), 10);
        assert_eq!(h.masked().len(), 137);
        assert!(h.hints().iter().all(|i| r.order[..147].contains(i)));
        let one = build_informed_mask(&r, 0.001, 0.0, HintStrategy::None, 1).unwrap();
        assert_eq!(one.masked(), &[r.order[0]]);
        assert!(build_informed_mask(&r, 0.3, 0.3, HintStrategy::Random, 1).is_err());
        assert_eq!(h, build_informed_mask(&r, 0.75, 0.05, HintStrategy::Score, 1).unwrap());
    }

    #[test]
    fn random_mask_is_seeded() {
        let a = random_mask(196, 0.75, 42).unwrap();
        assert_eq!(a.masked().len(), 147);
        assert_eq!(a, random_mask(196, 0.75, 42).unwrap());
        assert_ne!(a, random_mask(196, 0.75, 43).unwrap());
        assert!(random_mask(10, 1.0, 0).is_err());
    }

    #[test]
    fn kway_examples() {
        let g = blocks(&[3, 4, 3], 1.0, 0.01);
        assert_eq!(
            recursive_kway(&g, 3).unwrap(),
            vec![vec![0, 1, 2], vec![3, 4, 5, 6], vec![7, 8, 9]]
        );
        let p = ncut_bipartition(&g).unwrap();
        let mut two = vec![p.cluster_a, p.cluster_b];
        two.sort_by_key(|c| c[0]);
        assert_eq!(recursive_kway(&g, 2).unwrap(), two);
        let all = recursive_kway(&g, 10).unwrap();
        assert_eq!(all, (0..10).map(|i| vec![i]).collect::<Vec<_>>());
        assert!(recursive_kway(&g, 11).is_err());
    }

    #[test]
    fn pgm_layout() {
        let m = MaskSpec::new(4, vec![0, 3], vec![1]).unwrap();
        let pgm = mask_to_pgm(&m, 2, 2).unwrap();
        let header = b"P5\n4 4\n255\n";
        assert_eq!(&pgm[..header.len()], header);
        let px = &pgm[header.len()..];
        assert_eq!(px.len(), 16);
        assert_eq!(&px[..4], &[PGM_MASKED, PGM_MASKED, PGM_HINT, PGM_HINT]);
        assert_eq!(&px[8..12], &[PGM_VISIBLE, PGM_VISIBLE, PGM_MASKED, PGM_MASKED]);
    }
}

//! Token-relation matrices and the analysis metrics built on them.

mod diagnostics;

pub use diagnostics::{compute_diagnostics, DiagnosticsOptions, DiagnosticsRecord, LayerDiagnostics, Part};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape, Error, Result};
use crate::model::{DecoderTrace, MaskSpec};
use crate::numerics::{dft2_amplitude, softmax_rows, FeatureGrid, Matrix};

/// Probability floor used inside logarithms of the KL divergence.
pub const KLD_FLOOR: f64 = 1e-12;
/// Offset inside the Fourier log amplitude.
pub const FOURIER_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RelationKind {
    Attention,
    Cosine,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Setting {
    IntactEncoder,
    MaskedEncoder,
    MaskedDecoder,
    IntactDecoder,
}

/// Square token-relation matrix tagged with its origin.
#[derive(Debug, Clone, PartialEq)]
pub struct RelationMatrix {
    pub matrix: Matrix<f64>,
    pub kind: RelationKind,
    pub layer: usize,
    pub setting: Setting,
}

impl RelationMatrix {
    pub fn n(&self) -> usize {
        self.matrix.rows()
    }

    /// Head-averaged attention relation.
    pub fn from_heads(heads: &[Matrix<f64>], layer: usize, setting: Setting) -> Result<Self> {
        let first = heads.first().ok_or_else(|| invalid("no attention heads"))?;
        let mut acc = first.clone();
        for h in &heads[1..] {
            if h.shape() != acc.shape() {
                return Err(shape(
                    "attention head",
                    format!("{:?}", acc.shape()),
                    format!("{:?}", h.shape()),
                ));
            }
            acc.add_assign(h);
        }
        Ok(Self {
            matrix: acc.scale(1.0 / heads.len() as f64),
            kind: RelationKind::Attention,
            layer,
            setting,
        })
    }

    /// Checks row-stochasticity (attention) or symmetry with unit diagonal
    /// (cosine) within `tol`.
    pub fn check(&self, tol: f64) -> Result<()> {
        let m = &self.matrix;
        if m.rows() != m.cols() {
            return Err(shape("relation matrix", "square", format!("{:?}", m.shape())));
        }
        m.ensure_finite("relation matrix")?;
        match self.kind {
            RelationKind::Attention => {
                for r in 0..m.rows() {
                    let s: f64 = m.row(r).iter().sum();
                    if (s - 1.0).abs() > tol || m.row(r).iter().any(|&x| x < -tol) {
                        return Err(invalid(format!("attention row {r} sums to {s}")));
                    }
                }
            }
            RelationKind::Cosine => {
                if !m.is_symmetric(tol) {
                    return Err(invalid("cosine matrix not symmetric"));
                }
                for i in 0..m.rows() {
                    if (m[(i, i)] - 1.0).abs() > tol {
                        return Err(invalid(format!("cosine diagonal {i} is {}", m[(i, i)])));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Single-head attention `softmax(X Wq (X Wk)^T / sqrt(d'))`.
pub fn attention_matrix(
    x: &Matrix<f64>,
    wq: &Matrix<f64>,
    wk: &Matrix<f64>,
    head_dim: usize,
) -> Result<RelationMatrix> {
    if head_dim == 0 {
        return Err(invalid("head dimension must be positive"));
    }
    let q = x.matmul(wq)?;
    let k = x.matmul(wk)?;
    let logits = q.matmul_t(&k)?.scale(1.0 / (head_dim as f64).sqrt());
    Ok(RelationMatrix {
        matrix: softmax_rows(&logits)?,
        kind: RelationKind::Attention,
        layer: 0,
        setting: Setting::IntactEncoder,
    })
}

/// Rows scaled to unit L2 norm; zero rows are rejected with their index.
pub fn normalize_rows(x: &Matrix<f64>) -> Result<Matrix<f64>> {
    let mut out = x.clone();
    for r in 0..out.rows() {
        let norm = out.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return Err(Error::ZeroNorm(r));
        }
        out.row_mut(r).iter_mut().for_each(|v| *v /= norm);
    }
    Ok(out)
}

/// Pairwise cosine similarity of embeddings.
pub fn similarity_matrix(x: &Matrix<f64>) -> Result<RelationMatrix> {
    let xn = normalize_rows(x)?;
    let mut m = xn.matmul_t(&xn)?;
    let n = m.rows();
    for i in 0..n {
        m[(i, i)] = 1.0;
        for j in 0..i {
            let v = (0.5 * (m[(i, j)] + m[(j, i)])).clamp(-1.0, 1.0);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
    Ok(RelationMatrix {
        matrix: m,
        kind: RelationKind::Cosine,
        layer: 0,
        setting: Setting::IntactEncoder,
    })
}

/// Feature variance and similarity variance of a token set.
///
/// The feature variance is the mean squared L2 distance of the normalized
/// embeddings to their centroid; the similarity variance is the variance
/// of the off-diagonal cosine entries.
pub fn feature_similarity_variance(x: &Matrix<f64>) -> Result<(f64, f64)> {
    let n = x.rows();
    if n < 2 {
        return Err(invalid(format!("need at least 2 tokens, got {n}")));
    }
    let xn = normalize_rows(x)?;
    let d = xn.cols();
    let mut mean = vec![0.0; d];
    for r in 0..n {
        for (m, v) in mean.iter_mut().zip(xn.row(r)) {
            *m += v / n as f64;
        }
    }
    let sigma_f = (0..n)
        .map(|r| xn.row(r).iter().zip(&mean).map(|(v, m)| (v - m).powi(2)).sum::<f64>())
        .sum::<f64>()
        / n as f64;
    let m = similarity_matrix(x)?.matrix;
    let count = (n * (n - 1)) as f64;
    let off = |f: &dyn Fn(f64) -> f64| -> f64 {
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    s += f(m[(i, j)]);
                }
            }
        }
        s / count
    };
    let mu = off(&|v| v);
    let sigma_s = off(&|v| (v - mu).powi(2));
    Ok((sigma_f, sigma_s))
}

fn row_distributions(r: &RelationMatrix) -> Result<Matrix<f64>> {
    match r.kind {
        RelationKind::Attention => Ok(r.matrix.clone()),
        RelationKind::Cosine => softmax_rows(&r.matrix),
    }
}

/// Mean over rows of `KL(now_i || reference_i)` in nats. Cosine rows are
/// turned into distributions by softmax first.
pub fn relation_kld(now: &RelationMatrix, reference: &RelationMatrix) -> Result<f64> {
    if now.kind != reference.kind {
        return Err(invalid(format!(
            "relation kinds differ: {:?} vs {:?}",
            now.kind, reference.kind
        )));
    }
    if now.matrix.shape() != reference.matrix.shape() {
        return Err(shape(
            "relation_kld",
            format!("{:?}", reference.matrix.shape()),
            format!("{:?}", now.matrix.shape()),
        ));
    }
    let p = row_distributions(now)?;
    let q = row_distributions(reference)?;
    let n = p.rows();
    let mut total = 0.0;
    for r in 0..n {
        let mut kl = 0.0;
        for (&a, &b) in p.row(r).iter().zip(q.row(r)) {
            if a > 0.0 {
                kl += a * (a.max(KLD_FLOOR).ln() - b.max(KLD_FLOOR).ln());
            }
        }
        total += kl.max(0.0);
    }
    Ok(total / n as f64)
}

/// Normalized mutual information between queries and keys with joint
/// `A_ij / n`.
pub fn nmi_attention(a: &RelationMatrix) -> Result<f64> {
    if a.kind != RelationKind::Attention {
        return Err(invalid("NMI requires an attention relation"));
    }
    let n = a.n();
    let nf = n as f64;
    let mut key = vec![0.0; n];
    let mut mi = 0.0;
    for i in 0..n {
        for (j, &v) in a.matrix.row(i).iter().enumerate() {
            key[j] += v / nf;
        }
    }
    for i in 0..n {
        for (j, &v) in a.matrix.row(i).iter().enumerate() {
            let p = v / nf;
            if p > 0.0 && key[j] > 0.0 {
                mi += p * (p / ((1.0 / nf) * key[j])).ln();
            }
        }
    }
    let hq = nf.ln();
    let hk: f64 = key.iter().filter(|&&p| p > 0.0).map(|&p| -p * p.ln()).sum();
    if hq <= 0.0 || hk <= 0.0 {
        return Ok(0.0);
    }
    Ok((mi / (hq * hk).sqrt()).clamp(0.0, 1.0))
}

/// Attention-weighted mean query-key distance in pixels.
pub fn attention_distance(a: &RelationMatrix, positions: &[(usize, usize)], patch: usize) -> Result<f64> {
    let n = a.n();
    if positions.len() != n {
        return Err(shape("attention_distance positions", n, positions.len()));
    }
    let mut total = 0.0;
    for i in 0..n {
        let (yi, xi) = positions[i];
        for (j, &w) in a.matrix.row(i).iter().enumerate() {
            let (yj, xj) = positions[j];
            let d = ((yi as f64 - yj as f64).powi(2) + (xi as f64 - xj as f64).powi(2)).sqrt();
            total += w * d;
        }
    }
    Ok(total * patch as f64 / n as f64)
}

/// Radially binned relative log amplitude of a feature map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FourierCurve {
    /// Upper edge of each bin in cycles per token; bin 0 is DC.
    pub frequency: Vec<f64>,
    /// `log(A(f) + eps) - log(A(0) + eps)` per bin.
    pub delta_log_amplitude: Vec<f64>,
}

/// Bin index of a 2-D DFT coefficient: 0 for DC, else `1..=bins` by
/// radial frequency clamped to the Nyquist limit 0.5.
fn radial_bin(ky: usize, kx: usize, h: usize, w: usize, bins: usize) -> usize {
    if ky == 0 && kx == 0 {
        return 0;
    }
    let fy = ky.min(h - ky) as f64 / h as f64;
    let fx = kx.min(w - kx) as f64 / w as f64;
    let r = (fy * fy + fx * fx).sqrt().min(0.5);
    let b = (r / 0.5 * bins as f64 - 1e-9).ceil() as usize;
    b.clamp(1, bins)
}

pub fn fourier_log_amplitude(grid: &FeatureGrid) -> Result<FourierCurve> {
    let amp = dft2_amplitude(grid)?;
    let (h, w) = (grid.height, grid.width);
    let bins = h.max(w).div_ceil(2);
    let mut sum = vec![0.0; bins + 1];
    let mut count = vec![0usize; bins + 1];
    for ky in 0..h {
        for kx in 0..w {
            let b = radial_bin(ky, kx, h, w, bins);
            sum[b] += amp[(ky, kx)];
            count[b] += 1;
        }
    }
    let mean: Vec<f64> = sum
        .iter()
        .zip(&count)
        .map(|(s, &c)| if c == 0 { 0.0 } else { s / c as f64 })
        .collect();
    let base = (mean[0] + FOURIER_EPS).ln();
    Ok(FourierCurve {
        frequency: (0..=bins).map(|b| 0.5 * b as f64 / bins as f64).collect(),
        delta_log_amplitude: mean.iter().map(|a| (a + FOURIER_EPS).ln() - base).collect(),
    })
}

/// Mean over coordinates of the per-coordinate variance of `rows`.
pub fn row_spread(x: &Matrix<f64>, rows: &[usize]) -> f64 {
    let k = rows.len() as f64;
    let d = x.cols();
    let mut total = 0.0;
    for c in 0..d {
        let mean = rows.iter().map(|&r| x[(r, c)]).sum::<f64>() / k;
        total += rows.iter().map(|&r| (x[(r, c)] - mean).powi(2)).sum::<f64>() / k;
    }
    total / d as f64
}

/// Spread of the masked-slot embeddings after each decoder layer.
pub fn mask_token_variance(trace: &DecoderTrace, mask: &MaskSpec) -> Result<Vec<f64>> {
    if mask.masked().len() < 2 {
        return Err(invalid(format!(
            "need at least 2 masked tokens, got {}",
            mask.masked().len()
        )));
    }
    trace
        .layers
        .iter()
        .map(|l| {
            if l.output.rows() != mask.n() {
                return Err(shape("decoder layer rows", mask.n(), l.output.rows()));
            }
            Ok(row_spread(&l.output, mask.masked()))
        })
        .collect()
}

/// Mean within-cluster off-diagonal weight and mean cross-cluster weight.
pub fn cluster_edge_stats(r: &RelationMatrix, a: &[usize], b: &[usize]) -> Result<(f64, f64)> {
    let n = r.n();
    if a.is_empty() || b.is_empty() {
        return Err(invalid("clusters must be nonempty"));
    }
    let mut side = vec![None; n];
    let labelled = a.iter().map(|&i| (i, 0u8)).chain(b.iter().map(|&i| (i, 1u8)));
    for (i, s) in labelled {
        if i >= n || side[i].is_some() {
            return Err(invalid(format!("token {i} out of range or in both clusters")));
        }
        side[i] = Some(s);
    }
    if side.iter().any(Option::is_none) {
        return Err(invalid("clusters do not cover all tokens"));
    }
    let (mut intra, mut n_intra, mut inter, mut n_inter) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            if side[i] == side[j] {
                intra += r.matrix[(i, j)];
                n_intra += 1;
            } else {
                inter += r.matrix[(i, j)];
                n_inter += 1;
            }
        }
    }
    if n_intra == 0 {
        return Err(invalid("no intra-cluster edges: both clusters are singletons"));
    }
    Ok((intra / n_intra as f64, inter / n_inter as f64))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn attention(m: Matrix<f64>) -> RelationMatrix {
        RelationMatrix {
            matrix: m,
            kind: RelationKind::Attention,
            layer: 0,
            setting: Setting::IntactEncoder,
        }
    }

    #[test]
    fn zero_query_weights_give_uniform_attention() {
        let x = Matrix::from_fn(5, 3, |r, c| (r * 3 + c) as f64);
        let a = attention_matrix(
            &x,
            &Matrix::zeros(3, 2),
            &Matrix::identity(3).select_rows(&[0, 1]).transpose(),
            2,
        )
        .unwrap();
        for v in a.matrix.data() {
            assert!((v - 0.2).abs() < 1e-12);
        }
        assert!(attention_matrix(&x, &Matrix::zeros(3, 2), &Matrix::zeros(3, 2), 0).is_err());
    }

    #[test]
    fn cosine_examples() {
        let m = similarity_matrix(&Matrix::from_rows(&[vec![1.0, 0.0], vec![1.0, 1.0]]).unwrap()).unwrap();
        assert!((m.matrix[(0, 1)] - 0.5f64.sqrt()).abs() < 1e-12);
        m.check(1e-12).unwrap();
        let ones = similarity_matrix(&Matrix::filled(3, 2, 2.0)).unwrap();
        assert!(ones.matrix.data().iter().all(|&v| (v - 1.0).abs() < 1e-12));
        let id = similarity_matrix(&Matrix::identity(3)).unwrap();
        assert_eq!(id.matrix, Matrix::identity(3));
        match similarity_matrix(&Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0]]).unwrap()) {
            Err(Error::ZeroNorm(1)) => {}
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn variance_examples() {
        let (f, s) = feature_similarity_variance(&Matrix::filled(4, 3, 1.0)).unwrap();
        assert!(f.abs() < 1e-12 && s.abs() < 1e-12);
        let (f, s) =
            feature_similarity_variance(&Matrix::from_rows(&[vec![1.0, 0.0], vec![-1.0, 0.0]]).unwrap()).unwrap();
        assert!((f - 1.0).abs() < 1e-12 && s.abs() < 1e-12);
        assert!(feature_similarity_variance(&Matrix::filled(1, 3, 1.0)).is_err());
    }

    #[test]
    fn kld_examples() {
        let p = attention(Matrix::from_rows(&[vec![0.5, 0.5]]).unwrap());
        let q = attention(Matrix::from_rows(&[vec![0.25, 0.75]]).unwrap());
        let expect = 0.5 * 2f64.ln() + 0.5 * (2.0f64 / 3.0).ln();
        assert!((relation_kld(&p, &q).unwrap() - expect).abs() < 1e-12);
        assert_eq!(relation_kld(&p, &p).unwrap(), 0.0);
        let mut c = p.clone();
        c.kind = RelationKind::Cosine;
        assert!(relation_kld(&c, &p).is_err());
    }

    #[test]
    fn nmi_examples() {
        assert!((nmi_attention(&attention(Matrix::identity(4))).unwrap() - 1.0).abs() < 1e-12);
        assert!(nmi_attention(&attention(Matrix::filled(4, 4, 0.25))).unwrap().abs() < 1e-12);
        let mut perm = Matrix::zeros(3, 3);
        perm[(0, 2)] = 1.0;
        perm[(1, 0)] = 1.0;
        perm[(2, 1)] = 1.0;
        assert!((nmi_attention(&attention(perm)).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn distance_examples() {
        let pos = vec![(0, 0), (0, 1), (1, 0), (1, 1)];
        assert_eq!(
            attention_distance(&attention(Matrix::identity(4)), &pos, 4).unwrap(),
            0.0
        );
        let u = attention_distance(&attention(Matrix::filled(4, 4, 0.25)), &pos, 4).unwrap();
        assert!((u - (2.0 + 2f64.sqrt())).abs() < 1e-12);
        let mut one = Matrix::zeros(4, 4);
        for (q, k) in [(0, 1), (1, 0), (2, 3), (3, 2)] {
            one[(q, k)] = 1.0;
        }
        assert!((attention_distance(&attention(one), &pos, 4).unwrap() - 4.0).abs() < 1e-12);
    }

    #[test]
    fn fourier_examples() {
        let flat = FeatureGrid::new(4, 4, 2, vec![0.7; 32]).unwrap();
        let c = fourier_log_amplitude(&flat).unwrap();
        assert_eq!(c.delta_log_amplitude.len(), 3);
        let expect = FOURIER_EPS.ln() - (0.7 * 16.0 + FOURIER_EPS).ln();
        for v in &c.delta_log_amplitude[1..] {
            assert!((v - expect).abs() < 1e-6);
        }
        let checker = FeatureGrid::new(8, 8, 1, (0..64).map(|i| ((i / 8 + i % 8) % 2) as f64).collect()).unwrap();
        let c = fourier_log_amplitude(&checker).unwrap();
        let last = *c.delta_log_amplitude.last().unwrap();
        assert!(c.delta_log_amplitude[1..c.delta_log_amplitude.len() - 1]
            .iter()
            .all(|&v| v < last));
    }

    #[test]
    fn edge_stats_examples() {
        let mut m = Matrix::zeros(4, 4);
        for (i, j) in [(0, 1), (1, 0), (2, 3), (3, 2)] {
            m[(i, j)] = 1.0;
        }
        let r = attention(m);
        assert_eq!(cluster_edge_stats(&r, &[0, 1], &[2, 3]).unwrap(), (1.0, 0.0));
        let u = attention(Matrix::filled(4, 4, 0.3));
        let (a, b) = cluster_edge_stats(&u, &[0, 2], &[1, 3]).unwrap();
        assert!((a - 0.3).abs() < 1e-12 && (b - 0.3).abs() < 1e-12);
        assert!(cluster_edge_stats(&attention(Matrix::identity(2)), &[0], &[1]).is_err());
        assert!(cluster_edge_stats(&u, &[0, 1], &[1, 3]).is_err());
    }

    #[test]
    fn mask_token_variance_example() {
        use crate::model::LayerTrace;
        let mut out = Matrix::zeros(3, 4);
        out.row_mut(2).iter_mut().for_each(|v| *v = 2.0);
        let trace = DecoderTrace {
            layers: vec![LayerTrace {
                output: out,
                attention: vec![],
            }],
            reconstruction: Matrix::zeros(3, 1),
        };
        let mask = MaskSpec::new(3, vec![0, 2], vec![]).unwrap();
        assert_eq!(mask_token_variance(&trace, &mask).unwrap(), vec![1.0]);
        let single = MaskSpec::new(3, vec![0], vec![]).unwrap();
        assert!(mask_token_variance(&trace, &single).is_err());
    }
}

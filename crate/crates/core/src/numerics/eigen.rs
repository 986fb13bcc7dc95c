//! Dense symmetric eigensolver and the generalized problem `L y = λ D y`
//! for diagonal positive `D`.
//!
//! The symmetric solver is Householder tridiagonalization followed by
//! implicit QL iterations. The generalized problem is reduced to the
//! standard one through `D^{-1/2} L D^{-1/2}`.

use super::Matrix;
use crate::error::{Error, Result};

const MAX_QL_ITERATIONS: usize = 200;

/// Eigen-decomposition of a symmetric matrix, eigenvalues ascending.
/// Column `k` of `vectors` belongs to `values[k]`.
#[derive(Debug, Clone)]
pub struct SymmetricEigen {
    pub values: Vec<f64>,
    pub vectors: Matrix<f64>,
}

impl SymmetricEigen {
    pub fn vector(&self, k: usize) -> Vec<f64> {
        self.vectors.col(k)
    }
}

pub fn symmetric_eigen(a: &Matrix<f64>) -> Result<SymmetricEigen> {
    let n = a.rows();
    if n == 0 || a.cols() != n {
        return Err(Error::Eigen(format!(
            "expected non-empty square matrix, got {:?}",
            a.shape()
        )));
    }
    a.ensure_finite("symmetric_eigen")?;
    let mut v: Vec<Vec<f64>> = (0..n).map(|r| a.row(r).to_vec()).collect();
    let mut d = vec![0.0; n];
    let mut e = vec![0.0; n];
    tridiagonalize(&mut v, &mut d, &mut e);
    ql_implicit(&mut v, &mut d, &mut e)?;

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&x, &y| d[x].total_cmp(&d[y]));
    let values = order.iter().map(|&k| d[k]).collect();
    let vectors = Matrix::from_fn(n, n, |r, c| v[r][order[c]]);
    Ok(SymmetricEigen { values, vectors })
}

fn tridiagonalize(v: &mut [Vec<f64>], d: &mut [f64], e: &mut [f64]) {
    let n = d.len();
    for j in 0..n {
        d[j] = v[n - 1][j];
    }
    for i in (1..n).rev() {
        let mut scale = 0.0;
        let mut h = 0.0;
        for dk in d.iter().take(i) {
            scale += dk.abs();
        }
        if scale == 0.0 {
            e[i] = d[i - 1];
            for j in 0..i {
                d[j] = v[i - 1][j];
                v[i][j] = 0.0;
                v[j][i] = 0.0;
            }
        } else {
            for dk in d.iter_mut().take(i) {
                *dk /= scale;
                h += *dk * *dk;
            }
            let f = d[i - 1];
            let mut g = h.sqrt();
            if f > 0.0 {
                g = -g;
            }
            e[i] = scale * g;
            h -= f * g;
            d[i - 1] = f - g;
            for ej in e.iter_mut().take(i) {
                *ej = 0.0;
            }
            for j in 0..i {
                let f = d[j];
                v[j][i] = f;
                let mut g = e[j] + v[j][j] * f;
                for k in (j + 1)..i {
                    g += v[k][j] * d[k];
                    e[k] += v[k][j] * f;
                }
                e[j] = g;
            }
            let mut f = 0.0;
            for j in 0..i {
                e[j] /= h;
                f += e[j] * d[j];
            }
            let hh = f / (h + h);
            for j in 0..i {
                e[j] -= hh * d[j];
            }
            for j in 0..i {
                let f = d[j];
                let g = e[j];
                for k in j..i {
                    v[k][j] -= f * e[k] + g * d[k];
                }
                d[j] = v[i - 1][j];
                v[i][j] = 0.0;
            }
        }
        d[i] = h;
    }
    for i in 0..n.saturating_sub(1) {
        v[n - 1][i] = v[i][i];
        v[i][i] = 1.0;
        let h = d[i + 1];
        if h != 0.0 {
            for k in 0..=i {
                d[k] = v[k][i + 1] / h;
            }
            for j in 0..=i {
                let mut g = 0.0;
                for k in 0..=i {
                    g += v[k][i + 1] * v[k][j];
                }
                for k in 0..=i {
                    v[k][j] -= g * d[k];
                }
            }
        }
        for row in v.iter_mut().take(i + 1) {
            row[i + 1] = 0.0;
        }
    }
    for j in 0..n {
        d[j] = v[n - 1][j];
        v[n - 1][j] = 0.0;
    }
    v[n - 1][n - 1] = 1.0;
    e[0] = 0.0;
}

fn ql_implicit(v: &mut [Vec<f64>], d: &mut [f64], e: &mut [f64]) -> Result<()> {
    let n = d.len();
    for i in 1..n {
        e[i - 1] = e[i];
    }
    e[n - 1] = 0.0;
    let mut f = 0.0;
    let mut tst1: f64 = 0.0;
    let eps = f64::EPSILON;
    for l in 0..n {
        tst1 = tst1.max(d[l].abs() + e[l].abs());
        let mut m = l;
        while m < n - 1 && e[m].abs() > eps * tst1 {
            m += 1;
        }
        if m > l {
            let mut iter = 0;
            loop {
                iter += 1;
                if iter > MAX_QL_ITERATIONS {
                    return Err(Error::Eigen(format!("QL failed to converge for eigenvalue {l}")));
                }
                let g = d[l];
                let mut p = (d[l + 1] - g) / (2.0 * e[l]);
                let mut r = p.hypot(1.0);
                if p < 0.0 {
                    r = -r;
                }
                d[l] = e[l] / (p + r);
                d[l + 1] = e[l] * (p + r);
                let dl1 = d[l + 1];
                let mut h = g - d[l];
                for di in d.iter_mut().skip(l + 2) {
                    *di -= h;
                }
                f += h;

                p = d[m];
                let mut c = 1.0;
                let mut c2 = c;
                let mut c3 = c;
                let el1 = e[l + 1];
                let mut s = 0.0;
                let mut s2 = 0.0;
                for i in (l..m).rev() {
                    c3 = c2;
                    c2 = c;
                    s2 = s;
                    let g = c * e[i];
                    h = c * p;
                    r = p.hypot(e[i]);
                    e[i + 1] = s * r;
                    s = e[i] / r;
                    c = p / r;
                    p = c * d[i] - s * g;
                    d[i + 1] = h + s * (c * g + s * d[i]);
                    for row in v.iter_mut() {
                        let h = row[i + 1];
                        row[i + 1] = s * row[i] + c * h;
                        row[i] = c * row[i] - s * h;
                    }
                }
                p = -s * s2 * c3 * el1 * e[l] / dl1;
                e[l] = s * p;
                d[l] = c * p;
                if e[l].abs() <= eps * tst1 {
                    break;
                }
            }
        }
        d[l] += f;
        e[l] = 0.0;
    }
    Ok(())
}

/// One generalized eigenpair, `vector` normalized to unit `D`-norm.
#[derive(Debug, Clone, PartialEq)]
pub struct EigenPair {
    pub value: f64,
    pub vector: Vec<f64>,
}

/// The two smallest eigenpairs of `L y = λ D y`, `L` symmetric and `D`
/// diagonal with strictly positive entries (passed as its diagonal).
///
/// Each vector's largest-magnitude entry is made positive so results are
/// reproducible; callers must not rely on any other sign convention.
pub fn generalized_eigen_pair(l: &Matrix<f64>, d: &[f64]) -> Result<[EigenPair; 2]> {
    let n = l.rows();
    if l.cols() != n || d.len() != n {
        return Err(crate::error::shape(
            "generalized_eigen_pair",
            n,
            format!("{:?} / {}", l.shape(), d.len()),
        ));
    }
    if n < 2 {
        return Err(Error::Eigen("need at least two nodes".into()));
    }
    if !l.is_symmetric(1e-9) {
        return Err(Error::Eigen("L is not symmetric within 1e-9".into()));
    }
    if let Some(i) = d.iter().position(|&x| !(x > 0.0 && x.is_finite())) {
        return Err(Error::Eigen(format!(
            "D has non-positive diagonal entry {} at {i}",
            d[i]
        )));
    }
    let inv_sqrt: Vec<f64> = d.iter().map(|&x| 1.0 / x.sqrt()).collect();
    let mut c = Matrix::from_fn(n, n, |i, j| l[(i, j)] * inv_sqrt[i] * inv_sqrt[j]);
    // symmetrize away rounding asymmetry
    for i in 0..n {
        for j in 0..i {
            let m = 0.5 * (c[(i, j)] + c[(j, i)]);
            c[(i, j)] = m;
            c[(j, i)] = m;
        }
    }
    let eig = symmetric_eigen(&c)?;
    let pair = |k: usize| {
        let mut y: Vec<f64> = (0..n).map(|i| eig.vectors[(i, k)] * inv_sqrt[i]).collect();
        canonical_sign(&mut y);
        EigenPair {
            value: eig.values[k],
            vector: y,
        }
    };
    Ok([pair(0), pair(1)])
}

fn canonical_sign(y: &mut [f64]) {
    let mut best = 0;
    for (i, v) in y.iter().enumerate() {
        if v.abs() > y[best].abs() {
            best = i;
        }
    }
    if y[best] < 0.0 {
        y.iter_mut().for_each(|v| *v = -*v);
    }
}

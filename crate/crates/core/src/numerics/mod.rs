//! Dense linear algebra, differentiable primitives, eigensolver and DFT.

mod dft;
mod eigen;
mod gradcheck;
mod matrix;
mod real;
mod tape;

pub use dft::{dft2, dft2_amplitude, FeatureGrid};
pub use eigen::{generalized_eigen_pair, symmetric_eigen, EigenPair, SymmetricEigen};
pub use gradcheck::{finite_diff_gradcheck, single_param};
pub use matrix::Matrix;
pub use real::Real;
pub use tape::{ParamId, ParamSet, Tape, Var};

use crate::error::{Error, Result};

/// Row-wise softmax with per-row max subtraction.
pub fn softmax_rows<T: Real>(logits: &Matrix<T>) -> Result<Matrix<T>> {
    if let Some(index) = logits.first_non_finite() {
        return Err(Error::NonFinite {
            context: "softmax_rows input",
            index,
        });
    }
    let mut out = logits.clone();
    for r in 0..out.rows() {
        softmax_in_place(out.row_mut(r));
    }
    Ok(out)
}

pub(crate) fn softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

use super::{Matrix, ParamSet, Tape, Var};
use crate::error::{invalid, Error, Result};

/// Compares tape gradients against central finite differences.
///
/// `f` records a scalar loss on a fresh tape; it is re-run once per
/// perturbed coordinate. Returns the maximum over all parameter entries of
/// `|analytic - numeric| / max(1, |numeric|)`.
pub fn finite_diff_gradcheck<F>(params: &ParamSet<f64>, step: f64, f: F) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &ParamSet<f64>) -> Result<Var>,
{
    if !(1e-6..=1e-3).contains(&step) {
        return Err(invalid(format!("gradcheck step {step} outside [1e-6, 1e-3]")));
    }
    let eval = |p: &ParamSet<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let loss = f(&mut tape, p)?;
        let v = tape.scalar(loss);
        if !v.is_finite() {
            return Err(Error::NonFinite {
                context: "gradcheck loss",
                index: 0,
            });
        }
        Ok(v)
    };

    let mut tape = Tape::new();
    let loss = f(&mut tape, params)?;
    if !tape.scalar(loss).is_finite() {
        return Err(Error::NonFinite {
            context: "gradcheck loss",
            index: 0,
        });
    }
    let analytic = tape.backward(loss, params)?;

    let mut worst: f64 = 0.0;
    let mut probe = params.clone();
    for id in params.ids() {
        let n = params.get(id).data().len();
        for i in 0..n {
            let orig = params.get(id).data()[i];
            probe.get_mut(id).data_mut()[i] = orig + step;
            let up = eval(&probe)?;
            probe.get_mut(id).data_mut()[i] = orig - step;
            let down = eval(&probe)?;
            probe.get_mut(id).data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * step);
            let rel = (analytic[id.0].data()[i] - numeric).abs() / numeric.abs().max(1.0);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

/// Convenience: a single-parameter set from a matrix.
pub fn single_param(name: &str, value: Matrix<f64>) -> ParamSet<f64> {
    let mut p = ParamSet::new();
    p.add(name, value);
    p
}

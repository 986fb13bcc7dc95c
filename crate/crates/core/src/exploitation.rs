//! Two-set provenance of information through decoder attention and the
//! informed-masking start trigger.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape, Result};
use crate::model::{DecoderTrace, MaskSpec};
use crate::numerics::Matrix;

/// Mean attention mass that tokens in `target` place on tokens in
/// `source`; rows are queries.
pub fn layer_exploitation(attention: &Matrix<f64>, source: &[usize], target: &[usize]) -> Result<f64> {
    if source.is_empty() || target.is_empty() {
        return Err(invalid("exploitation sets must be nonempty"));
    }
    let n = attention.rows();
    if source.iter().chain(target).any(|&i| i >= n) {
        return Err(invalid(format!("token index out of range {n}")));
    }
    let total: f64 = target
        .iter()
        .map(|&i| source.iter().map(|&j| attention[(i, j)]).sum::<f64>())
        .sum();
    Ok(total / target.len() as f64)
}

/// Per-layer rates `r[source][target]` with 0 = visible, 1 = masked.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerRates {
    pub vv: f64,
    pub vm: f64,
    pub mv: f64,
    pub mm: f64,
}

impl LayerRates {
    pub fn from_attention(attention: &Matrix<f64>, visible: &[usize], masked: &[usize]) -> Result<Self> {
        Ok(Self {
            vv: layer_exploitation(attention, visible, visible)?,
            vm: layer_exploitation(attention, visible, masked)?,
            mv: layer_exploitation(attention, masked, visible)?,
            mm: layer_exploitation(attention, masked, masked)?,
        })
    }
}

/// Accumulated rates `R_{source -> target}` after `layer` layers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProvenanceState {
    pub layer: usize,
    pub vv: f64,
    pub vm: f64,
    pub mv: f64,
    pub mm: f64,
    /// Masking ratio `|M| / n`.
    pub ratio: f64,
}

impl ProvenanceState {
    /// Each set initially holds only its own information.
    pub fn base(ratio: f64) -> Self {
        Self {
            layer: 0,
            vv: 1.0,
            vm: 0.0,
            mv: 0.0,
            mm: 1.0,
            ratio,
        }
    }
}

pub fn accumulate(state: &ProvenanceState, r: &LayerRates) -> Result<ProvenanceState> {
    for v in [r.vv, r.vm, r.mv, r.mm] {
        if !(-1e-9..=1.0 + 1e-9).contains(&v) {
            return Err(invalid(format!("layer rate {v} outside [0, 1]")));
        }
    }
    let s = state;
    Ok(ProvenanceState {
        layer: s.layer + 1,
        vv: r.vv * s.vv + r.mv * s.vm,
        vm: r.vm * s.vv + r.mm * s.vm,
        mv: r.vv * s.mv + r.mv * s.mm,
        mm: r.vm * s.mv + r.mm * s.mm,
        ratio: s.ratio,
    })
}

/// `(R_{V->O}, R_{M->O})`: share of the output carried by visible and by
/// masked-token information.
pub fn overall_rates(state: &ProvenanceState, ratio: f64) -> (f64, f64) {
    (
        ratio * state.vm + (1.0 - ratio) * state.vv,
        ratio * state.mm + (1.0 - ratio) * state.mv,
    )
}

/// Provenance after every decoder layer for one image.
pub fn decoder_provenance(trace: &DecoderTrace, mask: &MaskSpec) -> Result<Vec<ProvenanceState>> {
    if mask.masked().is_empty() {
        return Err(invalid("provenance needs at least one masked token"));
    }
    let mut state = ProvenanceState::base(mask.ratio());
    let mut out = Vec::with_capacity(trace.layers.len());
    for layer in &trace.layers {
        let a = layer.mean_attention();
        if a.rows() != mask.n() {
            return Err(shape("decoder attention", mask.n(), a.rows()));
        }
        let rates = LayerRates::from_attention(&a, mask.visible(), mask.masked())?;
        state = accumulate(&state, &rates)?;
        out.push(state);
    }
    Ok(out)
}

/// Final-layer overall rates of one image.
pub fn trace_rates(trace: &DecoderTrace, mask: &MaskSpec) -> Result<(f64, f64)> {
    let states = decoder_provenance(trace, mask)?;
    let last = states
        .last()
        .copied()
        .unwrap_or_else(|| ProvenanceState::base(mask.ratio()));
    Ok(overall_rates(&last, mask.ratio()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TriggerEntry {
    pub epoch: usize,
    pub visible_share: f64,
    pub mask_share: f64,
}

/// Per-epoch final-layer rates and the first epoch at which the masked
/// share reached the visible share.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TriggerHistory {
    pub entries: Vec<TriggerEntry>,
    pub trigger: Option<usize>,
}

impl TriggerHistory {
    pub fn check(&mut self, epoch: usize, visible_share: f64, mask_share: f64) -> Result<Option<usize>> {
        if let Some(last) = self.entries.last() {
            if epoch <= last.epoch {
                return Err(invalid(format!("epoch {epoch} not after {}", last.epoch)));
            }
        }
        if !visible_share.is_finite() || !mask_share.is_finite() {
            return Err(invalid("non-finite trigger rates"));
        }
        self.entries.push(TriggerEntry {
            epoch,
            visible_share,
            mask_share,
        });
        if self.trigger.is_none() && mask_share >= visible_share {
            self.trigger = Some(epoch);
        }
        Ok(self.trigger)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,r_v_o,r_m_o,triggered\n");
        for e in &self.entries {
            let fired = self.trigger.is_some_and(|t| e.epoch >= t);
            out.push_str(&format!(
                "{},{},{},{}\n",
                e.epoch,
                e.visible_share,
                e.mask_share,
                u8::from(fired)
            ));
        }
        out
    }
}

/// Free-function form of [`TriggerHistory::check`].
pub fn trigger_check(history: &mut TriggerHistory, epoch: usize, rates: (f64, f64)) -> Result<Option<usize>> {
    history.check(epoch, rates.0, rates.1)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_attention_rate_is_fraction() {
        let a = Matrix::filled(16, 16, 1.0 / 16.0);
        let v: Vec<usize> = (0..4).collect();
        let m: Vec<usize> = (4..16).collect();
        assert!((layer_exploitation(&a, &v, &m).unwrap() - 0.25).abs() < 1e-12);
        let r = LayerRates::from_attention(&a, &v, &m).unwrap();
        let s = accumulate(&ProvenanceState::base(0.75), &r).unwrap();
        assert!((s.vm - 0.25).abs() < 1e-12 && (s.mm - 0.75).abs() < 1e-12);
        let (vo, mo) = overall_rates(&s, 0.75);
        assert!((vo - 0.25).abs() < 1e-12 && (mo - 0.75).abs() < 1e-12);
        assert!(layer_exploitation(&a, &[], &m).is_err());
    }

    #[test]
    fn identity_attention_keeps_base() {
        let a = Matrix::identity(8);
        let v = [0, 1];
        let m = [2, 3, 4, 5, 6, 7];
        assert_eq!(layer_exploitation(&a, &v, &v).unwrap(), 1.0);
        assert_eq!(layer_exploitation(&a, &v, &m).unwrap(), 0.0);
        let r = LayerRates::from_attention(&a, &v, &m).unwrap();
        let mut s = ProvenanceState::base(0.75);
        for _ in 0..5 {
            s = accumulate(&s, &r).unwrap();
        }
        assert_eq!((s.vv, s.vm, s.mv, s.mm), (1.0, 0.0, 0.0, 1.0));
        assert_eq!(overall_rates(&s, 0.75), (0.25, 0.75));
    }

    #[test]
    fn out_of_range_rates_rejected() {
        let r = LayerRates {
            vv: 1.2,
            vm: 0.0,
            mv: -0.2,
            mm: 1.0,
        };
        assert!(accumulate(&ProvenanceState::base(0.5), &r).is_err());
    }

    #[test]
    fn trigger_first_crossing() {
        let mut h = TriggerHistory::default();
        for (e, m) in [0.40, 0.48, 0.52, 0.45].into_iter().enumerate() {
            h.check(e, 1.0 - m, m).unwrap();
        }
        assert_eq!(h.trigger, Some(2));
        assert!(h.check(3, 0.5, 0.5).is_err());
        assert!(h.to_csv().ends_with("3,0.55,0.45,1\n"));
        let mut never = TriggerHistory::default();
        for e in 0..5 {
            never.check(e, 0.6, 0.4).unwrap();
        }
        assert_eq!(never.trigger, None);
    }
}

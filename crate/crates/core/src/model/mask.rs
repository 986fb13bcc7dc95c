use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Partition of token indices into visible and masked sets, plus the hint
/// tokens: originally masked tokens that were re-exposed as visible.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskSpec {
    n: usize,
    visible: Vec<usize>,
    masked: Vec<usize>,
    hints: Vec<usize>,
}

impl MaskSpec {
    /// Masks `masked`; everything else, including `hints`, is visible.
    pub fn new(n: usize, mut masked: Vec<usize>, mut hints: Vec<usize>) -> Result<Self> {
        masked.sort_unstable();
        hints.sort_unstable();
        let mut flag = vec![false; n];
        for &i in &masked {
            if i >= n {
                return Err(Error::Mask(format!("masked index {i} out of range {n}")));
            }
            if flag[i] {
                return Err(Error::Mask(format!("masked index {i} repeated")));
            }
            flag[i] = true;
        }
        let visible: Vec<usize> = (0..n).filter(|&i| !flag[i]).collect();
        let spec = Self {
            n,
            visible,
            masked,
            hints,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Builds from explicit parts and checks that they partition `0..n`.
    pub fn from_parts(n: usize, visible: Vec<usize>, masked: Vec<usize>, hints: Vec<usize>) -> Result<Self> {
        let spec = Self {
            n,
            visible,
            masked,
            hints,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Everything visible.
    pub fn unmasked(n: usize) -> Self {
        Self {
            n,
            visible: (0..n).collect(),
            masked: Vec::new(),
            hints: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = vec![0u8; self.n];
        for (set, tag) in [(&self.visible, 1u8), (&self.masked, 2u8)] {
            for &i in set.iter() {
                if i >= self.n {
                    return Err(Error::Mask(format!("index {i} out of range {}", self.n)));
                }
                if seen[i] != 0 {
                    return Err(Error::Mask(format!("index {i} appears twice (overlap)")));
                }
                seen[i] = tag;
            }
        }
        if let Some(gap) = seen.iter().position(|&s| s == 0) {
            return Err(Error::Mask(format!("index {gap} is neither visible nor masked (gap)")));
        }
        if let Some(&h) = self.hints.iter().find(|&&h| h >= self.n || seen[h] != 1) {
            return Err(Error::Mask(format!("hint {h} is not a visible token")));
        }
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn visible(&self) -> &[usize] {
        &self.visible
    }

    pub fn masked(&self) -> &[usize] {
        &self.masked
    }

    pub fn hints(&self) -> &[usize] {
        &self.hints
    }

    pub fn is_masked(&self, i: usize) -> bool {
        self.masked.binary_search(&i).is_ok() || (!self.masked.is_sorted() && self.masked.contains(&i))
    }

    /// `|masked| / n`.
    pub fn ratio(&self) -> f64 {
        self.masked.len() as f64 / self.n as f64
    }

    /// Per-token flags: `Some(k)` gives the token's position within
    /// `visible`, `None` marks a masked token.
    pub fn layout(&self) -> Vec<Option<usize>> {
        let mut out = vec![None; self.n];
        for (k, &i) in self.visible.iter().enumerate() {
            out[i] = Some(k);
        }
        out
    }
}

//! Part-mask and part-label domain types shared by the decoder and the mask
//! generator.

use crate::error::{ModelError, Result};

/// Binary part-to-patch assignment: `mask(p, i)` is true when patch `i`
/// belongs to part `p`. Rows are disjoint when produced by argmax
/// binarization, but the type itself only requires binary entries.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PartMask {
    parts: usize,
    patches: usize,
    bits: Vec<bool>,
}

impl PartMask {
    pub fn new(parts: usize, patches: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != parts * patches {
            return Err(ModelError::Contract(format!(
                "part mask needs {}x{} entries, got {}",
                parts,
                patches,
                bits.len()
            )));
        }
        Ok(Self { parts, patches, bits })
    }

    pub fn all_ones(parts: usize, patches: usize) -> Self {
        Self { parts, patches, bits: vec![true; parts * patches] }
    }

    pub fn parts(&self) -> usize {
        self.parts
    }

    pub fn patches(&self) -> usize {
        self.patches
    }

    pub fn get(&self, part: usize, patch: usize) -> bool {
        self.bits[part * self.patches + patch]
    }

    pub fn row_is_empty(&self, part: usize) -> bool {
        !self.bits[part * self.patches..(part + 1) * self.patches].iter().any(|&b| b)
    }

    /// Additive attention bias: 0 inside the part, -inf outside. An empty row
    /// becomes all zeros (attend everywhere) when `empty_fallback` is set;
    /// with the fallback disabled an entirely empty mask is an error.
    pub fn to_attention_bias(&self, empty_fallback: bool) -> Result<Vec<f64>> {
        if !empty_fallback && (0..self.parts).all(|p| self.row_is_empty(p)) {
            return Err(ModelError::DegenerateMask);
        }
        let mut bias = vec![0.0; self.parts * self.patches];
        for p in 0..self.parts {
            if self.row_is_empty(p) {
                if !empty_fallback {
                    return Err(ModelError::DegenerateMask);
                }
                continue; // H_p = 0: attend everywhere
            }
            for i in 0..self.patches {
                if !self.get(p, i) {
                    bias[p * self.patches + i] = f64::NEG_INFINITY;
                }
            }
        }
        Ok(bias)
    }
}

/// Per-patch hard part assignment; 0 is background, 1..=P are parts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PartLabelMap {
    pub labels: Vec<usize>,
}

impl PartLabelMap {
    pub fn new(labels: Vec<usize>, parts: usize) -> Result<Self> {
        if let Some(&bad) = labels.iter().find(|&&l| l > parts) {
            return Err(ModelError::Contract(format!("part label {bad} exceeds P = {parts}")));
        }
        Ok(Self { labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bias_zero_inside_neg_inf_outside() {
        let m = PartMask::new(2, 3, vec![true, false, true, false, false, true]).unwrap();
        let bias = m.to_attention_bias(true).unwrap();
        assert_eq!(bias[0], 0.0);
        assert_eq!(bias[1], f64::NEG_INFINITY);
        assert_eq!(bias[2], 0.0);
        assert_eq!(bias[5], 0.0);
    }

    #[test]
    fn empty_row_falls_back_to_attend_everywhere() {
        let m = PartMask::new(2, 2, vec![false, false, true, false]).unwrap();
        let bias = m.to_attention_bias(true).unwrap();
        assert_eq!(&bias[0..2], &[0.0, 0.0]);
        assert_eq!(bias[3], f64::NEG_INFINITY);
    }

    #[test]
    fn fully_empty_mask_without_fallback_is_error() {
        let m = PartMask::new(2, 2, vec![false; 4]).unwrap();
        assert!(matches!(m.to_attention_bias(false), Err(ModelError::DegenerateMask)));
    }
}

//! Binary mask representation, run-length codec and pixel-set operations.
//!
//! Masks are stored as row-major bit grids. The RLE interchange form flattens
//! the grid in column-major order and always starts with the zero-run, so a
//! mask whose first column-major pixel is foreground encodes a leading zero
//! count. IoU and unions are computed with exact integer pixel counts; the
//! final ratio is the only floating-point division.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Identifier of an instrument class, 1-based (`1..=C`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClassId(pub u32);

impl fmt::Display for ClassId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Pixel-level instance region as a row-major bit grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    bits: Vec<u8>,
}

impl BinaryMask {
    /// Build a mask from a row-major bit grid. Entries must be 0 or 1 and the
    /// grid must be at least 1x1.
    pub fn new(height: usize, width: usize, bits: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::DimensionMismatch(format!(
                "mask dims must be >= 1, got {height}x{width}"
            )));
        }
        if bits.len() != height * width {
            return Err(Error::DimensionMismatch(format!(
                "bit count {} does not equal {height}x{width}",
                bits.len()
            )));
        }
        if bits.iter().any(|&b| b > 1) {
            return Err(Error::InvalidValue("mask bits must be 0 or 1".into()));
        }
        Ok(Self { height, width, bits })
    }

    pub fn zeros(height: usize, width: usize) -> Result<Self> {
        Self::new(height, width, vec![0; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.bits[row * self.width + col] != 0
    }

    pub fn set(&mut self, row: usize, col: usize, value: bool) {
        self.bits[row * self.width + col] = value as u8;
    }

    /// Number of foreground pixels.
    pub fn area(&self) -> usize {
        self.bits.iter().map(|&b| b as usize).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.iter().all(|&b| b == 0)
    }

    /// Bitwise OR with another mask of the same dimensions.
    pub fn union_in_place(&mut self, other: &BinaryMask) -> Result<()> {
        check_same_dims(self, other)?;
        for (a, b) in self.bits.iter_mut().zip(&other.bits) {
            *a |= b;
        }
        Ok(())
    }

    /// Exact intersection and union pixel counts.
    pub fn overlap_counts(&self, other: &BinaryMask) -> Result<(u64, u64)> {
        check_same_dims(self, other)?;
        let mut inter = 0u64;
        let mut union = 0u64;
        for (&a, &b) in self.bits.iter().zip(&other.bits) {
            inter += (a & b) as u64;
            union += (a | b) as u64;
        }
        Ok((inter, union))
    }
}

fn check_same_dims(a: &BinaryMask, b: &BinaryMask) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::DimensionMismatch(format!(
            "{}x{} vs {}x{}",
            a.height, a.width, b.height, b.width
        )));
    }
    Ok(())
}

/// Run-length-encoded mask: alternating run lengths of 0s and 1s over the
/// column-major flattening, starting with the zero-run (possibly length 0).
///
/// JSON shape: `{"h": int, "w": int, "counts": [int, ...]}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RleMask {
    #[serde(rename = "h")]
    pub height: usize,
    #[serde(rename = "w")]
    pub width: usize,
    pub counts: Vec<u32>,
}

/// Encode a mask into column-major RLE. Total function; the output always
/// satisfies `sum(counts) == height*width` with no interior zero counts
/// (only `counts[0]` may be 0).
pub fn rle_encode(mask: &BinaryMask) -> RleMask {
    let (h, w) = mask.dims();
    let mut counts = Vec::new();
    let mut current: u8 = 0;
    let mut run: u32 = 0;
    for col in 0..w {
        for row in 0..h {
            let v = mask.bits[row * w + col];
            if v == current {
                run += 1;
            } else {
                counts.push(run);
                current = v;
                run = 1;
            }
        }
    }
    counts.push(run);
    RleMask { height: h, width: w, counts }
}

/// Decode column-major RLE back into a bit grid. Exact inverse of
/// [`rle_encode`]; fails with `SumMismatch` when the counts do not cover the
/// grid exactly.
pub fn rle_decode(rle: &RleMask) -> Result<BinaryMask> {
    let total: u64 = rle.counts.iter().map(|&c| c as u64).sum();
    let expected = (rle.height as u64) * (rle.width as u64);
    if total != expected {
        return Err(Error::SumMismatch { got: total, expected });
    }
    let mut mask = BinaryMask::zeros(rle.height, rle.width)?;
    let mut flat = 0usize;
    let mut value: u8 = 0;
    for &count in &rle.counts {
        if value == 1 {
            for k in flat..flat + count as usize {
                let col = k / rle.height;
                let row = k % rle.height;
                mask.bits[row * rle.width + col] = 1;
            }
        }
        flat += count as usize;
        value ^= 1;
    }
    Ok(mask)
}

/// Pixel IoU of two same-sized masks. `None` when both masks are empty (the
/// 0/0 case); metric code decides how to treat absent classes.
pub fn mask_iou(a: &BinaryMask, b: &BinaryMask) -> Result<Option<f64>> {
    let (inter, union) = a.overlap_counts(b)?;
    if union == 0 {
        return Ok(None);
    }
    Ok(Some(inter as f64 / union as f64))
}

/// Union the masks of each class over a labelled region sequence. Classes
/// absent from the input have no entry. Order-independent.
pub fn class_union(regions: &[(ClassId, BinaryMask)]) -> Result<BTreeMap<ClassId, BinaryMask>> {
    let mut unions: BTreeMap<ClassId, BinaryMask> = BTreeMap::new();
    for (class, mask) in regions {
        match unions.get_mut(class) {
            Some(u) => u.union_in_place(mask)?,
            None => {
                unions.insert(*class, mask.clone());
            }
        }
    }
    Ok(unions)
}

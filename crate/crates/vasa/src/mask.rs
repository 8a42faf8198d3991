//! Binary raster masks, the uncompressed COCO-style RLE codec, and the
//! Boolean edit engine behind `update_working_mask`.
//!
//! Masks are value-semantic: every operation returns a fresh mask, so
//! callers can keep pre-edit snapshots without defensive copies. Bits are
//! packed into 64-bit blocks row-major; RLE serialization scans
//! column-major (pixel index = `c * height + r`) to stay interchangeable
//! with COCO-style annotations.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Errors from mask construction and Boolean algebra.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum MaskError {
    #[error("mask dimensions must be non-zero, got {width}x{height}")]
    ZeroDimension { width: u32, height: u32 },
    #[error("dimension mismatch: {expected_w}x{expected_h} vs {got_w}x{got_h}")]
    DimensionMismatch {
        expected_w: u32,
        expected_h: u32,
        got_w: u32,
        got_h: u32,
    },
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
    #[error("malformed RLE: {0}")]
    MalformedRle(String),
}

/// A dense binary mask with explicit dimensions.
///
/// Row index `r` runs over `[0, height)`, column index `c` over
/// `[0, width)`. Bits are stored packed; padding bits past
/// `width * height` are always zero so equality and popcounts are exact.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RasterMask {
    width: u32,
    height: u32,
    blocks: Vec<u64>,
}

impl RasterMask {
    /// All-background mask.
    pub fn empty(width: u32, height: u32) -> Result<Self, MaskError> {
        if width == 0 || height == 0 {
            return Err(MaskError::ZeroDimension { width, height });
        }
        let bits = width as usize * height as usize;
        Ok(Self {
            width,
            height,
            blocks: vec![0; bits.div_ceil(64)],
        })
    }

    /// All-foreground mask.
    pub fn full(width: u32, height: u32) -> Result<Self, MaskError> {
        let mut m = Self::empty(width, height)?;
        for b in &mut m.blocks {
            *b = u64::MAX;
        }
        m.clear_padding();
        Ok(m)
    }

    /// Build a mask from a per-pixel predicate.
    pub fn from_fn(
        width: u32,
        height: u32,
        mut f: impl FnMut(u32, u32) -> bool,
    ) -> Result<Self, MaskError> {
        let mut m = Self::empty(width, height)?;
        for r in 0..height {
            for c in 0..width {
                if f(r, c) {
                    m.set(r, c, true);
                }
            }
        }
        Ok(m)
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn dimensions(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    fn bit_index(&self, r: u32, c: u32) -> usize {
        assert!(r < self.height && c < self.width, "pixel out of bounds");
        r as usize * self.width as usize + c as usize
    }

    pub fn get(&self, r: u32, c: u32) -> bool {
        let i = self.bit_index(r, c);
        self.blocks[i / 64] >> (i % 64) & 1 == 1
    }

    pub fn set(&mut self, r: u32, c: u32, value: bool) {
        let i = self.bit_index(r, c);
        if value {
            self.blocks[i / 64] |= 1 << (i % 64);
        } else {
            self.blocks[i / 64] &= !(1 << (i % 64));
        }
    }

    /// Number of foreground pixels.
    pub fn area(&self) -> u64 {
        self.blocks.iter().map(|b| b.count_ones() as u64).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.iter().all(|&b| b == 0)
    }

    fn check_dims(&self, other: &Self) -> Result<(), MaskError> {
        if self.width != other.width || self.height != other.height {
            return Err(MaskError::DimensionMismatch {
                expected_w: self.width,
                expected_h: self.height,
                got_w: other.width,
                got_h: other.height,
            });
        }
        Ok(())
    }

    fn clear_padding(&mut self) {
        let bits = self.width as usize * self.height as usize;
        let rem = bits % 64;
        if rem != 0 {
            if let Some(last) = self.blocks.last_mut() {
                *last &= (1u64 << rem) - 1;
            }
        }
    }

    /// Pixelwise OR.
    pub fn union(&self, other: &Self) -> Result<Self, MaskError> {
        self.check_dims(other)?;
        let mut out = self.clone();
        for (a, b) in out.blocks.iter_mut().zip(&other.blocks) {
            *a |= b;
        }
        Ok(out)
    }

    /// Pixelwise AND.
    pub fn intersect(&self, other: &Self) -> Result<Self, MaskError> {
        self.check_dims(other)?;
        let mut out = self.clone();
        for (a, b) in out.blocks.iter_mut().zip(&other.blocks) {
            *a &= b;
        }
        Ok(out)
    }

    /// Pixels set in `self` and not in `other`.
    pub fn subtract(&self, other: &Self) -> Result<Self, MaskError> {
        self.check_dims(other)?;
        let mut out = self.clone();
        for (a, b) in out.blocks.iter_mut().zip(&other.blocks) {
            *a &= !b;
        }
        Ok(out)
    }

    /// Pixelwise NOT over the bounded grid.
    pub fn complement(&self) -> Self {
        let mut out = self.clone();
        for b in &mut out.blocks {
            *b = !*b;
        }
        out.clear_padding();
        out
    }

    /// True when every foreground pixel of `self` is also set in `other`.
    pub fn is_subset_of(&self, other: &Self) -> Result<bool, MaskError> {
        self.check_dims(other)?;
        Ok(self
            .blocks
            .iter()
            .zip(&other.blocks)
            .all(|(a, b)| a & !b == 0))
    }
}

/// Uncompressed run-length encoding of a binary mask.
///
/// Runs alternate background/foreground in column-major pixel order; the
/// first count is background and is the only count allowed to be zero.
/// Serializes as `{"size":[height,width],"counts":[...]}`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rle {
    width: u32,
    height: u32,
    counts: Vec<u64>,
}

impl Rle {
    /// Validates and wraps raw counts.
    pub fn new(counts: Vec<u64>, width: u32, height: u32) -> Result<Self, MaskError> {
        if width == 0 || height == 0 {
            return Err(MaskError::ZeroDimension { width, height });
        }
        let expected = width as u64 * height as u64;
        let total: u64 = counts.iter().sum();
        if total != expected {
            return Err(MaskError::MalformedRle(format!(
                "counts sum to {total}, expected {expected} for {width}x{height}"
            )));
        }
        for (i, &c) in counts.iter().enumerate() {
            if c == 0 && i != 0 {
                return Err(MaskError::MalformedRle(format!(
                    "zero-length run at position {i}"
                )));
            }
        }
        Ok(Self {
            width,
            height,
            counts,
        })
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    /// Foreground area straight from the odd-indexed runs.
    pub fn area(&self) -> u64 {
        self.counts.iter().skip(1).step_by(2).sum()
    }
}

#[derive(Serialize, Deserialize)]
struct RleWire {
    size: [u32; 2],
    counts: Vec<i64>,
}

impl Serialize for Rle {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        RleWire {
            size: [self.height, self.width],
            counts: self.counts.iter().map(|&c| c as i64).collect(),
        }
        .serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for Rle {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let wire = RleWire::deserialize(deserializer)?;
        if let Some(neg) = wire.counts.iter().find(|&&c| c < 0) {
            return Err(serde::de::Error::custom(format!(
                "malformed RLE: negative count {neg}"
            )));
        }
        let counts = wire.counts.into_iter().map(|c| c as u64).collect();
        Rle::new(counts, wire.size[1], wire.size[0]).map_err(serde::de::Error::custom)
    }
}

/// Encode a mask as uncompressed RLE in column-major scan order.
pub fn rle_encode(mask: &RasterMask) -> Rle {
    let mut counts = Vec::new();
    let mut current = false;
    let mut run: u64 = 0;
    for c in 0..mask.width() {
        for r in 0..mask.height() {
            let v = mask.get(r, c);
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
    Rle {
        width: mask.width(),
        height: mask.height(),
        counts,
    }
}

/// Decode an RLE back into a dense mask, checking it fills `width x height`.
pub fn rle_decode(rle: &Rle, width: u32, height: u32) -> Result<RasterMask, MaskError> {
    if rle.width != width || rle.height != height {
        return Err(MaskError::DimensionMismatch {
            expected_w: width,
            expected_h: height,
            got_w: rle.width,
            got_h: rle.height,
        });
    }
    let mut mask = RasterMask::empty(width, height)?;
    let mut idx: u64 = 0;
    let mut value = false;
    let h = height as u64;
    for &count in &rle.counts {
        if value {
            for i in idx..idx + count {
                let c = (i / h) as u32;
                let r = (i % h) as u32;
                mask.set(r, c, true);
            }
        }
        idx += count;
        value = !value;
    }
    Ok(mask)
}

/// The three working-mask edit operations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EditOp {
    Add,
    Remove,
    Replace,
}

impl std::fmt::Display for EditOp {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            EditOp::Add => write!(f, "add"),
            EditOp::Remove => write!(f, "remove"),
            EditOp::Replace => write!(f, "replace"),
        }
    }
}

/// Union over a non-empty list of same-size masks.
pub fn merge_all(masks: &[RasterMask]) -> Result<RasterMask, MaskError> {
    let (first, rest) = masks
        .split_first()
        .ok_or(MaskError::EmptyInput("merge_all requires at least one mask"))?;
    let mut out = first.clone();
    for m in rest {
        out = out.union(m)?;
    }
    Ok(out)
}

/// Apply one edit to the working mask: the selected masks are unioned
/// first, then added to, removed from, or substituted for the working
/// content. The input mask is never mutated.
pub fn apply_edit(
    working: &RasterMask,
    op: EditOp,
    selected: &[RasterMask],
) -> Result<RasterMask, MaskError> {
    if selected.is_empty() {
        return Err(MaskError::EmptyInput("apply_edit requires selected masks"));
    }
    let merged = merge_all(selected)?;
    working.check_dims(&merged)?;
    match op {
        EditOp::Add => working.union(&merged),
        EditOp::Remove => working.subtract(&merged),
        EditOp::Replace => Ok(merged),
    }
}

//! Run-length encoded segment masks and their decoded bit rasters.
//!
//! Runs are taken over row-major pixel order and alternate background and
//! foreground, starting with background. The canonical encoding always has a
//! leading background run (possibly zero) and no further zero-length runs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A run-length encoded binary mask.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentMask {
    pub width: u32,
    pub height: u32,
    pub runs: Vec<u32>,
}

impl SegmentMask {
    /// Builds a mask after checking that the runs cover the raster exactly.
    pub fn new(width: u32, height: u32, runs: Vec<u32>) -> Result<Self> {
        let mask = SegmentMask {
            width,
            height,
            runs,
        };
        mask.validate()?;
        Ok(mask)
    }

    pub fn validate(&self) -> Result<()> {
        let sum: u64 = self.runs.iter().map(|&r| r as u64).sum();
        let expected = self.width as u64 * self.height as u64;
        if sum != expected {
            return Err(Error::MalformedMask { sum, expected });
        }
        Ok(())
    }

    pub fn pixel_count(&self) -> u64 {
        self.width as u64 * self.height as u64
    }

    /// Foreground pixel count, read straight off the odd runs.
    pub fn area(&self) -> u64 {
        self.runs.iter().skip(1).step_by(2).map(|&r| r as u64).sum()
    }

    /// Canonical encoding of a decoded raster.
    pub fn encode(bits: &Bitmask) -> SegmentMask {
        let mut runs = Vec::new();
        let mut current = false;
        let mut len = 0u32;
        for idx in 0..bits.len() {
            let v = bits.get(idx);
            if v != current {
                runs.push(len);
                len = 0;
                current = v;
            }
            len += 1;
        }
        if len > 0 || runs.is_empty() {
            runs.push(len);
        }
        SegmentMask {
            width: bits.width(),
            height: bits.height(),
            runs,
        }
    }

    pub fn decode(&self) -> Result<Bitmask> {
        decode_rle(self)
    }
}

/// Expands the runs of `mask` into a bit raster.
pub fn decode_rle(mask: &SegmentMask) -> Result<Bitmask> {
    mask.validate()?;
    let mut bits = Bitmask::new(mask.width, mask.height);
    let mut idx = 0usize;
    for (i, &run) in mask.runs.iter().enumerate() {
        let run = run as usize;
        if i % 2 == 1 {
            bits.set_range(idx, idx + run);
        }
        idx += run;
    }
    Ok(bits)
}

/// Intersection over union of two encoded masks. Two empty masks give 0.
pub fn mask_iou(a: &SegmentMask, b: &SegmentMask) -> Result<f64> {
    let a = a.decode()?;
    let b = b.decode()?;
    a.iou(&b)
}

/// Dense bit raster in row-major order, packed into 64-bit words.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Bitmask {
    width: u32,
    height: u32,
    words: Vec<u64>,
}

impl Bitmask {
    pub fn new(width: u32, height: u32) -> Self {
        let n = width as usize * height as usize;
        Bitmask {
            width,
            height,
            words: vec![0; n.div_ceil(64)],
        }
    }

    pub fn full(width: u32, height: u32) -> Self {
        let mut m = Bitmask::new(width, height);
        m.set_range(0, m.len());
        m
    }

    pub fn from_fn(width: u32, height: u32, mut f: impl FnMut(u32, u32) -> bool) -> Self {
        let mut m = Bitmask::new(width, height);
        for y in 0..height {
            for x in 0..width {
                if f(x, y) {
                    m.set_xy(x, y, true);
                }
            }
        }
        m
    }

    /// Axis-aligned rectangle covering `[x0, x1) x [y0, y1)`, clipped to the raster.
    pub fn rect(width: u32, height: u32, x0: u32, y0: u32, x1: u32, y1: u32) -> Self {
        let mut m = Bitmask::new(width, height);
        let (x1, y1) = (x1.min(width), y1.min(height));
        for y in y0..y1 {
            if x0 < x1 {
                let start = (y * width + x0) as usize;
                m.set_range(start, start + (x1 - x0) as usize);
            }
        }
        m
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn len(&self) -> usize {
        self.width as usize * self.height as usize
    }

    pub fn is_empty(&self) -> bool {
        self.words.iter().all(|&w| w == 0)
    }

    pub fn same_shape(&self, other: &Bitmask) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn check_shape(&self, other: &Bitmask) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::DimensionMismatch {
                left_w: self.width,
                left_h: self.height,
                right_w: other.width,
                right_h: other.height,
            })
        }
    }

    #[inline]
    pub fn get(&self, idx: usize) -> bool {
        (self.words[idx >> 6] >> (idx & 63)) & 1 == 1
    }

    #[inline]
    pub fn get_xy(&self, x: u32, y: u32) -> bool {
        self.get((y * self.width + x) as usize)
    }

    #[inline]
    pub fn set(&mut self, idx: usize, value: bool) {
        let bit = 1u64 << (idx & 63);
        if value {
            self.words[idx >> 6] |= bit;
        } else {
            self.words[idx >> 6] &= !bit;
        }
    }

    pub fn set_xy(&mut self, x: u32, y: u32, value: bool) {
        self.set((y * self.width + x) as usize, value);
    }

    /// Sets bits `[start, end)`.
    pub fn set_range(&mut self, start: usize, end: usize) {
        let mut idx = start;
        while idx < end {
            let word = idx >> 6;
            let offset = idx & 63;
            let take = (64 - offset).min(end - idx);
            let bits = if take == 64 {
                u64::MAX
            } else {
                ((1u64 << take) - 1) << offset
            };
            self.words[word] |= bits;
            idx += take;
        }
    }

    pub fn count(&self) -> u64 {
        self.words.iter().map(|w| w.count_ones() as u64).sum()
    }

    /// `|self ∩ other|`; shapes must agree.
    #[inline]
    pub fn and_count(&self, other: &Bitmask) -> u64 {
        self.words
            .iter()
            .zip(&other.words)
            .map(|(a, b)| (a & b).count_ones() as u64)
            .sum()
    }

    /// `|self \ other|`.
    pub fn andnot_count(&self, other: &Bitmask) -> u64 {
        self.words
            .iter()
            .zip(&other.words)
            .map(|(a, b)| (a & !b).count_ones() as u64)
            .sum()
    }

    pub fn or_assign(&mut self, other: &Bitmask) {
        for (a, b) in self.words.iter_mut().zip(&other.words) {
            *a |= b;
        }
    }

    pub fn and_assign(&mut self, other: &Bitmask) {
        for (a, b) in self.words.iter_mut().zip(&other.words) {
            *a &= b;
        }
    }

    pub fn andnot_assign(&mut self, other: &Bitmask) {
        for (a, b) in self.words.iter_mut().zip(&other.words) {
            *a &= !b;
        }
    }

    pub fn and(&self, other: &Bitmask) -> Bitmask {
        let mut out = self.clone();
        out.and_assign(other);
        out
    }

    pub fn andnot(&self, other: &Bitmask) -> Bitmask {
        let mut out = self.clone();
        out.andnot_assign(other);
        out
    }

    pub fn or(&self, other: &Bitmask) -> Bitmask {
        let mut out = self.clone();
        out.or_assign(other);
        out
    }

    pub fn iou(&self, other: &Bitmask) -> Result<f64> {
        self.check_shape(other)?;
        let inter = self.and_count(other);
        let union = self.count() + other.count() - inter;
        Ok(if union == 0 {
            0.0
        } else {
            inter as f64 / union as f64
        })
    }

    /// Indices of set pixels in increasing order.
    pub fn ones(&self) -> impl Iterator<Item = usize> + '_ {
        let n = self.len();
        self.words
            .iter()
            .enumerate()
            .flat_map(|(wi, &w)| {
                let mut w = w;
                std::iter::from_fn(move || {
                    if w == 0 {
                        None
                    } else {
                        let tz = w.trailing_zeros() as usize;
                        w &= w - 1;
                        Some(wi * 64 + tz)
                    }
                })
            })
            .take_while(move |&i| i < n)
    }

    /// Inclusive pixel bounding box `(x0, y0, x1, y1)`, or `None` when empty.
    pub fn bbox(&self) -> Option<(u32, u32, u32, u32)> {
        let mut bounds: Option<(u32, u32, u32, u32)> = None;
        for idx in self.ones() {
            let x = idx as u32 % self.width;
            let y = idx as u32 / self.width;
            bounds = Some(match bounds {
                None => (x, y, x, y),
                Some((x0, y0, x1, y1)) => (x0.min(x), y0.min(y), x1.max(x), y1.max(y)),
            });
        }
        bounds
    }

    /// The mask shifted by `(dx, dy)` pixels; bits leaving the raster are dropped.
    pub fn shifted(&self, dx: i32, dy: i32) -> Bitmask {
        let (w, h) = (self.width as i32, self.height as i32);
        let mut out = Bitmask::new(self.width, self.height);
        for idx in self.ones() {
            let x = idx as i32 % w + dx;
            let y = idx as i32 / w + dy;
            if (0..w).contains(&x) && (0..h).contains(&y) {
                out.set_xy(x as u32, y as u32, true);
            }
        }
        out
    }

    pub fn encode(&self) -> SegmentMask {
        SegmentMask::encode(self)
    }
}

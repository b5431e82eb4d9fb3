//! Saliency masks: background removal, a heuristic mask estimator, mask
//! corruptions for ablations, and the packed mask file format.
//!
//! Mask file layout (little-endian):
//!
//! ```text
//! "SMSK" | count: u32 | height: u16 | width: u16 | count bitmaps
//! ```
//!
//! Each bitmap is row-major with one bit per pixel, most significant bit
//! first, and every row padded to a whole byte.

use std::collections::VecDeque;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng as _;

use super::image::Image;
use crate::error::{Error, Result};
use crate::rng::Rng;

const MAGIC: &[u8; 4] = b"SMSK";

/// Binary foreground map; `true` marks foreground.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SaliencyMask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl SaliencyMask {
    pub fn new(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != height * width {
            return Err(Error::dim("mask", &[height, width], &[bits.len()]));
        }
        Ok(SaliencyMask { height, width, bits })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        SaliencyMask {
            height,
            width,
            bits: vec![false; height * width],
        }
    }

    pub fn full(height: usize, width: usize) -> Self {
        SaliencyMask {
            height,
            width,
            bits: vec![true; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.bits[y * self.width + x] = v;
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn foreground_count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn foreground_fraction(&self) -> f64 {
        self.foreground_count() as f64 / self.bits.len() as f64
    }

    fn fill_rect(&mut self, rect: Rect, value: bool) {
        for y in rect.top..rect.top + rect.height {
            for x in rect.left..rect.left + rect.width {
                self.set(y, x, value);
            }
        }
    }

    /// Smallest axis-aligned rectangle covering the foreground.
    pub fn bounding_box(&self) -> Option<Rect> {
        let mut it = (0..self.height)
            .flat_map(|y| (0..self.width).map(move |x| (y, x)))
            .filter(|&(y, x)| self.get(y, x));
        let (y0, x0) = it.next()?;
        let (mut top, mut bottom, mut left, mut right) = (y0, y0, x0, x0);
        for (y, x) in it {
            top = top.min(y);
            bottom = bottom.max(y);
            left = left.min(x);
            right = right.max(x);
        }
        Some(Rect {
            top,
            left,
            height: bottom - top + 1,
            width: right - left + 1,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Rect {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

/// Replaces background pixels with `level` on every channel when the
/// foreground covers at least `threshold` of the image.
pub fn apply_saliency_mask_with_level(
    img: &Image,
    mask: &SaliencyMask,
    threshold: f64,
    level: f64,
) -> Result<Image> {
    if (mask.height, mask.width) != (img.height(), img.width()) {
        return Err(Error::Contract(format!(
            "mask {}x{} does not match image {}x{}",
            mask.height,
            mask.width,
            img.height(),
            img.width()
        )));
    }
    if mask.foreground_fraction() < threshold {
        return Ok(img.clone());
    }
    let ch = img.channels();
    let mut out = img.clone();
    for (px, &fg) in out.pixels_mut().chunks_exact_mut(ch).zip(&mask.bits) {
        if !fg {
            px.fill(level);
        }
    }
    Ok(out)
}

/// Background removal with a gray level drawn once from U[0, 1].
pub fn apply_saliency_mask(img: &Image, mask: &SaliencyMask, threshold: f64, rng: &mut Rng) -> Result<Image> {
    let level = rng.random::<f64>();
    apply_saliency_mask_with_level(img, mask, threshold, level)
}

fn otsu_threshold(values: &[f64]) -> Option<f64> {
    const BINS: usize = 256;
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi - lo > 1e-9) {
        return None;
    }
    let width = (hi - lo) / BINS as f64;
    let bin = |v: f64| (((v - lo) / width) as usize).min(BINS - 1);
    let mut hist = [0usize; BINS];
    for &v in values {
        hist[bin(v)] += 1;
    }
    let total = values.len() as f64;
    let sum_all: f64 = hist.iter().enumerate().map(|(i, &c)| i as f64 * c as f64).sum();
    let (mut w0, mut sum0) = (0.0, 0.0);
    let (mut best, mut best_t) = (-1.0, 0usize);
    for (t, &c) in hist.iter().enumerate() {
        w0 += c as f64;
        sum0 += t as f64 * c as f64;
        let w1 = total - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let m0 = sum0 / w0;
        let m1 = (sum_all - sum0) / w1;
        let between = w0 * w1 * (m0 - m1) * (m0 - m1);
        if between > best {
            best = between;
            best_t = t;
        }
    }
    Some(lo + (best_t + 1) as f64 * width)
}

fn largest_component(mask: &SaliencyMask) -> SaliencyMask {
    let (h, w) = (mask.height, mask.width);
    let mut label = vec![usize::MAX; h * w];
    let mut best: Vec<usize> = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..h * w {
        if !mask.bits[start] || label[start] != usize::MAX {
            continue;
        }
        let mut members = vec![start];
        label[start] = start;
        queue.push_back(start);
        while let Some(p) = queue.pop_front() {
            let (y, x) = (p / w, p % w);
            let neighbors = [
                (y > 0).then(|| p - w),
                (y + 1 < h).then(|| p + w),
                (x > 0).then(|| p - 1),
                (x + 1 < w).then(|| p + 1),
            ];
            for q in neighbors.into_iter().flatten() {
                if mask.bits[q] && label[q] == usize::MAX {
                    label[q] = start;
                    members.push(q);
                    queue.push_back(q);
                }
            }
        }
        if members.len() > best.len() {
            best = members;
        }
    }
    let mut out = SaliencyMask::empty(h, w);
    for p in best {
        out.bits[p] = true;
    }
    out
}

/// Stand-in saliency estimate: Otsu threshold of each pixel's mean absolute
/// deviation from the border-ring mean colour, keeping the largest
/// 4-connected component.
pub fn heuristic_saliency(img: &Image) -> SaliencyMask {
    let (h, w, ch) = img.dims();
    let mut border = vec![0.0; ch];
    let mut n_border = 0usize;
    for y in 0..h {
        for x in 0..w {
            if y == 0 || x == 0 || y + 1 == h || x + 1 == w {
                border.iter_mut().zip(img.pixel(y, x)).for_each(|(s, v)| *s += v);
                n_border += 1;
            }
        }
    }
    border.iter_mut().for_each(|s| *s /= n_border as f64);
    let deviation: Vec<f64> = img
        .pixels()
        .chunks_exact(ch)
        .map(|px| px.iter().zip(&border).map(|(v, b)| (v - b).abs()).sum::<f64>() / ch as f64)
        .collect();
    let Some(threshold) = otsu_threshold(&deviation) else {
        return SaliencyMask::empty(h, w);
    };
    let bits = deviation.iter().map(|&d| d >= threshold).collect();
    largest_component(&SaliencyMask { height: h, width: w, bits })
}

/// Mask transforms for robustness ablations.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub enum MaskCorruption {
    #[default]
    None,
    /// Every pixel independently foreground with probability 1/2.
    RandomPoints,
    /// A random rectangle replaces the mask.
    RandomRectangle,
    /// A rectangle centered on the image replaces the mask.
    CenteredRectangle,
    /// Adds a centered rectangle covering `fraction` of the mask area.
    AddRectangle { fraction: f64 },
    /// Removes a centered rectangle covering `fraction` of the mask area.
    RemoveRectangle { fraction: f64 },
    /// The mask's bounding box.
    BoundingBox,
}

fn centered_rect(h: usize, w: usize, area: f64) -> Rect {
    let side_h = ((area * h as f64 / w as f64).sqrt().round() as usize).clamp(1, h);
    let side_w = ((area / side_h as f64).round() as usize).clamp(1, w);
    Rect {
        top: (h - side_h) / 2,
        left: (w - side_w) / 2,
        height: side_h,
        width: side_w,
    }
}

impl MaskCorruption {
    pub fn apply(&self, mask: &SaliencyMask, rng: &mut Rng) -> SaliencyMask {
        let (h, w) = (mask.height, mask.width);
        match *self {
            MaskCorruption::None => mask.clone(),
            MaskCorruption::RandomPoints => SaliencyMask {
                height: h,
                width: w,
                bits: (0..h * w).map(|_| rng.random_bool(0.5)).collect(),
            },
            MaskCorruption::RandomRectangle => {
                let rh = rng.random_range(1..=h);
                let rw = rng.random_range(1..=w);
                let rect = Rect {
                    top: rng.random_range(0..=h - rh),
                    left: rng.random_range(0..=w - rw),
                    height: rh,
                    width: rw,
                };
                let mut out = SaliencyMask::empty(h, w);
                out.fill_rect(rect, true);
                out
            }
            MaskCorruption::CenteredRectangle => {
                let rh = rng.random_range(1..=h);
                let rw = rng.random_range(1..=w);
                let mut out = SaliencyMask::empty(h, w);
                out.fill_rect(
                    Rect {
                        top: (h - rh) / 2,
                        left: (w - rw) / 2,
                        height: rh,
                        width: rw,
                    },
                    true,
                );
                out
            }
            MaskCorruption::AddRectangle { fraction } | MaskCorruption::RemoveRectangle { fraction } => {
                let mut out = mask.clone();
                let area = fraction * mask.foreground_count() as f64;
                if area >= 1.0 {
                    let add = matches!(self, MaskCorruption::AddRectangle { .. });
                    out.fill_rect(centered_rect(h, w, area), add);
                }
                out
            }
            MaskCorruption::BoundingBox => {
                let mut out = SaliencyMask::empty(h, w);
                if let Some(rect) = mask.bounding_box() {
                    out.fill_rect(rect, true);
                }
                out
            }
        }
    }
}

pub fn write_masks(path: &Path, masks: &[SaliencyMask]) -> Result<()> {
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&encode_masks(masks)?)
        .map_err(|e| Error::io(path, e))
}

pub fn encode_masks(masks: &[SaliencyMask]) -> Result<Vec<u8>> {
    let (h, w) = masks.first().map_or((0, 0), |m| (m.height, m.width));
    if h > u16::MAX as usize || w > u16::MAX as usize || masks.len() > u32::MAX as usize {
        return Err(Error::Format("mask dimensions exceed header range".into()));
    }
    let row_bytes = w.div_ceil(8);
    let mut out = Vec::with_capacity(12 + masks.len() * h * row_bytes);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(masks.len() as u32).to_le_bytes());
    out.extend_from_slice(&(h as u16).to_le_bytes());
    out.extend_from_slice(&(w as u16).to_le_bytes());
    for m in masks {
        if (m.height, m.width) != (h, w) {
            return Err(Error::Format("all masks in a file must share dimensions".into()));
        }
        for y in 0..h {
            let mut row = vec![0u8; row_bytes];
            for x in 0..w {
                if m.get(y, x) {
                    row[x / 8] |= 0x80 >> (x % 8);
                }
            }
            out.extend_from_slice(&row);
        }
    }
    Ok(out)
}

pub fn decode_masks(bytes: &[u8]) -> Result<Vec<SaliencyMask>> {
    if bytes.len() < 12 || &bytes[..4] != MAGIC {
        return Err(Error::Format("not a mask file (bad magic)".into()));
    }
    let count = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let h = u16::from_le_bytes([bytes[8], bytes[9]]) as usize;
    let w = u16::from_le_bytes([bytes[10], bytes[11]]) as usize;
    let row_bytes = w.div_ceil(8);
    let expected = 12 + count * h * row_bytes;
    if bytes.len() != expected {
        return Err(Error::Format(format!(
            "mask file has {} bytes, header implies {expected}",
            bytes.len()
        )));
    }
    let mut masks = Vec::with_capacity(count);
    let mut offset = 12;
    for _ in 0..count {
        let mut bits = Vec::with_capacity(h * w);
        for _ in 0..h {
            let row = &bytes[offset..offset + row_bytes];
            bits.extend((0..w).map(|x| row[x / 8] & (0x80 >> (x % 8)) != 0));
            offset += row_bytes;
        }
        masks.push(SaliencyMask { height: h, width: w, bits });
    }
    Ok(masks)
}

pub fn read_masks(path: &Path) -> Result<Vec<SaliencyMask>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    decode_masks(&bytes)
}

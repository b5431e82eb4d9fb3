//! Images and the photometric/geometric primitives applied to them.

use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Luminance weights for RGB → gray.
pub const GRAY_WEIGHTS: [f64; 3] = [0.2989, 0.5870, 0.1140];

/// Row-major, channel-interleaved image with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    pixels: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, pixels: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || !(channels == 1 || channels == 3) {
            return Err(Error::Contract(format!(
                "invalid image geometry {height}x{width}x{channels}"
            )));
        }
        if pixels.len() != height * width * channels {
            return Err(Error::dim("image", &[height, width, channels], &[pixels.len()]));
        }
        Ok(Image {
            height,
            width,
            channels,
            pixels,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Self {
        Image {
            height,
            width,
            channels,
            pixels: vec![value; height * width * channels],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [f64] {
        &mut self.pixels
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn at(&self, y: usize, x: usize, c: usize) -> f64 {
        self.pixels[(y * self.width + x) * self.channels + c]
    }

    pub fn pixel(&self, y: usize, x: usize) -> &[f64] {
        let i = (y * self.width + x) * self.channels;
        &self.pixels[i..i + self.channels]
    }

    fn pixel_mut(&mut self, y: usize, x: usize) -> &mut [f64] {
        let i = (y * self.width + x) * self.channels;
        &mut self.pixels[i..i + self.channels]
    }

    pub fn in_unit_range(&self) -> bool {
        self.pixels.iter().all(|v| (0.0..=1.0).contains(v))
    }

    fn clamp(mut self) -> Self {
        self.pixels.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        self
    }

    fn luminance(px: &[f64]) -> f64 {
        match px.len() {
            3 => GRAY_WEIGHTS[0] * px[0] + GRAY_WEIGHTS[1] * px[1] + GRAY_WEIGHTS[2] * px[2],
            _ => px[0],
        }
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Image> {
        if height == 0 || width == 0 || top + height > self.height || left + width > self.width {
            return Err(Error::Contract(format!(
                "crop {height}x{width}+{top}+{left} outside {}x{}",
                self.height, self.width
            )));
        }
        let mut pixels = Vec::with_capacity(height * width * self.channels);
        for y in top..top + height {
            let start = (y * self.width + left) * self.channels;
            pixels.extend_from_slice(&self.pixels[start..start + width * self.channels]);
        }
        Image::new(height, width, self.channels, pixels)
    }

    pub fn flip_horizontal(&self) -> Image {
        let mut out = self.clone();
        for y in 0..self.height {
            for x in 0..self.width {
                out.pixel_mut(y, x)
                    .copy_from_slice(self.pixel(y, self.width - 1 - x));
            }
        }
        out
    }

    /// Bicubic resampling (Keys kernel, a = −0.5) with half-pixel centers and
    /// edge clamping; output clamped to `[0, 1]`.
    pub fn resize(&self, out_h: usize, out_w: usize) -> Result<Image> {
        if out_h == 0 || out_w == 0 {
            return Err(Error::Config("resize target must be positive".into()));
        }
        if (out_h, out_w) == (self.height, self.width) {
            return Ok(self.clone());
        }
        let rows = resample_axis(self, out_h, true);
        let cols = resample_axis(&rows, out_w, false);
        Ok(cols.clamp())
    }

    /// Flattened pixel values in storage order.
    pub fn flatten(&self) -> &[f64] {
        &self.pixels
    }
}

fn cubic_weight(t: f64) -> f64 {
    const A: f64 = -0.5;
    let t = t.abs();
    if t <= 1.0 {
        ((A + 2.0) * t - (A + 3.0)) * t * t + 1.0
    } else if t < 2.0 {
        ((A * t - 5.0 * A) * t + 8.0 * A) * t - 4.0 * A
    } else {
        0.0
    }
}

/// Resample one axis; `vertical` selects rows.
fn resample_axis(img: &Image, out_len: usize, vertical: bool) -> Image {
    let in_len = if vertical { img.height } else { img.width };
    let (out_h, out_w) = if vertical {
        (out_len, img.width)
    } else {
        (img.height, out_len)
    };
    let ch = img.channels;
    let mut out = Image::filled(out_h, out_w, ch, 0.0);
    if in_len == out_len {
        return img.clone();
    }
    let scale = in_len as f64 / out_len as f64;
    let taps: Vec<([usize; 4], [f64; 4])> = (0..out_len)
        .map(|o| {
            let src = (o as f64 + 0.5) * scale - 0.5;
            let base = src.floor();
            let frac = src - base;
            let mut idx = [0usize; 4];
            let mut w = [0.0; 4];
            for k in 0..4 {
                let i = base as i64 + k as i64 - 1;
                idx[k] = i.clamp(0, in_len as i64 - 1) as usize;
                w[k] = cubic_weight(frac - (k as f64 - 1.0));
            }
            (idx, w)
        })
        .collect();
    for y in 0..out_h {
        for x in 0..out_w {
            let (idx, w) = if vertical { &taps[y] } else { &taps[x] };
            for c in 0..ch {
                let mut acc = 0.0;
                for k in 0..4 {
                    let (sy, sx) = if vertical { (idx[k], x) } else { (y, idx[k]) };
                    acc += w[k] * img.at(sy, sx, c);
                }
                out.pixels[(y * out_w + x) * ch + c] = acc;
            }
        }
    }
    out
}

/// Random patch with area fraction ~ U[area_range] and log-uniform aspect
/// ratio, resized to `out_size × out_size`. Up to ten samples are tried before
/// falling back to the largest centered crop within the aspect range.
pub fn random_resized_crop(
    img: &Image,
    out_size: usize,
    area_range: (f64, f64),
    aspect_range: (f64, f64),
    rng: &mut Rng,
) -> Result<Image> {
    if out_size == 0 {
        return Err(Error::Config("crop size must be positive".into()));
    }
    let (h, w) = (img.height as f64, img.width as f64);
    let area = h * w;
    let (log_lo, log_hi) = (aspect_range.0.ln(), aspect_range.1.ln());
    for _ in 0..10 {
        let target = area * rng.random_range(area_range.0..=area_range.1);
        let ratio = rng.random_range(log_lo..=log_hi).exp();
        let cw = (target * ratio).sqrt().round() as usize;
        let ch = (target / ratio).sqrt().round() as usize;
        if cw > 0 && ch > 0 && cw <= img.width && ch <= img.height {
            let top = rng.random_range(0..=img.height - ch);
            let left = rng.random_range(0..=img.width - cw);
            return img.crop(top, left, ch, cw)?.resize(out_size, out_size);
        }
    }
    let in_ratio = w / h;
    let (cw, ch) = if in_ratio < aspect_range.0 {
        (img.width, ((w / aspect_range.0).round() as usize).max(1))
    } else if in_ratio > aspect_range.1 {
        (((h * aspect_range.1).round() as usize).max(1), img.height)
    } else {
        (img.width, img.height)
    };
    let top = (img.height - ch) / 2;
    let left = (img.width - cw) / 2;
    img.crop(top, left, ch, cw)?.resize(out_size, out_size)
}

/// Maximum adjustments for colour jitter.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct JitterStrength {
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum JitterOp {
    Brightness,
    Contrast,
    Saturation,
    Hue,
}

/// Adds `delta` to every channel.
pub fn adjust_brightness(img: &Image, delta: f64) -> Image {
    let mut out = img.clone();
    out.pixels.iter_mut().for_each(|v| *v += delta);
    out.clamp()
}

/// Scales around the mean luminance by `1 + u`.
pub fn adjust_contrast(img: &Image, u: f64) -> Image {
    let n = (img.height * img.width) as f64;
    let mean = img
        .pixels
        .chunks_exact(img.channels)
        .map(Image::luminance)
        .sum::<f64>()
        / n;
    let mut out = img.clone();
    out.pixels
        .iter_mut()
        .for_each(|v| *v = mean + (1.0 + u) * (*v - mean));
    out.clamp()
}

/// Scales around each pixel's gray value by `1 + u`. No-op on one channel.
pub fn adjust_saturation(img: &Image, u: f64) -> Image {
    if img.channels == 1 {
        return img.clone();
    }
    let mut out = img.clone();
    for px in out.pixels.chunks_exact_mut(3) {
        let g = Image::luminance(px);
        px.iter_mut().for_each(|v| *v = g + (1.0 + u) * (*v - g));
    }
    out.clamp()
}

/// Rotates hue by `shift` turns in HSV space. No-op on one channel.
pub fn adjust_hue(img: &Image, shift: f64) -> Image {
    if img.channels == 1 {
        return img.clone();
    }
    let mut out = img.clone();
    for px in out.pixels.chunks_exact_mut(3) {
        let (h, s, v) = rgb_to_hsv(px[0], px[1], px[2]);
        let (r, g, b) = hsv_to_rgb((h + shift).rem_euclid(1.0), s, v);
        px.copy_from_slice(&[r, g, b]);
    }
    out.clamp()
}

fn rgb_to_hsv(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / d).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    (h, s, max)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> (f64, f64, f64) {
    let h6 = h * 6.0;
    let sector = h6.floor();
    let f = h6 - sector;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match (sector as i64).rem_euclid(6) {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

/// Applies the four adjustments in a shuffled order, each with a factor drawn
/// uniformly from `[−a, a]`. Draw order: shuffle, then one factor per op in
/// the shuffled order.
pub fn color_jitter(img: &Image, strength: &JitterStrength, rng: &mut Rng) -> Image {
    let mut order = [
        JitterOp::Brightness,
        JitterOp::Contrast,
        JitterOp::Saturation,
        JitterOp::Hue,
    ];
    order.shuffle(rng);
    let mut out = img.clone();
    for op in order {
        let a = match op {
            JitterOp::Brightness => strength.brightness,
            JitterOp::Contrast => strength.contrast,
            JitterOp::Saturation => strength.saturation,
            JitterOp::Hue => strength.hue,
        };
        let u = rng.random_range(-a..=a);
        if u == 0.0 {
            continue;
        }
        out = match op {
            JitterOp::Brightness => adjust_brightness(&out, u),
            JitterOp::Contrast => adjust_contrast(&out, u),
            JitterOp::Saturation => adjust_saturation(&out, u),
            JitterOp::Hue => adjust_hue(&out, u),
        };
    }
    out
}

pub fn to_grayscale(img: &Image) -> Result<Image> {
    if img.channels != 3 {
        return Err(Error::Contract(format!(
            "grayscale needs 3 channels, got {}",
            img.channels
        )));
    }
    let mut out = img.clone();
    for px in out.pixels.chunks_exact_mut(3) {
        let g = Image::luminance(px);
        px.fill(g);
    }
    Ok(out.clamp())
}

/// Odd kernel length for one axis: at most `max_len`, at most the axis length.
fn kernel_len(max_len: usize, side: usize) -> usize {
    let largest_odd = if side % 2 == 1 { side } else { side - 1 };
    max_len.min(largest_odd).max(1)
}

fn gaussian_kernel(len: usize, sigma: f64) -> Vec<f64> {
    let r = (len / 2) as f64;
    let mut k: Vec<f64> = (0..len)
        .map(|i| {
            let d = i as f64 - r;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable Gaussian blur with replicate padding.
pub fn gaussian_blur_sigma(img: &Image, sigma: f64, max_kernel: usize) -> Image {
    let kh = gaussian_kernel(kernel_len(max_kernel, img.height), sigma);
    let kw = gaussian_kernel(kernel_len(max_kernel, img.width), sigma);
    let pass = |src: &Image, kernel: &[f64], vertical: bool| -> Image {
        let r = (kernel.len() / 2) as i64;
        let mut out = src.clone();
        let (h, w, ch) = src.dims();
        for y in 0..h {
            for x in 0..w {
                for c in 0..ch {
                    let mut acc = 0.0;
                    for (k, wt) in kernel.iter().enumerate() {
                        let off = k as i64 - r;
                        let (sy, sx) = if vertical {
                            ((y as i64 + off).clamp(0, h as i64 - 1) as usize, x)
                        } else {
                            (y, (x as i64 + off).clamp(0, w as i64 - 1) as usize)
                        };
                        acc += wt * src.at(sy, sx, c);
                    }
                    out.pixels[(y * w + x) * ch + c] = acc;
                }
            }
        }
        out
    };
    let horizontal = pass(img, &kw, false);
    pass(&horizontal, &kh, true).clamp()
}

/// Blur with σ ~ U[sigma_range].
pub fn gaussian_blur(img: &Image, sigma_range: (f64, f64), max_kernel: usize, rng: &mut Rng) -> Image {
    let sigma = rng.random_range(sigma_range.0..=sigma_range.1);
    gaussian_blur_sigma(img, sigma, max_kernel)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum SolarizeMode {
    /// Thresholding: `v < 0.5 → 0`, otherwise `1`.
    #[default]
    Threshold,
    /// Inversion above the threshold: `v ≥ 0.5 → 1 − v`.
    Invert,
}

pub fn solarize(img: &Image, mode: SolarizeMode) -> Image {
    let mut out = img.clone();
    out.pixels.iter_mut().for_each(|v| {
        *v = match mode {
            SolarizeMode::Threshold => {
                if *v < 0.5 {
                    0.0
                } else {
                    1.0
                }
            }
            SolarizeMode::Invert => {
                if *v >= 0.5 {
                    1.0 - *v
                } else {
                    *v
                }
            }
        }
    });
    out
}

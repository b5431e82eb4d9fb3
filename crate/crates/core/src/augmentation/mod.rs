//! Multi-crop view generation.
//!
//! Every image yields `L` large and `S` small views. Large views may first
//! have their background replaced (probability `mask_prob`), then each view
//! is cropped and passed through the photometric pipeline with the parameter
//! set of its parity: the first, third, ... view of each size uses the odd
//! set, the second, fourth, ... the even set.

mod image;
mod saliency;

pub use image::{
    adjust_brightness, adjust_contrast, adjust_hue, adjust_saturation, color_jitter, gaussian_blur,
    gaussian_blur_sigma, random_resized_crop, solarize, to_grayscale, Image, JitterOp, JitterStrength,
    SolarizeMode, GRAY_WEIGHTS,
};
pub use saliency::{
    apply_saliency_mask, apply_saliency_mask_with_level, decode_masks, encode_masks, heuristic_saliency,
    read_masks, write_masks, MaskCorruption, Rect, SaliencyMask,
};

use log::warn;
use rand::Rng as _;

use crate::error::{Error, Result};
use crate::objective::LossConfig;
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Parity {
    Odd,
    Even,
}

impl Parity {
    /// Parity of the zero-based `index`-th view of a size class.
    pub fn of_view(index: usize) -> Self {
        if index % 2 == 0 {
            Parity::Odd
        } else {
            Parity::Even
        }
    }
}

/// Probabilities and strengths for one view parity.
#[derive(Clone, Debug, PartialEq)]
pub struct ParityParams {
    pub flip_prob: f64,
    pub jitter_prob: f64,
    pub grayscale_prob: f64,
    pub blur_prob: f64,
    pub solarize_prob: f64,
    pub jitter: JitterStrength,
    /// Area fraction range for large crops.
    pub large_area: (f64, f64),
}

impl ParityParams {
    fn table(blur_prob: f64, solarize_prob: f64, large_area: (f64, f64)) -> Self {
        ParityParams {
            flip_prob: 0.5,
            jitter_prob: 0.8,
            grayscale_prob: 0.2,
            blur_prob,
            solarize_prob,
            jitter: JitterStrength {
                brightness: 0.4,
                contrast: 0.4,
                saturation: 0.2,
                hue: 0.1,
            },
            large_area,
        }
    }

    pub fn even() -> Self {
        Self::table(1.0, 0.0, (0.08, 1.0))
    }

    pub fn odd() -> Self {
        Self::table(0.1, 0.2, (0.14, 1.0))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentationConfig {
    pub even: ParityParams,
    pub odd: ParityParams,
    pub large_size: usize,
    pub small_size: usize,
    pub small_area: (f64, f64),
    pub aspect: (f64, f64),
    /// Listed in the parameter table; cropping is always applied.
    pub crop_prob: f64,
    pub crops_enabled: bool,
    pub blur_sigma: (f64, f64),
    pub blur_kernel: usize,
    pub solarize_mode: SolarizeMode,
    pub mask_prob: f64,
    pub foreground_threshold: f64,
    pub mask_corruption: MaskCorruption,
}

impl AugmentationConfig {
    /// Full-resolution parameter table (224/96 crops).
    pub fn imagenet() -> Self {
        AugmentationConfig {
            even: ParityParams::even(),
            odd: ParityParams::odd(),
            large_size: 224,
            small_size: 96,
            small_area: (0.05, 0.14),
            aspect: (3.0 / 4.0, 4.0 / 3.0),
            crop_prob: 0.5,
            crops_enabled: true,
            blur_sigma: (0.1, 2.0),
            blur_kernel: 23,
            solarize_mode: SolarizeMode::Threshold,
            mask_prob: 0.1,
            foreground_threshold: 0.05,
            mask_corruption: MaskCorruption::None,
        }
    }

    /// Same table at 32/16 crops.
    pub fn cifar() -> Self {
        AugmentationConfig {
            large_size: 32,
            small_size: 16,
            ..Self::imagenet()
        }
    }

    pub fn params(&self, parity: Parity) -> &ParityParams {
        match parity {
            Parity::Odd => &self.odd,
            Parity::Even => &self.even,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let prob = |name: &str, p: f64| -> Result<()> {
            if (0.0..=1.0).contains(&p) {
                Ok(())
            } else {
                Err(Error::Config(format!("{name}={p} is not a probability")))
            }
        };
        let area = |name: &str, (lo, hi): (f64, f64)| -> Result<()> {
            if lo > 0.0 && lo <= hi && hi <= 1.0 {
                Ok(())
            } else {
                Err(Error::Config(format!("{name}=({lo}, {hi}) must lie in (0, 1]")))
            }
        };
        for (tag, p) in [("even", &self.even), ("odd", &self.odd)] {
            prob(&format!("{tag}.flip_prob"), p.flip_prob)?;
            prob(&format!("{tag}.jitter_prob"), p.jitter_prob)?;
            prob(&format!("{tag}.grayscale_prob"), p.grayscale_prob)?;
            prob(&format!("{tag}.blur_prob"), p.blur_prob)?;
            prob(&format!("{tag}.solarize_prob"), p.solarize_prob)?;
            area(&format!("{tag}.large_area"), p.large_area)?;
            let j = &p.jitter;
            if [j.brightness, j.contrast, j.saturation, j.hue].iter().any(|v| !(*v >= 0.0)) {
                return Err(Error::Config(format!("{tag} jitter strengths must be non-negative")));
            }
        }
        prob("crop_prob", self.crop_prob)?;
        prob("mask_prob", self.mask_prob)?;
        prob("foreground_threshold", self.foreground_threshold)?;
        area("small_area", self.small_area)?;
        if self.large_size == 0 || self.small_size == 0 {
            return Err(Error::Config("crop sizes must be positive".into()));
        }
        if self.large_size <= self.small_size {
            return Err(Error::Config(format!(
                "large crop {} must exceed small crop {}",
                self.large_size, self.small_size
            )));
        }
        if !(self.aspect.0 > 0.0 && self.aspect.0 <= self.aspect.1) {
            return Err(Error::Config(format!("invalid aspect range {:?}", self.aspect)));
        }
        if !(self.blur_sigma.0 > 0.0 && self.blur_sigma.0 <= self.blur_sigma.1) {
            return Err(Error::Config(format!("invalid blur sigma range {:?}", self.blur_sigma)));
        }
        if self.blur_kernel % 2 == 0 {
            return Err(Error::Config("blur kernel size must be odd".into()));
        }
        Ok(())
    }
}

/// What happened to one view.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ViewRecord {
    pub odd: bool,
    pub mask_applied: bool,
    pub flipped: bool,
    pub jittered: bool,
    pub grayscaled: bool,
    pub blurred: bool,
    pub solarized: bool,
}

/// Views of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewEntry {
    pub large: Vec<Image>,
    pub small: Vec<Image>,
    pub large_records: Vec<ViewRecord>,
    pub small_records: Vec<ViewRecord>,
    pub stream_id: u64,
}

fn photometric(img: Image, p: &ParityParams, cfg: &AugmentationConfig, rng: &mut Rng, rec: &mut ViewRecord) -> Image {
    let mut img = img;
    rec.flipped = rng.random_bool(p.flip_prob);
    if rec.flipped {
        img = img.flip_horizontal();
    }
    rec.jittered = rng.random_bool(p.jitter_prob);
    if rec.jittered {
        img = color_jitter(&img, &p.jitter, rng);
    }
    rec.grayscaled = rng.random_bool(p.grayscale_prob);
    if rec.grayscaled && img.channels() == 3 {
        img = to_grayscale(&img).expect("three channels");
    }
    rec.blurred = rng.random_bool(p.blur_prob);
    if rec.blurred {
        img = gaussian_blur(&img, cfg.blur_sigma, cfg.blur_kernel, rng);
    }
    rec.solarized = rng.random_bool(p.solarize_prob);
    if rec.solarized {
        img = solarize(&img, cfg.solarize_mode);
    }
    img
}

fn crop(img: &Image, size: usize, area: (f64, f64), cfg: &AugmentationConfig, rng: &mut Rng) -> Result<Image> {
    if cfg.crops_enabled {
        random_resized_crop(img, size, area, cfg.aspect, rng)
    } else {
        Ok(img.clone())
    }
}

/// Generates all views of one image.
///
/// Draw order from `rng`, fixed:
/// 1. when `mask_prob > 0`: the background gray level, then the mask
///    corruption's draws (if any);
/// 2. for each large view: the mask Bernoulli (when `mask_prob > 0`), crop
///    draws, then flip, jitter (+ shuffle and factors), grayscale, blur
///    (+ σ), solarize;
/// 3. for each small view: crop draws, then the same photometric sequence.
///
/// Small views are cropped from the unmasked image.
pub fn generate_views(
    img: &Image,
    mask: Option<&SaliencyMask>,
    cfg: &AugmentationConfig,
    loss: &LossConfig,
    rng: &mut Rng,
    stream_id: u64,
) -> Result<ViewEntry> {
    let masked = if cfg.mask_prob > 0.0 {
        let estimated;
        let mask = match mask {
            Some(m) => m,
            None => {
                warn!("no saliency mask for image stream {stream_id}; using heuristic estimate");
                estimated = heuristic_saliency(img);
                &estimated
            }
        };
        let level = rng.random::<f64>();
        let mask = cfg.mask_corruption.apply(mask, rng);
        Some(apply_saliency_mask_with_level(img, &mask, cfg.foreground_threshold, level)?)
    } else {
        None
    };

    let mut entry = ViewEntry {
        large: Vec::with_capacity(loss.num_large_crops),
        small: Vec::with_capacity(loss.num_small_crops),
        large_records: Vec::with_capacity(loss.num_large_crops),
        small_records: Vec::with_capacity(loss.num_small_crops),
        stream_id,
    };
    for i in 0..loss.num_large_crops {
        let parity = Parity::of_view(i);
        let p = cfg.params(parity);
        let mut rec = ViewRecord {
            odd: parity == Parity::Odd,
            ..ViewRecord::default()
        };
        let source = match &masked {
            Some(m) => {
                rec.mask_applied = rng.random_bool(cfg.mask_prob);
                if rec.mask_applied {
                    m
                } else {
                    img
                }
            }
            None => img,
        };
        let view = crop(source, cfg.large_size, p.large_area, cfg, rng)?;
        entry.large.push(photometric(view, p, cfg, rng, &mut rec));
        entry.large_records.push(rec);
    }
    for i in 0..loss.num_small_crops {
        let parity = Parity::of_view(i);
        let p = cfg.params(parity);
        let mut rec = ViewRecord {
            odd: parity == Parity::Odd,
            ..ViewRecord::default()
        };
        let view = crop(img, cfg.small_size, cfg.small_area, cfg, rng)?;
        entry.small.push(photometric(view, p, cfg, rng, &mut rec));
        entry.small_records.push(rec);
    }
    Ok(entry)
}

/// Views for a minibatch, one entry per image.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ViewBatch {
    pub entries: Vec<ViewEntry>,
}

impl ViewBatch {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn check_counts(&self, large: usize, small: usize) -> Result<()> {
        for e in &self.entries {
            if e.large.len() != large || e.small.len() != small {
                return Err(Error::Contract(format!(
                    "view entry has {}+{} views, loss expects {large}+{small}",
                    e.large.len(),
                    e.small.len()
                )));
            }
        }
        Ok(())
    }

    fn flatten_into(view: &Image, like: &Image, width: usize, out: &mut Vec<f64>) -> Result<()> {
        let fitted;
        let v = if (view.height(), view.width()) != (like.height(), like.width()) {
            fitted = view.resize(like.height(), like.width())?;
            &fitted
        } else {
            view
        };
        if v.flatten().len() != width {
            return Err(Error::dim("flatten view", &[v.flatten().len()], &[width]));
        }
        out.extend_from_slice(v.flatten());
        Ok(())
    }

    /// All views, image-major, large before small: `[B·(L+S) × width]`.
    /// Small views are resized to the large-view resolution first.
    pub fn online_matrix(&self, width: usize) -> Result<Tensor> {
        let mut data = Vec::new();
        let mut rows = 0;
        for e in &self.entries {
            let like = e
                .large
                .first()
                .ok_or_else(|| Error::Config("at least one large view required".into()))?;
            for v in e.large.iter().chain(&e.small) {
                Self::flatten_into(v, like, width, &mut data)?;
                rows += 1;
            }
        }
        Tensor::matrix(rows, width, data)
    }

    /// Large views only: `[B·L × width]`.
    pub fn target_matrix(&self, width: usize) -> Result<Tensor> {
        let mut data = Vec::new();
        let mut rows = 0;
        for e in &self.entries {
            for v in &e.large {
                Self::flatten_into(v, v, width, &mut data)?;
                rows += 1;
            }
        }
        Tensor::matrix(rows, width, data)
    }
}

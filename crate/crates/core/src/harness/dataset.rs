//! Datasets: CIFAR-10 binary files and synthetic mirrored clusters.

use std::path::Path;

use rand::Rng as _;
use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};

use crate::augmentation::{Image, SaliencyMask};
use crate::error::{Error, Result};
use crate::rng::{self, Purpose};
use crate::tensor::Tensor;

pub const CIFAR_SIDE: usize = 32;
pub const CIFAR_CLASSES: usize = 10;
pub const CIFAR_RECORD: usize = 1 + 3 * CIFAR_SIDE * CIFAR_SIDE;

/// Images with optional labels and masks.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    images: Vec<Image>,
    labels: Option<Vec<usize>>,
    masks: Option<Vec<SaliencyMask>>,
    num_classes: usize,
}

/// Label-free view handed to pretraining.
#[derive(Clone, Copy, Debug)]
pub struct UnlabeledDataset<'a> {
    images: &'a [Image],
    masks: Option<&'a [SaliencyMask]>,
}

impl<'a> UnlabeledDataset<'a> {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn image(&self, i: usize) -> &'a Image {
        &self.images[i]
    }

    pub fn mask(&self, i: usize) -> Option<&'a SaliencyMask> {
        self.masks.map(|m| &m[i])
    }
}

impl Dataset {
    pub fn new(images: Vec<Image>, labels: Option<Vec<usize>>, num_classes: usize) -> Result<Self> {
        if let Some(labels) = &labels {
            if labels.len() != images.len() {
                return Err(Error::dim("dataset labels", &[images.len()], &[labels.len()]));
            }
            if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
                return Err(Error::Format(format!("label {bad} outside [0, {num_classes})")));
            }
        }
        Ok(Dataset {
            images,
            labels,
            masks: None,
            num_classes,
        })
    }

    pub fn with_masks(mut self, masks: Vec<SaliencyMask>) -> Result<Self> {
        if masks.len() != self.images.len() {
            return Err(Error::dim("dataset masks", &[self.images.len()], &[masks.len()]));
        }
        for (img, m) in self.images.iter().zip(&masks) {
            if (img.height(), img.width()) != (m.height(), m.width()) {
                return Err(Error::dim(
                    "dataset masks",
                    &[img.height(), img.width()],
                    &[m.height(), m.width()],
                ));
            }
        }
        self.masks = Some(masks);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn images(&self) -> &[Image] {
        &self.images
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    pub fn masks(&self) -> Option<&[SaliencyMask]> {
        self.masks.as_deref()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn unlabeled(&self) -> UnlabeledDataset<'_> {
        UnlabeledDataset {
            images: &self.images,
            masks: self.masks.as_deref(),
        }
    }

    /// Splits into the first `n` items and the rest.
    pub fn split_at(&self, n: usize) -> Result<(Dataset, Dataset)> {
        if n > self.len() {
            return Err(Error::Config(format!("split at {n} beyond {} items", self.len())));
        }
        let part = |r: std::ops::Range<usize>| Dataset {
            images: self.images[r.clone()].to_vec(),
            labels: self.labels.as_ref().map(|l| l[r.clone()].to_vec()),
            masks: self.masks.as_ref().map(|m| m[r.clone()].to_vec()),
            num_classes: self.num_classes,
        };
        Ok((part(0..n), part(n..self.len())))
    }

    /// Splits off the leading `fraction` of items as the training split.
    pub fn train_val(&self, fraction: f64) -> Result<(Dataset, Dataset)> {
        if !(0.0..=1.0).contains(&fraction) {
            return Err(Error::Config(format!("train fraction {fraction} outside [0, 1]")));
        }
        self.split_at((self.len() as f64 * fraction).round() as usize)
    }

    /// Flattened images as an `N × (h·w·c)` matrix.
    pub fn flat_matrix(&self) -> Result<Tensor> {
        let width = self.images.first().map_or(0, |i| i.pixels().len());
        let mut data = Vec::with_capacity(width * self.len());
        for img in &self.images {
            if img.pixels().len() != width {
                return Err(Error::dim("flat_matrix", &[width], &[img.pixels().len()]));
            }
            data.extend_from_slice(img.flatten());
        }
        Tensor::matrix(self.len(), width, data)
    }

    /// Copy with labels permuted by `seed`.
    pub fn with_shuffled_labels(&self, seed: u64) -> Dataset {
        let mut out = self.clone();
        if let Some(labels) = &mut out.labels {
            labels.shuffle(&mut rng::stream(seed, Purpose::Data, 1, 0));
        }
        out
    }
}

/// Reads CIFAR-10 binary records: one label byte then 3072 channel-planar
/// pixel bytes.
pub fn load_cifar10_binary(path: &Path) -> Result<Dataset> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_cifar10(&bytes)
}

pub fn decode_cifar10(bytes: &[u8]) -> Result<Dataset> {
    if bytes.len() % CIFAR_RECORD != 0 {
        return Err(Error::Format(format!(
            "{} bytes is not a whole number of {CIFAR_RECORD}-byte records",
            bytes.len()
        )));
    }
    let plane = CIFAR_SIDE * CIFAR_SIDE;
    let mut images = Vec::with_capacity(bytes.len() / CIFAR_RECORD);
    let mut labels = Vec::with_capacity(images.capacity());
    for (i, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        let label = rec[0] as usize;
        if label >= CIFAR_CLASSES {
            return Err(Error::Format(format!("record {i}: label {label} outside [0, {CIFAR_CLASSES})")));
        }
        let px = &rec[1..];
        let mut pixels = Vec::with_capacity(3 * plane);
        for p in 0..plane {
            for c in 0..3 {
                pixels.push(px[c * plane + p] as f64 / 255.0);
            }
        }
        images.push(Image::new(CIFAR_SIDE, CIFAR_SIDE, 3, pixels)?);
        labels.push(label);
    }
    Dataset::new(images, Some(labels), CIFAR_CLASSES)
}

/// Inverse of [`decode_cifar10`]. Pixels are quantized to bytes.
pub fn encode_cifar10(data: &Dataset) -> Result<Vec<u8>> {
    let labels = data
        .labels()
        .ok_or_else(|| Error::Contract("CIFAR records need labels".into()))?;
    let plane = CIFAR_SIDE * CIFAR_SIDE;
    let mut out = Vec::with_capacity(data.len() * CIFAR_RECORD);
    for (img, &label) in data.images().iter().zip(labels) {
        if img.dims() != (CIFAR_SIDE, CIFAR_SIDE, 3) {
            let (h, w, c) = img.dims();
            return Err(Error::dim("encode_cifar10", &[CIFAR_SIDE, CIFAR_SIDE, 3], &[h, w, c]));
        }
        if label >= CIFAR_CLASSES {
            return Err(Error::Format(format!("label {label} outside [0, {CIFAR_CLASSES})")));
        }
        out.push(label as u8);
        for c in 0..3 {
            for p in 0..plane {
                out.push((img.pixels()[p * 3 + c] * 255.0).round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    Ok(out)
}

pub fn write_cifar10_binary(path: &Path, data: &Dataset) -> Result<()> {
    std::fs::write(path, encode_cifar10(data)?).map_err(|e| Error::io(path, e))
}

/// Synthetic cluster parameters.
///
/// Class means sit evenly on a circle of radius `radius` whose center lies
/// `offset` along a smooth mirror-antisymmetric direction; the circle's other
/// axis is a smooth mirror-symmetric direction (cosine and sine waves of at
/// most `signal_freq` cycles about the vector's center). Each sample is the
/// class mean plus isotropic noise of scale `spread` plus `texture` noise
/// restricted to frequencies of at least `texture_freq` cycles, then reversed
/// along its length with probability `mirror_prob`.
///
/// Reversal reflects the antisymmetric coordinate, so mirrored samples fall on
/// a reflected circle with the opposite orientation and classes at angles
/// `φ` and `−φ` become nested along that axis: no linear rule on raw vectors
/// separates them, while any flip-invariant map does. Texture dominates raw
/// distances but is removed by blurring.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub num_classes: usize,
    pub per_class: usize,
    pub dim: usize,
    pub spread: f64,
    pub radius: f64,
    pub offset: f64,
    pub mirror_prob: f64,
    pub texture: f64,
    pub signal_freq: usize,
    pub texture_freq: usize,
    /// Pixel value per unit of latent coordinate, around a 0.5 gray level.
    pub pixel_scale: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_classes: 8,
            per_class: 500,
            dim: 32,
            spread: 0.2,
            radius: 2.0,
            offset: 3.0,
            mirror_prob: 0.5,
            texture: 0.5,
            signal_freq: 1,
            texture_freq: 4,
            pixel_scale: 0.1,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.spread > 0.0) {
            return Err(Error::Config(format!("spread must be positive, got {}", self.spread)));
        }
        if self.num_classes < 2 || self.per_class == 0 {
            return Err(Error::Config("need at least two classes with one point each".into()));
        }
        if self.dim < 4 {
            return Err(Error::Config("synthetic dimension must be at least 4".into()));
        }
        if !(0.0..=1.0).contains(&self.mirror_prob) {
            return Err(Error::Config(format!("mirror_prob {} outside [0, 1]", self.mirror_prob)));
        }
        if !(self.radius > 0.0 && self.offset >= 0.0) {
            return Err(Error::Config(format!(
                "need radius > 0 and offset >= 0, got {} and {}",
                self.radius, self.offset
            )));
        }
        if !(self.texture >= 0.0) {
            return Err(Error::Config(format!("texture must be non-negative, got {}", self.texture)));
        }
        if self.signal_freq == 0 || self.signal_freq >= self.texture_freq || self.texture_freq > self.dim / 2 {
            return Err(Error::Config(format!(
                "need 1 <= signal_freq < texture_freq <= dim/2, got {} and {}",
                self.signal_freq, self.texture_freq
            )));
        }
        Ok(())
    }
}

/// Synthetic dataset plus its latent geometry.
#[derive(Clone, Debug)]
pub struct SynthData {
    pub dataset: Dataset,
    /// Class means in latent units.
    pub means: Vec<Vec<f64>>,
    /// Per-sample latent vectors after mirroring.
    pub latents: Vec<Vec<f64>>,
}

/// Unit wave of `f` cycles, phase-centered so `cos` waves are mirror
/// symmetric and `sin` waves antisymmetric. Returns `None` when it vanishes.
fn wave(dim: usize, f: usize, sine: bool) -> Option<Vec<f64>> {
    let v: Vec<f64> = (0..dim)
        .map(|i| {
            let t = 2.0 * std::f64::consts::PI * f as f64 * (i as f64 + 0.5 - dim as f64 / 2.0) / dim as f64;
            if sine {
                t.sin()
            } else {
                t.cos()
            }
        })
        .collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    (n > 1e-9).then(|| v.iter().map(|x| x / n).collect())
}

fn random_combination(basis: &[Vec<f64>], rng: &mut rng::Rng) -> Vec<f64> {
    let mut v = vec![0.0; basis[0].len()];
    for b in basis {
        let c: f64 = StandardNormal.sample(rng);
        v.iter_mut().zip(b).for_each(|(x, y)| *x += c * y);
    }
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / n).collect()
}

/// Draws the synthetic dataset; samples come in a seeded random order.
pub fn synth_clusters(cfg: &SynthConfig) -> Result<SynthData> {
    cfg.validate()?;
    let mut rng = rng::stream(cfg.seed, Purpose::Data, 0, 0);
    let low = |sine| (1..=cfg.signal_freq).filter_map(|f| wave(cfg.dim, f, sine)).collect::<Vec<_>>();
    let sym = random_combination(&low(false), &mut rng);
    let anti = random_combination(&low(true), &mut rng);
    let high: Vec<Vec<f64>> = (cfg.texture_freq..=cfg.dim / 2)
        .flat_map(|f| [wave(cfg.dim, f, false), wave(cfg.dim, f, true)])
        .flatten()
        .collect();
    let k = cfg.num_classes as f64;
    let means: Vec<Vec<f64>> = (0..cfg.num_classes)
        .map(|c| {
            let phi = 2.0 * std::f64::consts::PI * (c as f64 + 0.5) / k;
            let (s, a) = (cfg.radius * phi.cos(), cfg.offset + cfg.radius * phi.sin());
            sym.iter().zip(&anti).map(|(u, v)| s * u + a * v).collect()
        })
        .collect();

    let mut order: Vec<usize> = (0..cfg.num_classes * cfg.per_class).map(|i| i % cfg.num_classes).collect();
    order.shuffle(&mut rng);
    let mut images = Vec::with_capacity(order.len());
    let mut latents = Vec::with_capacity(order.len());
    for &label in &order {
        let mut z: Vec<f64> = means[label]
            .iter()
            .map(|m| m + cfg.spread * Distribution::<f64>::sample(&StandardNormal, &mut rng))
            .collect();
        for b in &high {
            let c = cfg.texture * Distribution::<f64>::sample(&StandardNormal, &mut rng);
            z.iter_mut().zip(b).for_each(|(x, y)| *x += c * y);
        }
        if rng.random_bool(cfg.mirror_prob) {
            z.reverse();
        }
        let pixels = z
            .iter()
            .map(|v| (0.5 + cfg.pixel_scale * v).clamp(0.0, 1.0))
            .collect();
        images.push(Image::new(1, cfg.dim, 1, pixels)?);
        latents.push(z);
    }
    Ok(SynthData {
        dataset: Dataset::new(images, Some(order), cfg.num_classes)?,
        means,
        latents,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig {
            num_classes: 4,
            per_class: 20,
            dim: 8,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn synth_is_reproducible() {
        let a = synth_clusters(&small()).unwrap();
        let b = synth_clusters(&small()).unwrap();
        assert_eq!(a.dataset, b.dataset);
        let c = synth_clusters(&SynthConfig { seed: 9, ..small() }).unwrap();
        assert_ne!(a.dataset, c.dataset);
    }

    #[test]
    fn synth_mean_geometry() {
        let cfg = small();
        let d = synth_clusters(&cfg).unwrap();
        for i in 0..cfg.num_classes {
            for j in 0..cfg.num_classes {
                let dist = d.means[i]
                    .iter()
                    .zip(&d.means[j])
                    .map(|(a, b)| (a - b).powi(2))
                    .sum::<f64>()
                    .sqrt();
                let dphi = 2.0 * std::f64::consts::PI * (i as f64 - j as f64).abs() / cfg.num_classes as f64;
                let expected = 2.0 * cfg.radius * (dphi / 2.0).sin();
                assert!((dist - expected).abs() < 1e-9, "{i} {j}: {dist} vs {expected}");
            }
        }
    }

    #[test]
    fn synth_tiny_spread_collapses_classes() {
        let cfg = SynthConfig {
            spread: 1e-12,
            texture: 0.0,
            mirror_prob: 0.0,
            ..small()
        };
        let d = synth_clusters(&cfg).unwrap();
        let labels = d.dataset.labels().unwrap();
        for (z, &l) in d.latents.iter().zip(labels) {
            let dist: f64 = z.iter().zip(&d.means[l]).map(|(a, b)| (a - b).abs()).sum();
            assert!(dist < 1e-9);
        }
    }

    #[test]
    fn synth_mirror_reflects_mean() {
        let cfg = SynthConfig {
            spread: 1e-12,
            texture: 0.0,
            mirror_prob: 1.0,
            ..small()
        };
        let d = synth_clusters(&cfg).unwrap();
        let labels = d.dataset.labels().unwrap();
        let mut reflected = d.means[labels[0]].clone();
        reflected.reverse();
        let dist: f64 = d.latents[0].iter().zip(&reflected).map(|(a, b)| (a - b).abs()).sum();
        assert!(dist < 1e-9);
    }

    #[test]
    fn waves_are_orthonormal_with_symmetry() {
        let dim = 12;
        let all: Vec<(Vec<f64>, bool)> = (0..=dim / 2)
            .flat_map(|f| [(wave(dim, f, false), false), (wave(dim, f, true), true)])
            .filter_map(|(w, s)| w.map(|w| (w, s)))
            .collect();
        assert_eq!(all.len(), dim);
        for (i, (a, sine)) in all.iter().enumerate() {
            for (j, (b, _)) in all.iter().enumerate() {
                let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                assert!((dot - if i == j { 1.0 } else { 0.0 }).abs() < 1e-12);
            }
            let sign = if *sine { -1.0 } else { 1.0 };
            for t in 0..dim {
                assert!((a[t] - sign * a[dim - 1 - t]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn synth_rejects_bad_spread() {
        assert!(synth_clusters(&SynthConfig { spread: 0.0, ..small() }).is_err());
    }

    #[test]
    fn cifar_round_trip_and_errors() {
        let mut bytes = Vec::new();
        for r in 0..3u8 {
            bytes.push(r);
            bytes.extend((0..3072).map(|i| ((i * 7 + r as usize) % 256) as u8));
        }
        let d = decode_cifar10(&bytes).unwrap();
        assert_eq!(d.len(), 3);
        assert_eq!(d.images()[0].dims(), (32, 32, 3));
        assert_eq!(d.labels().unwrap(), &[0, 1, 2]);
        // red plane first in the file, channel 0 in memory
        assert_eq!(d.images()[1].at(0, 1, 0), (7 + 1) as f64 / 255.0);
        assert_eq!(encode_cifar10(&d).unwrap(), bytes);

        assert!(matches!(decode_cifar10(&bytes[..100]), Err(Error::Format(_))));
        let mut bad = bytes.clone();
        bad[0] = 255;
        assert!(matches!(decode_cifar10(&bad), Err(Error::Format(_))));
    }

    #[test]
    fn split_and_shuffle() {
        let d = synth_clusters(&small()).unwrap().dataset;
        let (a, b) = d.train_val(0.75).unwrap();
        assert_eq!((a.len(), b.len()), (60, 20));
        assert_eq!(a.images()[0], d.images()[0]);
        let s = d.with_shuffled_labels(3);
        let mut x = s.labels().unwrap().to_vec();
        let mut y = d.labels().unwrap().to_vec();
        assert_ne!(x, y);
        x.sort();
        y.sort();
        assert_eq!(x, y);
    }

    #[test]
    fn label_out_of_range_rejected() {
        let img = Image::filled(1, 2, 1, 0.0);
        assert!(Dataset::new(vec![img], Some(vec![3]), 3).is_err());
    }
}

//! Run configuration and its flat `key = value` text format.
//!
//! Lines are `key = value`; `#` starts a comment; blank lines are ignored.
//! A `preset` line, wherever it appears, selects the starting values and all
//! other keys override them. Unknown or repeated keys are errors. Lists are
//! comma separated and ranges are written `lo,hi`.
//!
//! | key | meaning |
//! |-----|---------|
//! | `preset` | `synth`, `cifar-small` or `imagenet` |
//! | `seed` | base seed for every random stream |
//! | `gamma` | EMA coefficient of the target network |
//! | `dataset.kind` | `synth`, `cifar10` or `external` (no loader) |
//! | `dataset.path` | CIFAR-10 binary file |
//! | `dataset.masks` | optional saliency mask file |
//! | `dataset.train_fraction` | leading share of items used for training |
//! | `synth.*` | `num_classes`, `per_class`, `dim`, `spread`, `radius`, `offset`, `mirror_prob`, `texture`, `signal_freq`, `texture_freq`, `pixel_scale`, `seed` |
//! | `network.encoder`, `network.projector` | layer widths |
//! | `network.normalize` | L2-normalize projector outputs |
//! | `loss.*` | `alpha`, `beta`, `tau`, `n_negatives`, `num_large_crops`, `num_small_crops` |
//! | `schedule.*` | `base_lr`, `total_steps`, `warmup_steps`, `batch_size` |
//! | `lars.*` | `momentum`, `weight_decay`, `trust_coefficient`, `exclude_rank1` |
//! | `aug.*` | `large_size`, `small_size`, `small_area`, `aspect`, `crop_prob`, `crops_enabled`, `blur_sigma`, `blur_kernel`, `solarize_mode`, `mask_prob`, `foreground_threshold`, `mask_corruption` |
//! | `aug.even.*`, `aug.odd.*` | `flip_prob`, `jitter_prob`, `grayscale_prob`, `blur_prob`, `solarize_prob`, `brightness`, `contrast`, `saturation`, `hue`, `large_area` |
//! | `probe.*` | `epochs`, `lr`, `batch_size`, `momentum`, `seed` |
//! | `output.checkpoint_every` | steps between checkpoints, 0 disables |
//! | `output.checkpoint` | checkpoint path |
//! | `output.metrics` | metrics CSV path |
//!
//! `aug.solarize_mode` is `threshold` or `invert`. `aug.mask_corruption` is
//! one of `none`, `random_points`, `random_rectangle`, `centered_rectangle`,
//! `bounding_box`, `add_rectangle:<fraction>`, `remove_rectangle:<fraction>`.

use std::collections::HashSet;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::augmentation::{read_masks, AugmentationConfig, JitterStrength, MaskCorruption, ParityParams, SolarizeMode};
use crate::error::{Error, Result};
use crate::harness::dataset::{load_cifar10_binary, synth_clusters, Dataset, SynthConfig, CIFAR_SIDE};
use crate::harness::probe::ProbeConfig;
use crate::networks::NetworkSpec;
use crate::objective::LossConfig;
use crate::optimizer::{LarsConfig, ScheduleConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DatasetKind {
    Synth,
    Cifar10,
    External,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub preset: String,
    pub seed: u64,
    pub gamma: f64,
    pub dataset: DatasetKind,
    pub dataset_path: Option<PathBuf>,
    pub masks_path: Option<PathBuf>,
    pub train_fraction: f64,
    pub synth: SynthConfig,
    pub network: NetworkSpec,
    pub loss: LossConfig,
    pub schedule: ScheduleConfig,
    pub lars: LarsConfig,
    pub aug: AugmentationConfig,
    pub probe: ProbeConfig,
    pub checkpoint_every: u64,
    pub checkpoint_path: Option<PathBuf>,
    pub metrics_path: Option<PathBuf>,
}

pub const PRESETS: [&str; 3] = ["synth", "cifar-small", "imagenet"];

fn photometric_only(blur_prob: f64) -> ParityParams {
    ParityParams {
        flip_prob: 0.5,
        jitter_prob: 0.8,
        grayscale_prob: 0.0,
        blur_prob,
        solarize_prob: 0.0,
        jitter: JitterStrength {
            brightness: 0.1,
            contrast: 0.2,
            saturation: 0.0,
            hue: 0.0,
        },
        large_area: (1.0, 1.0),
    }
}

impl RunConfig {
    /// Eight mirrored clusters in 32 dimensions, photometric views only.
    pub fn synth() -> Self {
        let synth = SynthConfig {
            mirror_prob: 0.1,
            texture: 0.3,
            ..SynthConfig::default()
        };
        let dim = synth.dim;
        RunConfig {
            preset: "synth".into(),
            seed: 0,
            gamma: 0.99,
            dataset: DatasetKind::Synth,
            dataset_path: None,
            masks_path: None,
            train_fraction: 0.8,
            synth,
            network: NetworkSpec::new(vec![dim, 128, 64], vec![64, 64, 32]),
            loss: LossConfig {
                tau: 0.1,
                num_large_crops: 2,
                num_small_crops: 0,
                ..LossConfig::default()
            },
            schedule: ScheduleConfig {
                base_lr: 2.0,
                total_steps: 1500,
                warmup_steps: 15,
                batch_size: 128,
            },
            lars: LarsConfig::default(),
            aug: AugmentationConfig {
                even: photometric_only(0.5),
                odd: photometric_only(0.5),
                blur_sigma: (1.0, 2.0),
                large_size: dim,
                small_size: dim / 2,
                crops_enabled: false,
                mask_prob: 0.0,
                ..AugmentationConfig::cifar()
            },
            probe: ProbeConfig {
                lr: 0.01,
                ..ProbeConfig::default()
            },
            checkpoint_every: 0,
            checkpoint_path: None,
            metrics_path: None,
        }
    }

    /// CIFAR-10 at 32/16 crops with four large and two small views.
    pub fn cifar_small() -> Self {
        let batch = 128;
        let total = 100 * (50_000 / batch) as u64;
        RunConfig {
            preset: "cifar-small".into(),
            dataset: DatasetKind::Cifar10,
            dataset_path: Some(PathBuf::from("data_batch_1.bin")),
            train_fraction: 0.8,
            network: NetworkSpec::new(vec![CIFAR_SIDE * CIFAR_SIDE * 3, 512, 128], vec![128, 128, 64]),
            loss: LossConfig::default(),
            schedule: ScheduleConfig {
                base_lr: 0.3 * batch as f64 / 256.0,
                total_steps: total,
                warmup_steps: total / 100,
                batch_size: batch,
            },
            aug: AugmentationConfig::cifar(),
            ..Self::synth()
        }
    }

    /// Full-resolution parameter table; far beyond desk scale.
    pub fn imagenet() -> Self {
        let batch = 4096;
        let total = 1000 * 1_281_167 / batch as u64;
        RunConfig {
            preset: "imagenet".into(),
            dataset: DatasetKind::External,
            dataset_path: None,
            network: NetworkSpec::new(vec![224 * 224 * 3, 2048, 2048], vec![2048, 4096, 256]),
            schedule: ScheduleConfig {
                base_lr: 0.3 * batch as f64 / 256.0,
                total_steps: total,
                warmup_steps: total / 100,
                batch_size: batch,
            },
            aug: AugmentationConfig::imagenet(),
            ..Self::cifar_small()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "synth" => Ok(Self::synth()),
            "cifar-small" => Ok(Self::cifar_small()),
            "imagenet" => Ok(Self::imagenet()),
            other => Err(Error::Config(format!(
                "unknown preset {other:?}; expected one of {}",
                PRESETS.join(", ")
            ))),
        }
    }

    /// Width of a flattened large view for the configured dataset.
    pub fn expected_input_width(&self) -> Option<usize> {
        match self.dataset {
            DatasetKind::Synth => Some(self.synth.dim),
            DatasetKind::Cifar10 => {
                let side = if self.aug.crops_enabled { self.aug.large_size } else { CIFAR_SIDE };
                Some(side * side * 3)
            }
            DatasetKind::External => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        self.loss.validate(self.schedule.batch_size)?;
        self.schedule.validate()?;
        self.lars.validate()?;
        self.aug.validate()?;
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::Config(format!("gamma {} outside [0, 1]", self.gamma)));
        }
        if self.dataset == DatasetKind::Synth {
            self.synth.validate()?;
        }
        if let Some(w) = self.expected_input_width() {
            if w != self.network.input_width() {
                return Err(Error::Config(format!(
                    "encoder input width {} does not match flattened view width {w}",
                    self.network.input_width()
                )));
            }
        }
        if self.dataset == DatasetKind::Synth && self.aug.crops_enabled {
            return Err(Error::Config("synthetic vectors support photometric views only; set aug.crops_enabled = false".into()));
        }
        if self.loss.num_small_crops > 0 && !self.aug.crops_enabled {
            return Err(Error::Config("small views require aug.crops_enabled".into()));
        }
        if !(0.0..=1.0).contains(&self.train_fraction) {
            return Err(Error::Config(format!("train_fraction {} outside [0, 1]", self.train_fraction)));
        }
        Ok(())
    }

    /// Parses the text format. The result is validated.
    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected `key = value`, got {raw:?}", lineno + 1))
            })?;
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        }
        let mut seen = HashSet::new();
        for (k, _) in &pairs {
            if !seen.insert(k.as_str()) {
                return Err(Error::Config(format!("key {k:?} given more than once")));
            }
        }
        let preset = pairs
            .iter()
            .find(|(k, _)| k == "preset")
            .map_or("synth", |(_, v)| v.as_str());
        let mut cfg = Self::preset(preset)?;
        for (k, v) in &pairs {
            if k != "preset" {
                cfg.set(k, v)?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Serializes every key; `parse(to_text())` reproduces `self`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.entries() {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }

    fn entries(&self) -> Vec<(String, String)> {
        let mut e: Vec<(String, String)> = Vec::new();
        let mut put = |k: &str, v: String| e.push((k.to_string(), v));
        put("preset", self.preset.clone());
        put("seed", self.seed.to_string());
        put("gamma", self.gamma.to_string());
        put("dataset.kind", dataset_kind_name(self.dataset).into());
        put("dataset.path", path_text(&self.dataset_path));
        put("dataset.masks", path_text(&self.masks_path));
        put("dataset.train_fraction", self.train_fraction.to_string());
        let s = &self.synth;
        put("synth.num_classes", s.num_classes.to_string());
        put("synth.per_class", s.per_class.to_string());
        put("synth.dim", s.dim.to_string());
        put("synth.spread", s.spread.to_string());
        put("synth.radius", s.radius.to_string());
        put("synth.offset", s.offset.to_string());
        put("synth.mirror_prob", s.mirror_prob.to_string());
        put("synth.texture", s.texture.to_string());
        put("synth.signal_freq", s.signal_freq.to_string());
        put("synth.texture_freq", s.texture_freq.to_string());
        put("synth.pixel_scale", s.pixel_scale.to_string());
        put("synth.seed", s.seed.to_string());
        put("network.encoder", join(&self.network.encoder));
        put("network.projector", join(&self.network.projector));
        put("network.normalize", self.network.normalize_embeddings.to_string());
        let l = &self.loss;
        put("loss.alpha", l.alpha.to_string());
        put("loss.beta", l.beta.to_string());
        put("loss.tau", l.tau.to_string());
        put("loss.n_negatives", l.n_negatives.to_string());
        put("loss.num_large_crops", l.num_large_crops.to_string());
        put("loss.num_small_crops", l.num_small_crops.to_string());
        let sc = &self.schedule;
        put("schedule.base_lr", sc.base_lr.to_string());
        put("schedule.total_steps", sc.total_steps.to_string());
        put("schedule.warmup_steps", sc.warmup_steps.to_string());
        put("schedule.batch_size", sc.batch_size.to_string());
        let la = &self.lars;
        put("lars.momentum", la.momentum.to_string());
        put("lars.weight_decay", la.weight_decay.to_string());
        put("lars.trust_coefficient", la.trust_coefficient.to_string());
        put("lars.exclude_rank1", la.exclude_rank1.to_string());
        let a = &self.aug;
        put("aug.large_size", a.large_size.to_string());
        put("aug.small_size", a.small_size.to_string());
        put("aug.small_area", pair(a.small_area));
        put("aug.aspect", pair(a.aspect));
        put("aug.crop_prob", a.crop_prob.to_string());
        put("aug.crops_enabled", a.crops_enabled.to_string());
        put("aug.blur_sigma", pair(a.blur_sigma));
        put("aug.blur_kernel", a.blur_kernel.to_string());
        put("aug.solarize_mode", solarize_name(a.solarize_mode).into());
        put("aug.mask_prob", a.mask_prob.to_string());
        put("aug.foreground_threshold", a.foreground_threshold.to_string());
        put("aug.mask_corruption", corruption_name(&a.mask_corruption));
        for (name, p) in [("even", &a.even), ("odd", &a.odd)] {
            let mut q = |k: &str, v: String| put(&format!("aug.{name}.{k}"), v);
            q("flip_prob", p.flip_prob.to_string());
            q("jitter_prob", p.jitter_prob.to_string());
            q("grayscale_prob", p.grayscale_prob.to_string());
            q("blur_prob", p.blur_prob.to_string());
            q("solarize_prob", p.solarize_prob.to_string());
            q("brightness", p.jitter.brightness.to_string());
            q("contrast", p.jitter.contrast.to_string());
            q("saturation", p.jitter.saturation.to_string());
            q("hue", p.jitter.hue.to_string());
            q("large_area", pair(p.large_area));
        }
        let p = &self.probe;
        put("probe.epochs", p.epochs.to_string());
        put("probe.lr", p.lr.to_string());
        put("probe.batch_size", p.batch_size.to_string());
        put("probe.momentum", p.momentum.to_string());
        put("probe.seed", p.seed.to_string());
        put("output.checkpoint_every", self.checkpoint_every.to_string());
        put("output.checkpoint", path_text(&self.checkpoint_path));
        put("output.metrics", path_text(&self.metrics_path));
        e
    }

    /// Sets one key from its text value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value;
        if let Some(rest) = key.strip_prefix("aug.even.") {
            return set_parity(&mut self.aug.even, rest, key, v);
        }
        if let Some(rest) = key.strip_prefix("aug.odd.") {
            return set_parity(&mut self.aug.odd, rest, key, v);
        }
        match key {
            "preset" => self.preset = v.to_string(),
            "seed" => self.seed = num(key, v)?,
            "gamma" => self.gamma = num(key, v)?,
            "dataset.kind" => {
                self.dataset = match v {
                    "synth" => DatasetKind::Synth,
                    "cifar10" => DatasetKind::Cifar10,
                    "external" => DatasetKind::External,
                    _ => return Err(bad(key, v)),
                }
            }
            "dataset.path" => self.dataset_path = opt_path(v),
            "dataset.masks" => self.masks_path = opt_path(v),
            "dataset.train_fraction" => self.train_fraction = num(key, v)?,
            "synth.num_classes" => self.synth.num_classes = num(key, v)?,
            "synth.per_class" => self.synth.per_class = num(key, v)?,
            "synth.dim" => self.synth.dim = num(key, v)?,
            "synth.spread" => self.synth.spread = num(key, v)?,
            "synth.radius" => self.synth.radius = num(key, v)?,
            "synth.offset" => self.synth.offset = num(key, v)?,
            "synth.mirror_prob" => self.synth.mirror_prob = num(key, v)?,
            "synth.texture" => self.synth.texture = num(key, v)?,
            "synth.signal_freq" => self.synth.signal_freq = num(key, v)?,
            "synth.texture_freq" => self.synth.texture_freq = num(key, v)?,
            "synth.pixel_scale" => self.synth.pixel_scale = num(key, v)?,
            "synth.seed" => self.synth.seed = num(key, v)?,
            "network.encoder" => self.network.encoder = list(key, v)?,
            "network.projector" => self.network.projector = list(key, v)?,
            "network.normalize" => self.network.normalize_embeddings = num(key, v)?,
            "loss.alpha" => self.loss.alpha = num(key, v)?,
            "loss.beta" => self.loss.beta = num(key, v)?,
            "loss.tau" => self.loss.tau = num(key, v)?,
            "loss.n_negatives" => self.loss.n_negatives = num(key, v)?,
            "loss.num_large_crops" => self.loss.num_large_crops = num(key, v)?,
            "loss.num_small_crops" => self.loss.num_small_crops = num(key, v)?,
            "schedule.base_lr" => self.schedule.base_lr = num(key, v)?,
            "schedule.total_steps" => self.schedule.total_steps = num(key, v)?,
            "schedule.warmup_steps" => self.schedule.warmup_steps = num(key, v)?,
            "schedule.batch_size" => self.schedule.batch_size = num(key, v)?,
            "lars.momentum" => self.lars.momentum = num(key, v)?,
            "lars.weight_decay" => self.lars.weight_decay = num(key, v)?,
            "lars.trust_coefficient" => self.lars.trust_coefficient = num(key, v)?,
            "lars.exclude_rank1" => self.lars.exclude_rank1 = num(key, v)?,
            "aug.large_size" => self.aug.large_size = num(key, v)?,
            "aug.small_size" => self.aug.small_size = num(key, v)?,
            "aug.small_area" => self.aug.small_area = range(key, v)?,
            "aug.aspect" => self.aug.aspect = range(key, v)?,
            "aug.crop_prob" => self.aug.crop_prob = num(key, v)?,
            "aug.crops_enabled" => self.aug.crops_enabled = num(key, v)?,
            "aug.blur_sigma" => self.aug.blur_sigma = range(key, v)?,
            "aug.blur_kernel" => self.aug.blur_kernel = num(key, v)?,
            "aug.solarize_mode" => {
                self.aug.solarize_mode = match v {
                    "threshold" => SolarizeMode::Threshold,
                    "invert" => SolarizeMode::Invert,
                    _ => return Err(bad(key, v)),
                }
            }
            "aug.mask_prob" => self.aug.mask_prob = num(key, v)?,
            "aug.foreground_threshold" => self.aug.foreground_threshold = num(key, v)?,
            "aug.mask_corruption" => self.aug.mask_corruption = parse_corruption(key, v)?,
            "probe.epochs" => self.probe.epochs = num(key, v)?,
            "probe.lr" => self.probe.lr = num(key, v)?,
            "probe.batch_size" => self.probe.batch_size = num(key, v)?,
            "probe.momentum" => self.probe.momentum = num(key, v)?,
            "probe.seed" => self.probe.seed = num(key, v)?,
            "output.checkpoint_every" => self.checkpoint_every = num(key, v)?,
            "output.checkpoint" => self.checkpoint_path = opt_path(v),
            "output.metrics" => self.metrics_path = opt_path(v),
            _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Loads the configured dataset, attaching masks when `dataset.masks` is set.
    pub fn load_dataset(&self) -> Result<Dataset> {
        let data = match self.dataset {
            DatasetKind::Synth => synth_clusters(&self.synth)?.dataset,
            DatasetKind::Cifar10 => {
                let path = self
                    .dataset_path
                    .as_deref()
                    .ok_or_else(|| Error::Config("dataset.path is required for cifar10".into()))?;
                load_cifar10_binary(path)?
            }
            DatasetKind::External => {
                return Err(Error::Config("external datasets have no built-in loader".into()));
            }
        };
        match &self.masks_path {
            Some(p) => data.with_masks(read_masks(p)?),
            None => Ok(data),
        }
    }
}

fn set_parity(p: &mut ParityParams, field: &str, key: &str, v: &str) -> Result<()> {
    match field {
        "flip_prob" => p.flip_prob = num(key, v)?,
        "jitter_prob" => p.jitter_prob = num(key, v)?,
        "grayscale_prob" => p.grayscale_prob = num(key, v)?,
        "blur_prob" => p.blur_prob = num(key, v)?,
        "solarize_prob" => p.solarize_prob = num(key, v)?,
        "brightness" => p.jitter.brightness = num(key, v)?,
        "contrast" => p.jitter.contrast = num(key, v)?,
        "saturation" => p.jitter.saturation = num(key, v)?,
        "hue" => p.jitter.hue = num(key, v)?,
        "large_area" => p.large_area = range(key, v)?,
        _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
    }
    Ok(())
}

fn bad(key: &str, v: &str) -> Error {
    Error::Config(format!("invalid value {v:?} for {key}"))
}

fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| bad(key, v))
}

fn list(key: &str, v: &str) -> Result<Vec<usize>> {
    v.split(',').map(|s| num(key, s.trim())).collect()
}

fn range(key: &str, v: &str) -> Result<(f64, f64)> {
    let (a, b) = v.split_once(',').ok_or_else(|| bad(key, v))?;
    Ok((num(key, a.trim())?, num(key, b.trim())?))
}

fn join<T: Display>(xs: &[T]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn pair(r: (f64, f64)) -> String {
    format!("{},{}", r.0, r.1)
}

fn opt_path(v: &str) -> Option<PathBuf> {
    (!v.is_empty()).then(|| PathBuf::from(v))
}

fn path_text(p: &Option<PathBuf>) -> String {
    p.as_ref().map_or(String::new(), |p| p.display().to_string())
}

fn dataset_kind_name(k: DatasetKind) -> &'static str {
    match k {
        DatasetKind::Synth => "synth",
        DatasetKind::Cifar10 => "cifar10",
        DatasetKind::External => "external",
    }
}

fn solarize_name(m: SolarizeMode) -> &'static str {
    match m {
        SolarizeMode::Threshold => "threshold",
        SolarizeMode::Invert => "invert",
    }
}

fn corruption_name(c: &MaskCorruption) -> String {
    match c {
        MaskCorruption::None => "none".into(),
        MaskCorruption::RandomPoints => "random_points".into(),
        MaskCorruption::RandomRectangle => "random_rectangle".into(),
        MaskCorruption::CenteredRectangle => "centered_rectangle".into(),
        MaskCorruption::BoundingBox => "bounding_box".into(),
        MaskCorruption::AddRectangle { fraction } => format!("add_rectangle:{fraction}"),
        MaskCorruption::RemoveRectangle { fraction } => format!("remove_rectangle:{fraction}"),
    }
}

fn parse_corruption(key: &str, v: &str) -> Result<MaskCorruption> {
    let (name, arg) = match v.split_once(':') {
        Some((n, a)) => (n, Some(a)),
        None => (v, None),
    };
    let fraction = || -> Result<f64> { num(key, arg.ok_or_else(|| bad(key, v))?) };
    Ok(match name {
        "none" => MaskCorruption::None,
        "random_points" => MaskCorruption::RandomPoints,
        "random_rectangle" => MaskCorruption::RandomRectangle,
        "centered_rectangle" => MaskCorruption::CenteredRectangle,
        "bounding_box" => MaskCorruption::BoundingBox,
        "add_rectangle" => MaskCorruption::AddRectangle { fraction: fraction()? },
        "remove_rectangle" => MaskCorruption::RemoveRectangle { fraction: fraction()? },
        _ => return Err(bad(key, v)),
    })
}

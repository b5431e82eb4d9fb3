//! Linear evaluation on frozen features.

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::harness::dataset::Dataset;
use crate::networks::NetworkPair;
use crate::optimizer::{cosine_lr, sgd_nesterov_step, ScheduleConfig, SgdState};
use crate::rng::{self, Purpose};
use crate::tensor::{self, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub momentum: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            epochs: 100,
            lr: 0.1,
            batch_size: 64,
            momentum: 0.9,
            seed: 0,
        }
    }
}

/// Encoder outputs for every image of `data`.
pub fn embed_dataset(net: &NetworkPair, data: &Dataset) -> Result<Tensor> {
    net.represent(&data.flat_matrix()?)
}

/// Per-column mean and standard deviation (floored at 1e-8).
fn column_stats(x: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let (n, d) = x.row_layout();
    let mut mean = vec![0.0; d];
    for i in 0..n {
        for (m, v) in mean.iter_mut().zip(x.row(i)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut var = vec![0.0; d];
    for i in 0..n {
        for ((s, v), m) in var.iter_mut().zip(x.row(i)).zip(&mean) {
            *s += (v - m).powi(2);
        }
    }
    let std = var.iter().map(|s| (s / n as f64).sqrt().max(1e-8)).collect();
    (mean, std)
}

fn standardize(x: &Tensor, mean: &[f64], std: &[f64]) -> Vec<Vec<f64>> {
    (0..x.row_layout().0)
        .map(|i| {
            x.row(i)
                .iter()
                .zip(mean)
                .zip(std)
                .map(|((v, m), s)| (v - m) / s)
                .collect()
        })
        .collect()
}

fn logits(w: &Tensor, b: &Tensor, x: &[f64]) -> Vec<f64> {
    let c = b.numel();
    let mut out = b.data().to_vec();
    for (k, xv) in x.iter().enumerate() {
        let row = &w.data()[k * c..(k + 1) * c];
        for (o, wv) in out.iter_mut().zip(row) {
            *o += xv * wv;
        }
    }
    out
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Trains a softmax classifier on `train_x` and returns top-1 accuracy on
/// `val_x`. Features are standardized with training-split statistics and the
/// learning rate follows a cosine decay over all steps.
pub fn linear_probe_features(
    train_x: &Tensor,
    train_y: &[usize],
    val_x: &Tensor,
    val_y: &[usize],
    num_classes: usize,
    cfg: &ProbeConfig,
) -> Result<f64> {
    let (n, d) = train_x.row_layout();
    if n != train_y.len() || val_x.row_layout().0 != val_y.len() {
        return Err(Error::dim("linear_probe", &[n, val_x.row_layout().0], &[train_y.len(), val_y.len()]));
    }
    if val_x.row_layout().1 != d {
        return Err(Error::dim("linear_probe", &[d], &[val_x.row_layout().1]));
    }
    let mut present: Vec<usize> = train_y.to_vec();
    present.sort_unstable();
    present.dedup();
    if present.len() < 2 {
        return Err(Error::Config("linear probe needs at least two classes in the training split".into()));
    }
    if let Some(&bad) = train_y.iter().chain(val_y).find(|&&y| y >= num_classes) {
        return Err(Error::Config(format!("label {bad} outside [0, {num_classes})")));
    }
    if val_y.is_empty() || cfg.batch_size == 0 {
        return Err(Error::Config("empty validation split or zero probe batch size".into()));
    }

    let (mean, std) = column_stats(train_x);
    let xs = standardize(train_x, &mean, &std);
    let vs = standardize(val_x, &mean, &std);
    let c = num_classes;
    let mut w = Tensor::zeros(&[d, c]);
    let mut b = Tensor::zeros(&[c]);
    let mut state = SgdState::default();
    let mut order: Vec<usize> = (0..n).collect();
    let schedule = ScheduleConfig {
        base_lr: cfg.lr,
        total_steps: (cfg.epochs * n.div_ceil(cfg.batch_size)) as u64,
        warmup_steps: 0,
        batch_size: cfg.batch_size,
    };
    let mut step = 0u64;

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng::stream(cfg.seed, Purpose::Probe, epoch as u64, 0));
        for chunk in order.chunks(cfg.batch_size) {
            let mut gw = vec![0.0; d * c];
            let mut gb = vec![0.0; c];
            let inv = 1.0 / chunk.len() as f64;
            for &i in chunk {
                let z = logits(&w, &b, &xs[i]);
                let lse = tensor::logsumexp(&z);
                for k in 0..c {
                    let p = (z[k] - lse).exp() - if k == train_y[i] { 1.0 } else { 0.0 };
                    gb[k] += p * inv;
                    for (j, xv) in xs[i].iter().enumerate() {
                        gw[j * c + k] += p * xv * inv;
                    }
                }
            }
            let grads = [Tensor::new(vec![d, c], gw)?, Tensor::vector(gb)];
            let lr = cosine_lr(step, &schedule);
            sgd_nesterov_step(&mut [&mut w, &mut b], &grads, lr, cfg.momentum, &mut state)?;
            step += 1;
        }
    }

    let correct = vs
        .iter()
        .zip(val_y)
        .filter(|(x, &y)| argmax(&logits(&w, &b, x)) == y)
        .count();
    Ok(correct as f64 / val_y.len() as f64)
}

fn labels_of(data: &Dataset) -> Result<&[usize]> {
    data.labels()
        .ok_or_else(|| Error::Contract("linear probe needs labels".into()))
}

/// Probe on the frozen encoder output of `net`.
pub fn linear_probe(net: &NetworkPair, train: &Dataset, val: &Dataset, cfg: &ProbeConfig) -> Result<f64> {
    let tx = embed_dataset(net, train)?;
    let vx = embed_dataset(net, val)?;
    linear_probe_features(&tx, labels_of(train)?, &vx, labels_of(val)?, train.num_classes(), cfg)
}

/// Probe on flattened raw pixels.
pub fn raw_probe(train: &Dataset, val: &Dataset, cfg: &ProbeConfig) -> Result<f64> {
    linear_probe_features(
        &train.flat_matrix()?,
        labels_of(train)?,
        &val.flat_matrix()?,
        labels_of(val)?,
        train.num_classes(),
        cfg,
    )
}

//! Pretraining loop.

use std::fs::OpenOptions;
use std::io::{BufWriter, Write};
use std::path::PathBuf;

use log::{debug, info};
use rand::seq::SliceRandom;

use crate::augmentation::{generate_views, ViewBatch};
use crate::error::{Error, Result};
use crate::harness::checkpoint::{save_checkpoint, Checkpoint};
use crate::harness::config::RunConfig;
use crate::harness::dataset::UnlabeledDataset;
use crate::networks::NetworkPair;
use crate::objective::batch_loss;
use crate::optimizer::{cosine_lr, lars_step, LarsState};
use crate::rng::{self, Purpose};
use crate::tensor::Tape;

pub const METRICS_HEADER: &str = "step,lr,loss,contrastive,invariance,grad_norm";

/// One logged optimizer step.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    pub contrastive: f64,
    pub invariance: f64,
    pub grad_norm: f64,
}

impl MetricsRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.step, self.lr, self.loss, self.contrastive, self.invariance, self.grad_norm
        )
    }
}

#[derive(Clone, Debug, Default)]
pub struct PretrainOptions {
    /// Continue from this state instead of a fresh initialization.
    pub resume: Option<Checkpoint>,
    /// Stop once this many steps are complete, before `total_steps`.
    pub stop_at: Option<u64>,
}

#[derive(Clone, Debug)]
pub struct PretrainOutput {
    pub state: Checkpoint,
    /// Rows produced by this call.
    pub metrics: Vec<MetricsRow>,
}

/// Image indices for `step`: epochs are seeded permutations consumed in
/// whole batches; the final partial batch of an epoch is dropped.
pub fn batch_indices(seed: u64, step: u64, n: usize, batch: usize) -> Result<Vec<usize>> {
    if batch == 0 || batch > n {
        return Err(Error::Config(format!("batch size {batch} needs 1..={n} images")));
    }
    let per_epoch = (n / batch) as u64;
    let (epoch, pos) = (step / per_epoch, (step % per_epoch) as usize);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, Purpose::Shuffle, epoch, 0));
    Ok(order[pos * batch..(pos + 1) * batch].to_vec())
}

fn metrics_writer(cfg: &RunConfig) -> Result<Option<(PathBuf, BufWriter<std::fs::File>)>> {
    let Some(path) = cfg.metrics_path.clone() else {
        return Ok(None);
    };
    let file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&path)
        .map_err(|e| Error::io(&path, e))?;
    let empty = file.metadata().map_err(|e| Error::io(&path, e))?.len() == 0;
    let mut w = BufWriter::new(file);
    if empty {
        writeln!(w, "{METRICS_HEADER}").map_err(|e| Error::io(&path, e))?;
    }
    Ok(Some((path, w)))
}

/// Runs one optimizer step in place and returns its metrics.
pub fn train_step(
    cfg: &RunConfig,
    data: &UnlabeledDataset,
    net: &mut NetworkPair,
    opt: &mut LarsState,
    step: u64,
    seed: u64,
) -> Result<MetricsRow> {
    let batch = cfg.schedule.batch_size;
    let idx = batch_indices(seed, step, data.len(), batch)?;
    let mut views = ViewBatch::default();
    for (slot, &i) in idx.iter().enumerate() {
        let mut r = rng::stream(seed, Purpose::Augment, step, slot as u64);
        views.entries.push(generate_views(
            data.image(i),
            data.mask(i),
            &cfg.aug,
            &cfg.loss,
            &mut r,
            i as u64,
        )?);
    }

    let mut tape = Tape::new();
    let bound = net.bind(&mut tape);
    let mut neg = rng::stream(seed, Purpose::Negatives, step, 0);
    let loss = batch_loss(&mut tape, &views, &bound, cfg.network.input_width(), &cfg.loss, &mut neg)?;
    let value = tape.value(loss.total).item();
    if !value.is_finite() {
        return Err(Error::Numeric(format!("non-finite loss {value} at step {step}")));
    }
    let grads = tape.backward(loss.total)?;
    let online_grads = bound.online_grads(&grads);
    let grad_norm = online_grads
        .iter()
        .map(|g| g.data().iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    let lr = cosine_lr(step, &cfg.schedule);
    lars_step(&mut net.online_params_mut(), &online_grads, lr, &cfg.lars, opt)?;
    net.ema_update()?;
    Ok(MetricsRow {
        step,
        lr,
        loss: value,
        contrastive: loss.contrastive,
        invariance: loss.invariance,
        grad_norm,
    })
}

/// Pretrains from a fresh initialization or from `options.resume`.
///
/// Only the label-free view of the dataset is accepted. Metrics rows are
/// appended to `cfg.metrics_path` when set; checkpoints are written every
/// `cfg.checkpoint_every` steps and at the end when `cfg.checkpoint_path`
/// is set. On a numeric failure the last written checkpoint is left intact.
pub fn pretrain(cfg: &RunConfig, data: &UnlabeledDataset, options: PretrainOptions) -> Result<PretrainOutput> {
    cfg.validate()?;
    if data.len() < cfg.schedule.batch_size {
        return Err(Error::Config(format!(
            "batch size {} exceeds dataset size {}",
            cfg.schedule.batch_size,
            data.len()
        )));
    }
    let mut state = match options.resume {
        Some(ck) => {
            if ck.net.spec() != &cfg.network {
                return Err(Error::Config("checkpoint network does not match config".into()));
            }
            ck
        }
        None => Checkpoint {
            net: NetworkPair::init(cfg.network.clone(), cfg.gamma, cfg.seed)?,
            optimizer: LarsState::new(),
            step: 0,
            seed: cfg.seed,
        },
    };
    let end = options
        .stop_at
        .map_or(cfg.schedule.total_steps, |s| s.min(cfg.schedule.total_steps));
    let mut writer = metrics_writer(cfg)?;
    let mut metrics = Vec::new();

    while state.step < end {
        let row = train_step(cfg, data, &mut state.net, &mut state.optimizer, state.step, state.seed)?;
        if let Some((path, w)) = writer.as_mut() {
            writeln!(w, "{}", row.csv()).map_err(|e| Error::io(&*path, e))?;
        }
        if row.step % 100 == 0 {
            info!(
                "step {} lr {:.4} loss {:.5} contrastive {:.5} invariance {:.5}",
                row.step, row.lr, row.loss, row.contrastive, row.invariance
            );
        }
        metrics.push(row);
        state.step += 1;
        if let Some(path) = &cfg.checkpoint_path {
            if cfg.checkpoint_every > 0 && state.step % cfg.checkpoint_every == 0 {
                if let Some((p, w)) = writer.as_mut() {
                    w.flush().map_err(|e| Error::io(&*p, e))?;
                }
                save_checkpoint(path, &state)?;
                debug!("checkpoint at step {}", state.step);
            }
        }
    }
    if let Some((p, w)) = writer.as_mut() {
        w.flush().map_err(|e| Error::io(&*p, e))?;
    }
    if let Some(path) = &cfg.checkpoint_path {
        save_checkpoint(path, &state)?;
    }
    Ok(PretrainOutput { state, metrics })
}

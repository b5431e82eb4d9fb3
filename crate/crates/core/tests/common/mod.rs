//! Independent oracles shared by the integration tests.

#![allow(dead_code)]

use rand::Rng as _;
use relic::analysis::{EmbeddingSet, Neighbor};
use relic::augmentation::{generate_views, AugmentationConfig, Image, ViewBatch};
use relic::networks::NetworkSpec;
use relic::objective::{sample_negatives, LossConfig};
use relic::rng::{stream, Purpose, Rng};
use relic::tensor::Tensor;

/// Plain forward pass of a two-stage MLP, written without the tape.
pub fn oracle_embed(spec: &NetworkSpec, params: &[Vec<f64>], x: &[f64]) -> Vec<f64> {
    let mut h = x.to_vec();
    let mut p = 0;
    for widths in [&spec.encoder, &spec.projector] {
        let layers = widths.len() - 1;
        for l in 0..layers {
            let (fan_in, fan_out) = (widths[l], widths[l + 1]);
            let (w, b) = (&params[p], &params[p + 1]);
            p += 2;
            let mut out = b.clone();
            for (i, hv) in h.iter().enumerate().take(fan_in) {
                for (o, ov) in out.iter_mut().enumerate() {
                    *ov += hv * w[i * fan_out + o];
                }
            }
            if l + 1 < layers {
                out.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            h = out;
        }
    }
    if spec.normalize_embeddings {
        let n = h.iter().map(|v| v * v).sum::<f64>().sqrt();
        h.iter_mut().for_each(|v| *v /= n);
    }
    h
}

pub fn softmax_log(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|z| (z - m).exp()).sum::<f64>().ln();
    logits.iter().map(|z| z - lse).collect()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Loss of one batch written as a direct loop.
///
/// `online` are the embeddings that receive gradients; `frozen` are the
/// embeddings used for the detached side of every KL term (equal to
/// `online` at the point of evaluation, held fixed under perturbation).
pub fn oracle_batch_loss(
    online: &[Vec<f64>],
    frozen: &[Vec<f64>],
    target: &[Vec<f64>],
    batch: usize,
    cfg: &LossConfig,
    neg_rng: &mut Rng,
) -> f64 {
    let (large, views) = (cfg.num_large_crops, cfg.num_large_crops + cfg.num_small_crops);
    let mut total = 0.0;
    for image in 0..batch {
        for a in 0..views {
            for j in 0..large {
                let negs = sample_negatives(batch, image, cfg.n_negatives, neg_rng).unwrap();
                let mut cands = vec![&target[image * large + j]];
                cands.extend(negs.iter().map(|&n| &target[n * large + j]));
                let logits = |z: &[f64]| -> Vec<f64> { cands.iter().map(|c| dot(z, c) / cfg.tau).collect() };
                let la = softmax_log(&logits(&online[image * views + a]));
                let lb = softmax_log(&logits(&frozen[image * views + j]));
                let kl: f64 = lb.iter().zip(&la).map(|(b, a)| b.exp() * (b - a)).sum();
                total += -cfg.alpha * la[0] + cfg.beta * kl;
            }
        }
    }
    total / (cfg.scale() * batch) as f64
}

pub fn random_image(h: usize, w: usize, c: usize, seed: u64) -> Image {
    let mut rng = stream(seed, Purpose::Data, 99, 0);
    Image::new(h, w, c, (0..h * w * c).map(|_| rng.random::<f64>()).collect()).unwrap()
}

/// Views of `images`, one augmentation stream per image.
pub fn views_for(images: &[Image], aug: &AugmentationConfig, loss: &LossConfig, seed: u64) -> ViewBatch {
    ViewBatch {
        entries: images
            .iter()
            .enumerate()
            .map(|(i, img)| {
                let mut r = stream(seed, Purpose::Augment, 0, i as u64);
                generate_views(img, None, aug, loss, &mut r, i as u64).unwrap()
            })
            .collect(),
    }
}

pub fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.row_layout().0).map(|i| t.row(i).to_vec()).collect()
}

/// All pairwise neighbours sorted by (distance, index), first `k` kept.
pub fn brute_knn(x: &[Vec<f64>], k: usize) -> Vec<Vec<Neighbor>> {
    (0..x.len())
        .map(|i| {
            let mut all: Vec<Neighbor> = (0..x.len())
                .filter(|&j| j != i)
                .map(|j| Neighbor {
                    index: j,
                    distance: x[i].iter().zip(&x[j]).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt(),
                })
                .collect();
            all.sort_by(|a, b| a.distance.partial_cmp(&b.distance).unwrap().then(a.index.cmp(&b.index)));
            all.truncate(k);
            all
        })
        .collect()
}

pub fn brute_purity(x: &[Vec<f64>], labels: &[usize], k: usize) -> f64 {
    let table = brute_knn(x, k);
    let mut same = 0usize;
    for (i, row) in table.iter().enumerate() {
        for nb in row {
            if labels[nb.index] == labels[i] {
                same += 1;
            }
        }
    }
    same as f64 / (x.len() * k) as f64
}

pub fn embedding_set(x: &[Vec<f64>], labels: &[usize]) -> EmbeddingSet {
    EmbeddingSet::new(Tensor::from_rows(x).unwrap(), labels.to_vec(), "test").unwrap()
}

/// Random orthogonal matrix by Gram-Schmidt on Gaussian-like columns.
pub fn random_rotation(d: usize, rng: &mut Rng) -> Vec<Vec<f64>> {
    let mut q: Vec<Vec<f64>> = Vec::with_capacity(d);
    while q.len() < d {
        let mut v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        for u in &q {
            let p = dot(&v, u);
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= p * b);
        }
        let n = dot(&v, &v).sqrt();
        if n > 1e-6 {
            q.push(v.into_iter().map(|a| a / n).collect());
        }
    }
    q
}

pub fn transform(x: &[Vec<f64>], rot: &[Vec<f64>], scale: f64) -> Vec<Vec<f64>> {
    x.iter()
        .map(|row| rot.iter().map(|r| scale * dot(r, row)).collect())
        .collect()
}

/// Binomial 3σ check.
pub fn within_3_sigma(hits: usize, n: usize, p: f64) -> bool {
    let f = hits as f64 / n as f64;
    if p == 0.0 || p == 1.0 {
        return f == p;
    }
    (f - p).abs() <= 3.0 * (p * (1.0 - p) / n as f64).sqrt()
}

//! Latent-space diagnostics: nearest neighbours, discriminant ratios and
//! neighbour purity, plus CSV/SVG report emission.
//!
//! Distances are Euclidean on raw (unnormalized) representation vectors.

mod report;

pub use report::{emit_report, AnalysisReport, ReportFiles, RAMP_STEPS};

use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Representation vectors with their class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingSet {
    vectors: Tensor,
    labels: Vec<usize>,
    source: String,
}

impl EmbeddingSet {
    pub fn new(vectors: Tensor, labels: Vec<usize>, source: impl Into<String>) -> Result<Self> {
        if vectors.rank() != 2 {
            return Err(Error::dim("EmbeddingSet", &[2], &[vectors.rank()]));
        }
        let n = vectors.shape()[0];
        if n != labels.len() {
            return Err(Error::dim("EmbeddingSet", &[n], &[labels.len()]));
        }
        if n < 2 {
            return Err(Error::Config(format!("need at least 2 embeddings, got {n}")));
        }
        Ok(EmbeddingSet {
            vectors,
            labels,
            source: source.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vectors.shape()[1]
    }

    pub fn vectors(&self) -> &Tensor {
        &self.vectors
    }

    pub fn vector(&self, i: usize) -> &[f64] {
        self.vectors.row(i)
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn source(&self) -> &str {
        &self.source
    }
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// One neighbour of a query point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Neighbor {
    pub index: usize,
    pub distance: f64,
}

fn by_distance_then_index(a: &Neighbor, b: &Neighbor) -> Ordering {
    a.distance.total_cmp(&b.distance).then(a.index.cmp(&b.index))
}

/// The `k` nearest other points of every point, nearest first, ties broken
/// by lower index.
pub fn knn_table(emb: &EmbeddingSet, k: usize) -> Result<Vec<Vec<Neighbor>>> {
    let n = emb.len();
    if k == 0 || k >= n {
        return Err(Error::Config(format!("k = {k} must lie in 1..{n}")));
    }
    let mut table = Vec::with_capacity(n);
    let mut cand = Vec::with_capacity(n - 1);
    for i in 0..n {
        cand.clear();
        cand.extend((0..n).filter(|&j| j != i).map(|j| Neighbor {
            index: j,
            distance: euclidean(emb.vector(i), emb.vector(j)),
        }));
        if k < cand.len() {
            cand.select_nth_unstable_by(k - 1, by_distance_then_index);
        }
        let mut top = cand[..k].to_vec();
        top.sort_by(by_distance_then_index);
        table.push(top);
    }
    Ok(table)
}

fn purity_of(emb: &EmbeddingSet, table: &[Vec<Neighbor>], k: usize) -> f64 {
    let same: usize = table
        .iter()
        .enumerate()
        .map(|(i, row)| row[..k].iter().filter(|nb| emb.labels[nb.index] == emb.labels[i]).count())
        .sum();
    same as f64 / (table.len() * k) as f64
}

/// Fraction of the `N·k` (point, neighbour) pairs that share a label.
pub fn neighbor_purity(emb: &EmbeddingSet, k: usize) -> Result<f64> {
    Ok(purity_of(emb, &knn_table(emb, k)?, k))
}

/// Purity for every `k` in `1..=k_max`, from one neighbour table.
pub fn purity_curve(emb: &EmbeddingSet, k_max: usize) -> Result<Vec<f64>> {
    let table = knn_table(emb, k_max)?;
    Ok((1..=k_max).map(|k| purity_of(emb, &table, k)).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RatioVariant {
    /// Mean distance to other-class points over mean distance to the other
    /// points of the same class.
    PerPoint,
    /// Mean distance to other-class centroids over distance to the point's
    /// own class centroid.
    Centroid,
}

impl RatioVariant {
    pub fn name(self) -> &'static str {
        match self {
            RatioVariant::PerPoint => "per_point",
            RatioVariant::Centroid => "centroid",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Histogram {
    /// `bins + 1` ascending edges.
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

/// Equal-width histogram over the finite values; the last bin is closed.
pub fn histogram(values: &[f64], bins: usize) -> Histogram {
    let finite: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
    if finite.is_empty() || bins == 0 {
        return Histogram {
            edges: Vec::new(),
            counts: Vec::new(),
        };
    }
    let lo = finite.iter().copied().fold(f64::INFINITY, f64::min);
    let mut hi = finite.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi <= lo {
        hi = lo + 1.0;
    }
    let width = (hi - lo) / bins as f64;
    let edges = (0..=bins).map(|b| lo + width * b as f64).collect();
    let mut counts = vec![0; bins];
    for v in finite {
        let b = (((v - lo) / width) as usize).min(bins - 1);
        counts[b] += 1;
    }
    Histogram { edges, counts }
}

pub fn median(values: &[f64]) -> Option<f64> {
    let mut v: Vec<f64> = values.to_vec();
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Some(if v.len() % 2 == 0 { (v[m - 1] + v[m]) / 2.0 } else { v[m] })
}

#[derive(Clone, Debug, PartialEq)]
pub struct RatioReport {
    pub variant: RatioVariant,
    /// `None` for points of singleton classes.
    pub per_point: Vec<Option<f64>>,
    pub median: f64,
    pub histogram: Histogram,
}

pub const HISTOGRAM_BINS: usize = 20;

/// Between-class over within-class distance ratio for every point.
pub fn discriminant_ratio(emb: &EmbeddingSet, variant: RatioVariant) -> Result<RatioReport> {
    let n = emb.len();
    let classes = emb.labels.iter().max().map_or(0, |m| m + 1);
    let mut counts = vec![0usize; classes];
    for &l in &emb.labels {
        counts[l] += 1;
    }
    let present = counts.iter().filter(|&&c| c > 0).count();
    if present < 2 {
        return Err(Error::Config("discriminant ratio needs at least two classes".into()));
    }
    if !counts.iter().any(|&c| c >= 2) {
        return Err(Error::Config("discriminant ratio needs a class with two points".into()));
    }

    let per_point: Vec<Option<f64>> = match variant {
        RatioVariant::PerPoint => (0..n)
            .map(|i| {
                let li = emb.labels[i];
                if counts[li] < 2 {
                    return None;
                }
                let (mut within, mut between) = (0.0, 0.0);
                for j in 0..n {
                    if j == i {
                        continue;
                    }
                    let d = euclidean(emb.vector(i), emb.vector(j));
                    if emb.labels[j] == li {
                        within += d;
                    } else {
                        between += d;
                    }
                }
                let within = within / (counts[li] - 1) as f64;
                let between = between / (n - counts[li]) as f64;
                Some(between / within)
            })
            .collect(),
        RatioVariant::Centroid => {
            let d = emb.dim();
            let mut centroids = vec![vec![0.0; d]; classes];
            for i in 0..n {
                for (c, v) in centroids[emb.labels[i]].iter_mut().zip(emb.vector(i)) {
                    *c += v;
                }
            }
            for (c, &k) in centroids.iter_mut().zip(&counts) {
                if k > 0 {
                    c.iter_mut().for_each(|v| *v /= k as f64);
                }
            }
            (0..n)
                .map(|i| {
                    let li = emb.labels[i];
                    if counts[li] < 2 {
                        return None;
                    }
                    let own = euclidean(emb.vector(i), &centroids[li]);
                    let others: Vec<f64> = (0..classes)
                        .filter(|&c| c != li && counts[c] > 0)
                        .map(|c| euclidean(emb.vector(i), &centroids[c]))
                        .collect();
                    let between = others.iter().sum::<f64>() / others.len() as f64;
                    Some(between / own)
                })
                .collect()
        }
    };
    let defined: Vec<f64> = per_point.iter().flatten().copied().collect();
    let median = median(&defined).unwrap_or(f64::NAN);
    Ok(RatioReport {
        variant,
        histogram: histogram(&defined, HISTOGRAM_BINS),
        per_point,
        median,
    })
}

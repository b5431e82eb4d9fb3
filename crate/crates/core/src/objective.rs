//! Contrastive likelihood with explicit KL invariance.
//!
//! For an anchor embedding the candidate set is one positive target embedding
//! plus `n_negatives` target embeddings of other images in the batch; the
//! softmax over scaled similarities gives the candidate distribution. Each
//! pair term is `−α·log p_a(positive) + β·KL(sg[p_b] ‖ p_a)`, where `p_a` and
//! `p_b` are the distributions of the two online views over the same
//! candidates. The batch loss sums pair terms over every (view, large view)
//! combination, divides by `(L+S)·L`, and averages over images.

use rand::seq::index;

use crate::augmentation::ViewBatch;
use crate::error::{Error, Result};
use crate::networks::BoundNetwork;
use crate::rng::Rng;
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    /// Weight of the contrastive log-likelihood.
    pub alpha: f64,
    /// Weight of the KL invariance term.
    pub beta: f64,
    /// Similarity temperature.
    pub tau: f64,
    pub n_negatives: usize,
    pub num_large_crops: usize,
    pub num_small_crops: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            alpha: 1.0,
            beta: 1.0,
            tau: 0.2,
            n_negatives: 10,
            num_large_crops: 4,
            num_small_crops: 2,
        }
    }
}

impl LossConfig {
    /// Contrast scale 0.3, invariance weight 2.0, temperature 0.2.
    pub fn jft() -> Self {
        LossConfig {
            alpha: 0.3,
            beta: 2.0,
            tau: 0.2,
            ..Self::default()
        }
    }

    pub fn validate(&self, batch_size: usize) -> Result<()> {
        if !(self.alpha >= 0.0 && self.beta >= 0.0) || (self.alpha == 0.0 && self.beta == 0.0) {
            return Err(Error::Config(format!(
                "alpha={} beta={}: both must be non-negative and not both zero",
                self.alpha, self.beta
            )));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!("temperature must be positive, got {}", self.tau)));
        }
        if self.n_negatives == 0 {
            return Err(Error::Config("n_negatives must be at least 1".into()));
        }
        if self.num_large_crops == 0 {
            return Err(Error::Config("num_large_crops must be at least 1".into()));
        }
        if self.n_negatives + 1 > batch_size {
            return Err(Error::Config(format!(
                "n_negatives={} needs a batch of at least {}, got {batch_size}",
                self.n_negatives,
                self.n_negatives + 1
            )));
        }
        Ok(())
    }

    /// Number of pair terms per image, `(L + S) · L`.
    pub fn scale(&self) -> usize {
        (self.num_large_crops + self.num_small_crops) * self.num_large_crops
    }

    pub fn views_per_image(&self) -> usize {
        self.num_large_crops + self.num_small_crops
    }
}

/// `n` distinct indices drawn uniformly from `{0..batch_size} \ {anchor}`.
pub fn sample_negatives(batch_size: usize, anchor: usize, n: usize, rng: &mut Rng) -> Result<Vec<usize>> {
    if anchor >= batch_size {
        return Err(Error::Contract(format!("anchor {anchor} outside batch of {batch_size}")));
    }
    if n > batch_size - 1 {
        return Err(Error::Config(format!(
            "cannot draw {n} negatives from a batch of {batch_size}"
        )));
    }
    Ok(index::sample(rng, batch_size - 1, n)
        .into_iter()
        .map(|i| if i >= anchor { i + 1 } else { i })
        .collect())
}

/// Softmax of one anchor over its candidates; index 0 is the positive.
#[derive(Clone, Debug)]
pub struct CandidateDistribution {
    pub log_probs: Var,
    pub candidate_ids: Vec<usize>,
}

impl CandidateDistribution {
    pub fn probs(&self, tape: &Tape) -> Vec<f64> {
        tape.value(self.log_probs).data().iter().map(|v| v.exp()).collect()
    }
}

/// `log_softmax(⟨anchor, c_k⟩ / τ)` over the rows `c_k` of `candidates`.
pub fn candidate_distribution(
    tape: &mut Tape,
    anchor: Var,
    candidates: Var,
    candidate_ids: Vec<usize>,
    tau: f64,
) -> Result<CandidateDistribution> {
    if !(tau > 0.0) {
        return Err(Error::Config(format!("temperature must be positive, got {tau}")));
    }
    let (a_rows, width) = tape.value(anchor).row_layout();
    let cs = tape.shape(candidates).to_vec();
    if a_rows != 1 || cs.len() != 2 || cs[1] != width {
        return Err(Error::dim("candidate_distribution", tape.shape(anchor), &cs));
    }
    if cs[0] != candidate_ids.len() {
        return Err(Error::Contract(format!(
            "{} candidate rows but {} ids",
            cs[0],
            candidate_ids.len()
        )));
    }
    let column = tape.reshape(anchor, &[width, 1])?;
    let sims = tape.matmul(candidates, column)?;
    let sims = tape.reshape(sims, &[cs[0]])?;
    let logits = tape.scale(sims, 1.0 / tau);
    let log_probs = tape.log_softmax(logits)?;
    Ok(CandidateDistribution {
        log_probs,
        candidate_ids,
    })
}

/// Builds the candidate matrix from a positive and a list of negatives first.
pub fn candidate_distribution_from_parts(
    tape: &mut Tape,
    anchor: Var,
    positive: Var,
    negatives: &[Var],
    candidate_ids: Vec<usize>,
    tau: f64,
) -> Result<CandidateDistribution> {
    let mut parts = vec![positive];
    parts.extend_from_slice(negatives);
    let candidates = tape.concat_rows(&parts)?;
    candidate_distribution(tape, anchor, candidates, candidate_ids, tau)
}

/// `Σ_c sg[p_d(c)]·(sg[log p_d(c)] − log p_g(c))`: KL(p_d ‖ p_g) with the
/// `detached` side fully stop-gradded and gradient flowing only through the
/// `graded` log-probabilities.
pub fn invariance_kl(
    tape: &mut Tape,
    detached: &CandidateDistribution,
    graded: &CandidateDistribution,
) -> Result<Var> {
    if detached.candidate_ids != graded.candidate_ids {
        return Err(Error::Contract(format!(
            "candidate sets differ: {:?} vs {:?}",
            detached.candidate_ids, graded.candidate_ids
        )));
    }
    let weights = Tensor::vector(detached.probs(tape));
    let weights = tape.constant(weights);
    let anchor_log = tape.stop_gradient(detached.log_probs);
    let diff = tape.sub(anchor_log, graded.log_probs)?;
    let weighted = tape.mul(weights, diff)?;
    Ok(tape.sum(weighted))
}

/// Components of one pair term.
#[derive(Clone, Copy, Debug)]
pub struct PairTerms {
    pub total: Var,
    /// `−log p_a(positive)`
    pub contrastive: Var,
    /// `KL(sg[p_b] ‖ p_a)`
    pub invariance: Var,
}

/// One pair term. `candidates` holds the target embedding of view b in row 0
/// followed by the negatives' target embeddings.
pub fn pair_loss(
    tape: &mut Tape,
    online_a: Var,
    online_b: Var,
    candidates: Var,
    candidate_ids: &[usize],
    cfg: &LossConfig,
) -> Result<PairTerms> {
    let dist_a = candidate_distribution(tape, online_a, candidates, candidate_ids.to_vec(), cfg.tau)?;
    let dist_b = candidate_distribution(tape, online_b, candidates, candidate_ids.to_vec(), cfg.tau)?;
    let positive = tape.gather(dist_a.log_probs, &[0])?;
    let positive = tape.sum(positive);
    let contrastive = tape.scale(positive, -1.0);
    let invariance = invariance_kl(tape, &dist_b, &dist_a)?;
    let weighted_c = tape.scale(contrastive, cfg.alpha);
    let weighted_i = tape.scale(invariance, cfg.beta);
    let total = tape.add(weighted_c, weighted_i)?;
    Ok(PairTerms {
        total,
        contrastive,
        invariance,
    })
}

/// Batch loss plus its unweighted components for logging.
#[derive(Clone, Debug)]
pub struct BatchLoss {
    pub total: Var,
    /// Mean `−log p(positive)` over all pair terms.
    pub contrastive: f64,
    /// Mean KL over all pair terms.
    pub invariance: f64,
    /// Pair-term invocations for each image.
    pub pair_counts: Vec<usize>,
    /// Divisor applied to each image's sum of pair terms.
    pub scale: usize,
}

/// Batch loss over precomputed embeddings.
///
/// `online` holds `B·(L+S)` rows ordered image-major, large views before
/// small; `target` holds the `B·L` large-view target embeddings. Negatives
/// for a pair against large view `j` are the target embeddings of view `j`
/// of the sampled images. A fresh negative set is drawn for every pair.
pub fn batch_loss_from_embeddings(
    tape: &mut Tape,
    online: Var,
    target: Var,
    batch_size: usize,
    cfg: &LossConfig,
    rng: &mut Rng,
) -> Result<BatchLoss> {
    cfg.validate(batch_size)?;
    let (large, views) = (cfg.num_large_crops, cfg.views_per_image());
    let (on_rows, _) = tape.value(online).row_layout();
    let (tg_rows, _) = tape.value(target).row_layout();
    if on_rows != batch_size * views || tg_rows != batch_size * large {
        return Err(Error::dim(
            "batch_loss",
            &[on_rows, tg_rows],
            &[batch_size * views, batch_size * large],
        ));
    }

    let scale = cfg.scale();
    let mut totals = Vec::with_capacity(batch_size * scale);
    let mut pair_counts = vec![0usize; batch_size];
    let (mut c_sum, mut i_sum) = (0.0, 0.0);
    let mut cand_rows = Vec::with_capacity(cfg.n_negatives + 1);
    let mut ids = Vec::with_capacity(cfg.n_negatives + 1);

    for image in 0..batch_size {
        let online_row = |v: usize| image * views + v;
        // large-large pairs (i, j) including i == j, then small-large.
        for anchor_view in 0..views {
            let online_a = tape.gather_rows(online, &[online_row(anchor_view)])?;
            for j in 0..large {
                let negatives = sample_negatives(batch_size, image, cfg.n_negatives, rng)?;
                cand_rows.clear();
                ids.clear();
                cand_rows.push(image * large + j);
                ids.push(image);
                for &n in &negatives {
                    cand_rows.push(n * large + j);
                    ids.push(n);
                }
                let candidates = tape.gather_rows(target, &cand_rows)?;
                let online_b = tape.gather_rows(online, &[online_row(j)])?;
                let terms = pair_loss(tape, online_a, online_b, candidates, &ids, cfg)?;
                c_sum += tape.value(terms.contrastive).item();
                i_sum += tape.value(terms.invariance).item();
                let t = tape.reshape(terms.total, &[1])?;
                totals.push(t);
                pair_counts[image] += 1;
            }
        }
    }

    let stacked = tape.concat_rows(&totals)?;
    let summed = tape.sum(stacked);
    let denom = (scale * batch_size) as f64;
    let total = tape.scale(summed, 1.0 / denom);
    Ok(BatchLoss {
        total,
        contrastive: c_sum / denom,
        invariance: i_sum / denom,
        pair_counts,
        scale,
    })
}

/// Embeds every view of `views` and returns the batch loss.
pub fn batch_loss(
    tape: &mut Tape,
    views: &ViewBatch,
    net: &BoundNetwork,
    input_width: usize,
    cfg: &LossConfig,
    rng: &mut Rng,
) -> Result<BatchLoss> {
    if cfg.num_large_crops == 0 {
        return Err(Error::Config("num_large_crops must be at least 1".into()));
    }
    views.check_counts(cfg.num_large_crops, cfg.num_small_crops)?;
    let online_in = tape.constant(views.online_matrix(input_width)?);
    let target_in = tape.constant(views.target_matrix(input_width)?);
    let online = net.embed_online(tape, online_in)?;
    let target = net.embed_target(tape, target_in)?;
    batch_loss_from_embeddings(tape, online, target, views.len(), cfg, rng)
}

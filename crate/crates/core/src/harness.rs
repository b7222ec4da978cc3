//! Retrieval metrics, logit profiles and the experiment suites.
//!
//! Suites are expressed as lists of [`SweepPoint`]s so callers can run the
//! points sequentially with [`run_points`] or hand them to a worker pool and
//! keep the list order when assembling results.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::distributions::{cross_modal_dist, EmbeddingBatch, RowStochastic};
use crate::error::{Error, Result};
use crate::gradcheck::LossSelector;
use crate::math;
use crate::numkit::{gram, Matrix, Seed};
use crate::objectives::Divergence;
use crate::synthgen::SynthDataset;
use crate::trainer::{forward_batch, train, TrainConfig, TrainState};

pub const MIN_RETRIEVAL_GALLERY: usize = 10;
pub const PROFILE_LEN: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub r1_v2t: f64,
    pub r5_v2t: f64,
    pub r10_v2t: f64,
    pub r1_t2v: f64,
    pub r5_t2v: f64,
    pub r10_t2v: f64,
    /// Rank correlation of off-diagonal image-text similarities with the
    /// ground-truth relevance.
    pub spearman: f64,
}

/// Position of `target` when `scores` is sorted descending, ties going to
/// the lower index.
fn rank_of(scores: impl Iterator<Item = f64>, target: usize, s: f64) -> usize {
    scores.enumerate().filter(|&(j, x)| x > s || (x == s && j < target)).count()
}

fn recalls(ranks: &[usize]) -> [f64; 3] {
    let n = ranks.len() as f64;
    [1, 5, 10].map(|k| ranks.iter().filter(|&&r| r < k).count() as f64 / n)
}

/// Metrics from an image-by-text similarity matrix and the relevance of the
/// same gallery.
pub fn retrieval_from_similarity(sim: &Matrix, relevance: &Matrix) -> Result<RetrievalResult> {
    let n = sim.rows();
    if sim.cols() != n || relevance.shape() != (n, n) {
        return Err(Error::shape("retrieval_from_similarity", sim.shape(), relevance.shape()));
    }
    if n < MIN_RETRIEVAL_GALLERY {
        return Err(Error::GalleryTooSmall { n, required: MIN_RETRIEVAL_GALLERY });
    }
    let v2t: Vec<usize> = (0..n).map(|i| rank_of(sim.row(i).iter().copied(), i, sim.get(i, i))).collect();
    let t2v: Vec<usize> = (0..n).map(|j| rank_of((0..n).map(|i| sim.get(i, j)), j, sim.get(j, j))).collect();
    let [r1_v2t, r5_v2t, r10_v2t] = recalls(&v2t);
    let [r1_t2v, r5_t2v, r10_t2v] = recalls(&t2v);
    let (mut x, mut y) = (Vec::with_capacity(n * (n - 1)), Vec::with_capacity(n * (n - 1)));
    for i in 0..n {
        for j in (0..n).filter(|&j| j != i) {
            x.push(sim.get(i, j));
            y.push(relevance.get(i, j));
        }
    }
    Ok(RetrievalResult { r1_v2t, r5_v2t, r10_v2t, r1_t2v, r5_t2v, r10_t2v, spearman: spearman(&x, &y) })
}

/// Ranks starting at 1, tied values sharing their average rank.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].partial_cmp(&x[b]).unwrap_or(Ordering::Equal));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && x[order[j]] == x[order[i]] {
            j += 1;
        }
        let avg = (i + j + 1) as f64 / 2.0;
        for &k in &order[i..j] {
            ranks[k] = avg;
        }
        i = j;
    }
    ranks
}

/// Spearman correlation with average ranks; 0 when either side is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(x.len(), y.len(), "spearman needs equal lengths");
    let (rx, ry) = (average_ranks(x), average_ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return 0.0;
    }
    (sxy / math::sqrt(sxx * syy)).clamp(-1.0, 1.0)
}

fn relevance_block(dataset: &SynthDataset, indices: &[usize]) -> Result<Matrix> {
    dataset.relevance.select(indices, indices)
}

fn similarity(state: &TrainState, dataset: &SynthDataset, indices: &[usize]) -> Result<Matrix> {
    let [v, t, _, _] = forward_batch(state, dataset, indices)?;
    gram(v.as_matrix(), t.as_matrix())
}

pub fn retrieval_eval(state: &TrainState, dataset: &SynthDataset, indices: &[usize]) -> Result<RetrievalResult> {
    if indices.len() < MIN_RETRIEVAL_GALLERY {
        return Err(Error::GalleryTooSmall { n: indices.len(), required: MIN_RETRIEVAL_GALLERY });
    }
    retrieval_from_similarity(&similarity(state, dataset, indices)?, &relevance_block(dataset, indices)?)
}

/// Metrics of a model whose similarities are the ground-truth relevance.
pub fn oracle_retrieval(dataset: &SynthDataset, indices: &[usize]) -> Result<RetrievalResult> {
    let rel = relevance_block(dataset, indices)?;
    retrieval_from_similarity(&rel, &rel)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    ImageToText,
    TextToImage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogitProfile {
    /// Mean sorted probability at positions 1..=50.
    pub positions: Vec<f64>,
    pub top1: f64,
    pub top2_10: f64,
    pub top11_50: f64,
    /// Sum of the untruncated mean profile.
    pub full_sum: f64,
}

/// Position-wise mean of the descending-sorted rows of `p`.
pub fn profile_from_probabilities(p: &RowStochastic) -> Result<LogitProfile> {
    let n = p.rows();
    if n < PROFILE_LEN {
        return Err(Error::GalleryTooSmall { n, required: PROFILE_LEN });
    }
    let mut mean = vec![0.0; n];
    let mut row = vec![0.0; n];
    for i in 0..n {
        row.copy_from_slice(p.row(i));
        row.sort_by(|a, b| b.partial_cmp(a).unwrap_or(Ordering::Equal));
        for (m, x) in mean.iter_mut().zip(&row) {
            *m += x / n as f64;
        }
    }
    Ok(LogitProfile {
        top1: mean[0],
        top2_10: mean[1..10].iter().sum(),
        top11_50: mean[10..PROFILE_LEN].iter().sum(),
        full_sum: mean.iter().sum(),
        positions: mean[..PROFILE_LEN].to_vec(),
    })
}

pub fn logit_profile(
    state: &TrainState,
    dataset: &SynthDataset,
    indices: &[usize],
    direction: Direction,
) -> Result<LogitProfile> {
    if indices.len() < PROFILE_LEN {
        return Err(Error::GalleryTooSmall { n: indices.len(), required: PROFILE_LEN });
    }
    let [v, t, _, _]: [EmbeddingBatch; 4] = forward_batch(state, dataset, indices)?;
    let tau = state.temperatures().cross;
    let p = match direction {
        Direction::ImageToText => cross_modal_dist(&v, &t, tau)?,
        Direction::TextToImage => cross_modal_dist(&t, &v, tau)?,
    };
    profile_from_probabilities(&p)
}

/// One configuration to train and evaluate.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    pub variant: String,
    pub config: TrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub variant: String,
    pub beta: f64,
    pub gamma: f64,
    pub seed: u64,
    pub dataset_hash: String,
    pub r1_v2t: f64,
    pub r5_v2t: f64,
    pub r10_v2t: f64,
    pub r1_t2v: f64,
    pub r5_t2v: f64,
    pub r10_t2v: f64,
    pub spearman: f64,
    pub final_loss: f64,
}

impl ResultRow {
    pub fn new(point: &SweepPoint, dataset_hash: &str, r: RetrievalResult, final_loss: f64) -> Self {
        Self {
            variant: point.variant.clone(),
            beta: point.config.loss.beta,
            gamma: point.config.loss.gamma,
            seed: point.config.seed.0,
            dataset_hash: dataset_hash.to_string(),
            r1_v2t: r.r1_v2t,
            r5_v2t: r.r5_v2t,
            r10_v2t: r.r10_v2t,
            r1_t2v: r.r1_t2v,
            r5_t2v: r.r5_t2v,
            r10_t2v: r.r10_t2v,
            spearman: r.spearman,
            final_loss,
        }
    }

    pub fn retrieval(&self) -> RetrievalResult {
        RetrievalResult {
            r1_v2t: self.r1_v2t,
            r5_v2t: self.r5_v2t,
            r10_v2t: self.r10_v2t,
            r1_t2v: self.r1_t2v,
            r5_t2v: self.r5_t2v,
            r10_t2v: self.r10_t2v,
            spearman: self.spearman,
        }
    }
}

/// A trained point: its row plus the final state for further analysis.
#[derive(Debug, Clone)]
pub struct PointOutcome {
    pub row: ResultRow,
    pub state: TrainState,
}

/// Trains one point and evaluates it on the held-out split.
pub fn run_point(dataset: &SynthDataset, point: &SweepPoint, dataset_hash: &str) -> Result<PointOutcome> {
    let (_, eval) = point.config.split(dataset.len())?;
    let (state, log) = train(dataset, &point.config)?;
    let eval: Vec<usize> = eval.collect();
    let r = retrieval_eval(&state, dataset, &eval)?;
    let final_loss = log.last().map_or(f64::NAN, |l| l.loss);
    Ok(PointOutcome { row: ResultRow::new(point, dataset_hash, r, final_loss), state })
}

pub fn run_points(dataset: &SynthDataset, points: &[SweepPoint], dataset_hash: &str) -> Result<Vec<PointOutcome>> {
    points.iter().map(|p| run_point(dataset, p, dataset_hash)).collect()
}

pub const ABLATION_VARIANTS: [&str; 5] = ["clip", "clip_label_smoothing", "clip_soft", "clip_soft_re", "softclip"];

/// Loss settings of one ablation variant derived from `base`; `softclip` is
/// `base` itself.
pub fn ablation_config(base: &TrainConfig, variant: &str) -> Result<TrainConfig> {
    let mut c = base.clone();
    c.objective = LossSelector::Total;
    let l = &mut c.loss;
    match variant {
        "clip" | "clip_label_smoothing" => {
            l.mu_clip = 1.0;
            l.soft_weight = 0.0;
            l.lambda_re = 0.0;
            l.label_smoothing = variant == "clip_label_smoothing";
        }
        "clip_soft" | "clip_soft_re" => {
            l.soft_weight = 1.0;
            l.divergence = Divergence::ForwardKl;
            if variant == "clip_soft" {
                l.lambda_re = 0.0;
            }
        }
        "softclip" => {}
        other => return Err(Error::ConfigInvalid(format!("unknown ablation variant {other:?}"))),
    }
    Ok(c)
}

/// The five ablation variants for every seed, variants in order within a seed.
pub fn ablation_points(base: &TrainConfig, seeds: &[Seed]) -> Result<Vec<SweepPoint>> {
    let mut out = Vec::new();
    for &seed in seeds {
        for v in ABLATION_VARIANTS {
            let config = TrainConfig { seed, ..ablation_config(base, v)? };
            out.push(SweepPoint { variant: v.to_string(), config });
        }
    }
    Ok(out)
}

pub fn ablation_suite(dataset: &SynthDataset, base: &TrainConfig, seeds: &[Seed], dataset_hash: &str) -> Result<Vec<ResultRow>> {
    Ok(run_points(dataset, &ablation_points(base, seeds)?, dataset_hash)?.into_iter().map(|o| o.row).collect())
}

fn check_unit(name: &str, values: &[f64]) -> Result<()> {
    match values.iter().find(|x| !(0.0..=1.0).contains(*x)) {
        Some(x) => Err(Error::ConfigInvalid(format!("{name} values must be in [0, 1], got {x}"))),
        None => Ok(()),
    }
}

/// Points for the β sweep with and without the relation term, plus the
/// reasons for skipped values.
pub fn beta_points(base: &TrainConfig, betas: &[f64]) -> Result<(Vec<SweepPoint>, Vec<String>)> {
    check_unit("beta", betas)?;
    let mut points = Vec::new();
    let mut skipped = Vec::new();
    for &beta in betas {
        for (variant, lambda) in [("softclip", base.loss.lambda_re), ("softclip_no_re", 0.0)] {
            let mut config = base.clone();
            config.loss.beta = beta;
            config.loss.lambda_re = lambda;
            if let Err(e) = config.validate() {
                if e == Error::DegenerateTargets {
                    skipped.push(format!("{variant} beta={beta}: {e}"));
                    continue;
                }
                return Err(e);
            }
            points.push(SweepPoint { variant: variant.to_string(), config });
        }
    }
    Ok((points, skipped))
}

/// Points for the γ sweep on the mixed-guidance objective (no CLIP term),
/// with and without the relation term.
pub fn gamma_points(base: &TrainConfig, gammas: &[f64]) -> Result<Vec<SweepPoint>> {
    check_unit("gamma", gammas)?;
    let mut points = Vec::new();
    for &gamma in gammas {
        for (variant, lambda) in [("mixed", base.loss.lambda_re), ("mixed_no_re", 0.0)] {
            let mut config = base.clone();
            config.objective = LossSelector::MixedGamma;
            config.loss.gamma = gamma;
            config.loss.mu_clip = 0.0;
            config.loss.lambda_re = lambda;
            config.validate()?;
            points.push(SweepPoint { variant: variant.to_string(), config });
        }
    }
    Ok(points)
}

pub fn beta_sweep(
    dataset: &SynthDataset,
    base: &TrainConfig,
    betas: &[f64],
    dataset_hash: &str,
) -> Result<(Vec<ResultRow>, Vec<String>)> {
    let (points, skipped) = beta_points(base, betas)?;
    let rows = run_points(dataset, &points, dataset_hash)?.into_iter().map(|o| o.row).collect();
    Ok((rows, skipped))
}

pub fn gamma_sweep(dataset: &SynthDataset, base: &TrainConfig, gammas: &[f64], dataset_hash: &str) -> Result<Vec<ResultRow>> {
    Ok(run_points(dataset, &gamma_points(base, gammas)?, dataset_hash)?.into_iter().map(|o| o.row).collect())
}

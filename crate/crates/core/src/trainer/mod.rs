//! Toy dual-stream encoders trained with the alignment objectives.
//!
//! All parameters, including the temperature, live in one flat vector
//! described by [`Layout`]. A step gathers a batch, runs the four heads,
//! differentiates the selected objective with [`crate::gradcheck::backward`],
//! pushes the embedding gradients back through the heads and applies AdamW.
//!
//! With `stop_gradient_targets` the ROI/tag heads and the attention pooler
//! only feed detached guidance, so they are frozen and their outputs are
//! computed once per run.

pub mod encoder;
pub mod optim;
pub mod schedule;

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::ops::Range;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

pub use encoder::{roi_aggregate, Aggregator, Attention, Layout, ModelDims, RoiAggregation};
pub use optim::{optimizer_step, AdamW, Moments, ParamRole};
pub use schedule::{lr_at, warmup_steps};

use crate::distributions::{EmbeddingBatch, Modality, Temperature, Temperatures};
use crate::error::{Error, Result};
use crate::gradcheck::{backward, LossSelector, RawInputs};
use crate::numkit::{Matrix, Seed};
use crate::objectives::{softclip_total, LossConfig};
use crate::synthgen::SynthDataset;
use encoder::{attention_backward, head_backward, head_forward, HeadCache};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    /// Peak learning rate.
    pub learning_rate: f64,
    pub warmup_fraction: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub roi_aggregation: RoiAggregation,
    pub hidden_dim: usize,
    pub embed_dim: usize,
    pub key_dim: usize,
    /// Trailing samples held out for evaluation.
    pub holdout: usize,
    pub objective: LossSelector,
    /// Global gradient-norm clip; off by default.
    pub grad_clip: Option<f64>,
    pub seed: Seed,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 64,
            learning_rate: 2e-3,
            warmup_fraction: 0.1,
            weight_decay: 0.2,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            roi_aggregation: RoiAggregation::Attention,
            hidden_dim: 64,
            embed_dim: 32,
            key_dim: 16,
            holdout: 200,
            objective: LossSelector::Total,
            grad_clip: None,
            seed: Seed(0),
            loss: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: alloc::string::String| Err(Error::ConfigInvalid(msg));
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return bad(format!("warmup_fraction must be in [0, 1), got {}", self.warmup_fraction));
        }
        if self.batch_size < 2 {
            return bad(format!("batch_size must be at least 2, got {}", self.batch_size));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("{name} must be in [0, 1), got {b}"));
            }
        }
        if !(self.adam_eps > 0.0) {
            return bad(format!("adam_eps must be positive, got {}", self.adam_eps));
        }
        for (name, v) in [("hidden_dim", self.hidden_dim), ("embed_dim", self.embed_dim), ("key_dim", self.key_dim)] {
            if v == 0 {
                return bad(format!("{name} must be at least 1"));
            }
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return bad(format!("grad_clip must be positive, got {c}"));
            }
        }
        self.loss.validate()?;
        if uses_guidance(self.objective, &self.loss) {
            self.loss.check_soft_targets()?;
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamW {
        AdamW { beta1: self.beta1, beta2: self.beta2, eps: self.adam_eps, weight_decay: self.weight_decay }
    }

    pub fn dims(&self, dataset: &SynthDataset) -> ModelDims {
        let s = &dataset.spec;
        ModelDims {
            d_image: s.d_image,
            d_text: s.d_text,
            d_roi: s.d_roi,
            d_tag: s.d_tag,
            hidden: self.hidden_dim,
            embed: self.embed_dim,
            key_dim: self.key_dim,
        }
    }

    /// Training and evaluation index ranges for a dataset of `n` samples.
    pub fn split(&self, n: usize) -> Result<(Range<usize>, Range<usize>)> {
        if self.holdout >= n || n - self.holdout < self.batch_size {
            return Err(Error::ConfigInvalid(format!(
                "{n} samples leave {} for training after holding out {}, fewer than batch_size {}",
                n.saturating_sub(self.holdout),
                self.holdout,
                self.batch_size
            )));
        }
        Ok((0..n - self.holdout, n - self.holdout..n))
    }
}

fn uses_guidance(objective: LossSelector, loss: &LossConfig) -> bool {
    match objective {
        LossSelector::Clip => false,
        LossSelector::Total => loss.uses_soft_targets(),
        LossSelector::Soft | LossSelector::SoftRe | LossSelector::MixedGamma => true,
    }
}

/// Parameters, optimizer moments and the step counter. The shuffling RNG is
/// a pure function of `(config.seed, epoch)`, so this is everything needed
/// to resume.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub config: TrainConfig,
    pub layout: Layout,
    pub params: Vec<f64>,
    pub moments: Moments,
}

impl TrainState {
    pub fn init(dataset: &SynthDataset, config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(config.dims(dataset), !config.loss.shared_temperature);
        let params = layout.init(config.seed.derive(7), config.loss.tau_init);
        let moments = Moments::zeros(layout.len);
        Ok(Self { config: config.clone(), layout, params, moments })
    }

    pub fn step(&self) -> u64 {
        self.moments.step
    }

    pub fn temperatures(&self) -> Temperatures {
        let t = self.layout.temperature.start;
        let cross = Temperature { log_inv_tau: self.params[t] };
        if self.layout.split_temperature() {
            Temperatures::split(cross, Temperature { log_inv_tau: self.params[t + 1] })
        } else {
            Temperatures::shared(cross)
        }
    }

    fn clamp_temperatures(&mut self) {
        for i in self.layout.temperature.clone() {
            let mut t = Temperature { log_inv_tau: self.params[i] };
            t.clamp_in_place();
            self.params[i] = t.log_inv_tau;
        }
    }

    fn freezes_guidance(&self) -> bool {
        self.config.loss.stop_gradient_targets
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub lr: f64,
    pub tau: f64,
    /// Value of the training objective.
    pub loss: f64,
    pub clip: f64,
    pub soft: f64,
    pub soft_re: f64,
    /// `soft_weight·soft + λ·soft_re + μ·clip`.
    pub total: f64,
}

fn check_indices(dataset: &SynthDataset, indices: &[usize]) -> Result<()> {
    if indices.len() < 2 {
        return Err(Error::BatchTooSmall { n: indices.len() });
    }
    if let Some(&bad) = indices.iter().find(|&&i| i >= dataset.len()) {
        return Err(Error::IndexOutOfRange { index: bad, len: dataset.len() });
    }
    Ok(())
}

fn pooled_rois(state: &TrainState, dataset: &SynthDataset, indices: &[usize]) -> Result<Matrix> {
    let d = dataset.roi.cols();
    let agg = state.layout.aggregator(state.config.roi_aggregation, &state.params);
    let mut out = Matrix::zeros(indices.len(), d);
    for (row, &i) in indices.iter().enumerate() {
        out.row_mut(row).copy_from_slice(&roi_aggregate(dataset.rois(i), d, &agg)?);
    }
    Ok(out)
}

fn head_input(state: &TrainState, dataset: &SynthDataset, m: Modality, indices: &[usize]) -> Result<Matrix> {
    match m {
        Modality::Image => dataset.image.select_rows(indices),
        Modality::Text => dataset.text.select_rows(indices),
        Modality::Tag => dataset.tag.select_rows(indices),
        Modality::Roi => pooled_rois(state, dataset, indices),
    }
}

/// Unnormalized head outputs for every sample, reused while the guidance
/// heads are frozen.
#[derive(Debug, Clone)]
struct GuidanceCache {
    roi: Matrix,
    tag: Matrix,
}

impl GuidanceCache {
    const CHUNK: usize = 256;

    fn build(state: &TrainState, dataset: &SynthDataset) -> Result<Self> {
        let n = dataset.len();
        let d = state.layout.dims.embed;
        let mut out = Self { roi: Matrix::zeros(n, d), tag: Matrix::zeros(n, d) };
        let all: Vec<usize> = (0..n).collect();
        for chunk in all.chunks(Self::CHUNK) {
            for (m, dst) in [(Modality::Roi, &mut out.roi), (Modality::Tag, &mut out.tag)] {
                let (y, _) = head_forward(&state.params, state.layout.head(m), head_input(state, dataset, m, chunk)?);
                for (row, &i) in chunk.iter().enumerate() {
                    dst.row_mut(i).copy_from_slice(y.row(row));
                }
            }
        }
        Ok(out)
    }
}

struct BatchForward {
    raw: RawInputs,
    caches: [Option<HeadCache>; 4],
}

fn forward_raw(
    state: &TrainState,
    dataset: &SynthDataset,
    indices: &[usize],
    cache: Option<&GuidanceCache>,
) -> Result<BatchForward> {
    check_indices(dataset, indices)?;
    let mut outs: [Option<Matrix>; 4] = Default::default();
    let mut caches: [Option<HeadCache>; 4] = Default::default();
    for m in Modality::ALL {
        let cached = match (m, cache) {
            (Modality::Roi, Some(c)) => Some(c.roi.select_rows(indices)?),
            (Modality::Tag, Some(c)) => Some(c.tag.select_rows(indices)?),
            _ => None,
        };
        outs[m.index()] = Some(match cached {
            Some(y) => y,
            None => {
                let x = head_input(state, dataset, m, indices)?;
                let (y, hc) = head_forward(&state.params, state.layout.head(m), x);
                caches[m.index()] = Some(hc);
                y
            }
        });
    }
    let [v, t, r, a] = outs.map(|x| x.expect("every modality produced"));
    Ok(BatchForward { raw: RawInputs { v, t, r, a }, caches })
}

/// Row-normalized embeddings of the four modalities for `indices`.
pub fn forward_batch(state: &TrainState, dataset: &SynthDataset, indices: &[usize]) -> Result<[EmbeddingBatch; 4]> {
    let f = forward_raw(state, dataset, indices, None)?;
    Ok([
        EmbeddingBatch::normalize(&f.raw.v)?,
        EmbeddingBatch::normalize(&f.raw.t)?,
        EmbeddingBatch::normalize(&f.raw.r)?,
        EmbeddingBatch::normalize(&f.raw.a)?,
    ])
}

/// Training objective on one batch, without gradients.
pub fn batch_loss(state: &TrainState, dataset: &SynthDataset, indices: &[usize]) -> Result<f64> {
    let f = forward_raw(state, dataset, indices, None)?;
    crate::gradcheck::evaluate(state.config.objective, &f.raw, &state.temperatures(), &state.config.loss)
}

fn gradient_with(
    state: &TrainState,
    dataset: &SynthDataset,
    indices: &[usize],
    cache: Option<&GuidanceCache>,
) -> Result<(f64, Vec<f64>, RawInputs)> {
    let f = forward_raw(state, dataset, indices, cache)?;
    let temps = state.temperatures();
    let (value, g) = backward(state.config.objective, &f.raw, &temps, &state.config.loss)?;
    let mut grad = vec![0.0; state.layout.len];
    let attention = state.config.roi_aggregation == RoiAggregation::Attention;
    for m in Modality::ALL {
        let Some(hc) = &f.caches[m.index()] else { continue };
        let dy = g.get(m);
        if dy.is_all_zero() {
            continue;
        }
        let want_dx = m == Modality::Roi && attention;
        let dx = head_backward(&state.params, state.layout.head(m), hc, dy, &mut grad, want_dx);
        if let Some(dx) = dx {
            let d = dataset.roi.cols();
            let att = state.layout.attention(&state.params);
            for (row, &i) in indices.iter().enumerate() {
                attention_backward(dataset.rois(i), d, &att, dx.row(row), &mut grad, &state.layout);
            }
        }
    }
    let t = state.layout.temperature.start;
    grad[t] = g.d_log_inv_tau;
    if let Some(d) = g.d_log_inv_tau_intra {
        grad[t + 1] = d;
    }
    Ok((value, grad, f.raw))
}

/// Training objective and its gradient with respect to every parameter.
pub fn batch_gradient(state: &TrainState, dataset: &SynthDataset, indices: &[usize]) -> Result<(f64, Vec<f64>)> {
    let (value, grad, _) = gradient_with(state, dataset, indices, None)?;
    Ok((value, grad))
}

fn epoch_order(n_train: usize, seed: Seed, epoch: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n_train).collect();
    order.shuffle(&mut seed.derive(1_000 + epoch).rng());
    order
}

/// Trains from a fresh initialization for `config.steps` steps.
pub fn train(dataset: &SynthDataset, config: &TrainConfig) -> Result<(TrainState, Vec<StepLog>)> {
    let state = TrainState::init(dataset, config)?;
    resume(state, dataset, config.steps)
}

/// Continues training until `until` steps have been taken in total.
pub fn resume(mut state: TrainState, dataset: &SynthDataset, until: u64) -> Result<(TrainState, Vec<StepLog>)> {
    let cfg = state.config.clone();
    cfg.validate()?;
    let (train_range, _) = cfg.split(dataset.len())?;
    if state.layout != Layout::new(cfg.dims(dataset), !cfg.loss.shared_temperature) {
        return Err(Error::ConfigInvalid("checkpoint dimensions do not match the dataset".into()));
    }
    let until = until.min(cfg.steps);
    let mut log = Vec::new();
    if state.step() >= until {
        return Ok((state, log));
    }
    let roles = state.layout.roles(state.freezes_guidance());
    let cache = if state.freezes_guidance() { Some(GuidanceCache::build(&state, dataset)?) } else { None };
    let per_epoch = (train_range.len() / cfg.batch_size) as u64;
    let hp = cfg.adam();
    let mut order: Option<(u64, Vec<usize>)> = None;

    while state.step() < until {
        let step = state.step();
        let epoch = step / per_epoch;
        if order.as_ref().map(|(e, _)| *e) != Some(epoch) {
            order = Some((epoch, epoch_order(train_range.len(), cfg.seed, epoch)));
        }
        let pos = (step % per_epoch) as usize * cfg.batch_size;
        let batch: Vec<usize> =
            order.as_ref().expect("order set above").1[pos..pos + cfg.batch_size].iter().map(|&i| train_range.start + i).collect();

        let (value, mut grad, raw) = gradient_with(&state, dataset, &batch, cache.as_ref())?;
        if !value.is_finite() {
            return Err(Error::NonFinite { index: step as usize });
        }
        if let Some(max_norm) = cfg.grad_clip {
            let sq: f64 = grad.iter().zip(&roles).filter(|(_, r)| **r != ParamRole::Frozen).map(|(g, _)| g * g).sum();
            let norm = crate::math::sqrt(sq);
            if norm > max_norm {
                grad.iter_mut().for_each(|g| *g *= max_norm / norm);
            }
        }
        let temps = state.temperatures();
        let breakdown = softclip_total(
            &EmbeddingBatch::normalize(&raw.v)?,
            &EmbeddingBatch::normalize(&raw.t)?,
            &EmbeddingBatch::normalize(&raw.r)?,
            &EmbeddingBatch::normalize(&raw.a)?,
            &temps,
            &cfg.loss,
        )?;
        let lr = lr_at(step, cfg.steps, cfg.learning_rate, cfg.warmup_fraction);
        optimizer_step(&mut state.params, &grad, &roles, &mut state.moments, lr, &hp)?;
        state.clamp_temperatures();
        log.push(StepLog {
            step,
            lr,
            tau: temps.cross.tau(),
            loss: value,
            clip: breakdown.clip,
            soft: breakdown.soft,
            soft_re: breakdown.soft_re,
            total: breakdown.total,
        });
    }
    Ok((state, log))
}

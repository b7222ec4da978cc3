//! Similarity distributions and target distributions.
//!
//! Every distribution is a matrix whose rows are probability vectors: row `i`
//! is the distribution of query `i` over the batch. Cross-modal rows compare a
//! query from one modality against every key of the other, intra-modal rows
//! compare a modality with itself (the diagonal is kept). Targets are one-hot,
//! label-smoothed, or a mix of one-hot and a guidance distribution.
//! [`disentangle_negatives`] drops the positive entry of each row and
//! renormalizes what is left.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math;
use crate::numkit::{gram, l2_normalize_rows, stable_row_softmax, Matrix};

/// Row sums must match one within this tolerance.
pub const ROW_SUM_TOLERANCE: f64 = 1e-9;
/// Off-diagonal mass below this cannot be renormalized.
pub const MIN_NEGATIVE_MASS: f64 = 1e-12;
pub const TAU_MIN: f64 = 0.01;
pub const TAU_MAX: f64 = 100.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Image,
    Text,
    Roi,
    Tag,
}

impl Modality {
    pub const ALL: [Modality; 4] = [Modality::Image, Modality::Text, Modality::Roi, Modality::Tag];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Modality::Image => "image",
            Modality::Text => "text",
            Modality::Roi => "roi",
            Modality::Tag => "tag",
        }
    }
}

/// Learnable temperature stored as `log(1/τ)`.
///
/// The implied `τ` is clamped to `[TAU_MIN, TAU_MAX]` before use, which is the
/// same as clamping `log(1/τ)` to `[-ln 100, ln 100]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Temperature {
    pub log_inv_tau: f64,
}

impl Temperature {
    pub const LOG_INV_MIN: f64 = -4.605_170_185_988_091; // ln(1/100)
    pub const LOG_INV_MAX: f64 = 4.605_170_185_988_091; // ln(1/0.01)

    pub fn from_tau(tau: f64) -> Self {
        Self { log_inv_tau: -math::ln(tau) }
    }

    fn clamped(self) -> f64 {
        self.log_inv_tau.clamp(Self::LOG_INV_MIN, Self::LOG_INV_MAX)
    }

    /// `1/τ`, the factor applied to similarities before the softmax.
    pub fn inv_tau(self) -> f64 {
        math::exp(self.clamped())
    }

    pub fn tau(self) -> f64 {
        1.0 / self.inv_tau()
    }

    /// `d(1/τ) / d(log_inv_tau)`; zero once the clamp is active.
    pub fn inv_tau_derivative(self) -> f64 {
        if (Self::LOG_INV_MIN..=Self::LOG_INV_MAX).contains(&self.log_inv_tau) {
            self.inv_tau()
        } else {
            0.0
        }
    }

    /// Pulls the raw parameter back into the clamp range.
    pub fn clamp_in_place(&mut self) {
        self.log_inv_tau = self.clamped();
    }
}

/// Temperatures used by one forward pass. With `intra == None` the
/// cross-modal temperature is shared by the guidance distributions too.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Temperatures {
    pub cross: Temperature,
    pub intra: Option<Temperature>,
}

impl Temperatures {
    pub fn shared(t: Temperature) -> Self {
        Self { cross: t, intra: None }
    }

    pub fn split(cross: Temperature, intra: Temperature) -> Self {
        Self { cross, intra: Some(intra) }
    }

    /// Temperature for guidance (self-similarity and ROI/tag) distributions.
    pub fn guidance(&self) -> Temperature {
        self.intra.unwrap_or(self.cross)
    }
}

/// Row-normalized batch of embeddings, one row per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBatch(Matrix);

impl EmbeddingBatch {
    /// Accepts a matrix whose rows are already unit length (within 1e-9).
    pub fn from_unit(m: Matrix) -> Result<Self> {
        for (i, row) in m.row_iter().enumerate() {
            let n = crate::numkit::norm(row);
            if (n - 1.0).abs() > 1e-9 {
                return Err(Error::NotStochastic { row: i, reason: "embedding row is not unit length" });
            }
        }
        Ok(Self(m))
    }

    pub fn normalize(raw: &Matrix) -> Result<Self> {
        Ok(Self(l2_normalize_rows(raw)?))
    }

    pub fn as_matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.rows()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dim(&self) -> usize {
        self.0.cols()
    }
}

/// Anything stored as a matrix of probability rows.
pub trait RowDistributions {
    fn as_matrix(&self) -> &Matrix;
}

/// Matrix whose rows are probability distributions.
#[derive(Debug, Clone, PartialEq)]
pub struct RowStochastic(Matrix);

impl RowStochastic {
    pub fn new(m: Matrix) -> Result<Self> {
        check_stochastic(&m)?;
        Ok(Self(m))
    }

    pub(crate) fn from_matrix_unchecked(m: Matrix) -> Self {
        Self(m)
    }

    pub fn as_matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn into_matrix(self) -> Matrix {
        self.0
    }

    pub fn rows(&self) -> usize {
        self.0.rows()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.0.row(i)
    }

    fn square_batch(&self, op: &'static str) -> Result<usize> {
        let (r, c) = self.0.shape();
        if r != c {
            return Err(Error::shape(op, (r, c), (r, r)));
        }
        if r < 2 {
            return Err(Error::BatchTooSmall { n: r });
        }
        Ok(r)
    }
}

impl RowDistributions for RowStochastic {
    fn as_matrix(&self) -> &Matrix {
        &self.0
    }
}

/// Negative-only distributions: row `i` holds the batch-`N` row with entry
/// `i` removed, renormalized. Column `j` of row `i` is original column
/// [`NegDisentangled::original_index`]`(i, j)`.
#[derive(Debug, Clone, PartialEq)]
pub struct NegDisentangled {
    inner: Matrix,
}

impl NegDisentangled {
    pub fn batch_size(&self) -> usize {
        self.inner.rows()
    }

    pub fn original_index(row: usize, col: usize) -> usize {
        if col < row {
            col
        } else {
            col + 1
        }
    }
}

impl RowDistributions for NegDisentangled {
    fn as_matrix(&self) -> &Matrix {
        &self.inner
    }
}

fn check_stochastic(m: &Matrix) -> Result<()> {
    for (i, row) in m.row_iter().enumerate() {
        if row.iter().any(|&x| !(-1e-12..=1.0 + 1e-12).contains(&x)) {
            return Err(Error::NotStochastic { row: i, reason: "entry outside [0, 1]" });
        }
        if (row.iter().sum::<f64>() - 1.0).abs() > ROW_SUM_TOLERANCE {
            return Err(Error::NotStochastic { row: i, reason: "row does not sum to 1" });
        }
    }
    Ok(())
}

fn scaled_softmax(query: &Matrix, key: &Matrix, tau: Temperature) -> Result<RowStochastic> {
    if query.shape() != key.shape() {
        return Err(Error::shape("similarity distribution", query.shape(), key.shape()));
    }
    if query.rows() < 2 {
        return Err(Error::BatchTooSmall { n: query.rows() });
    }
    let logits = gram(query, key)?.scaled(tau.inv_tau());
    Ok(stable_row_softmax(&logits))
}

/// `out[i][j] = softmax_j(v_i · t_j / τ)`. Swap the arguments for text-to-image.
pub fn cross_modal_dist(v: &EmbeddingBatch, t: &EmbeddingBatch, tau: Temperature) -> Result<RowStochastic> {
    scaled_softmax(v.as_matrix(), t.as_matrix(), tau)
}

/// Self-similarity distribution of one modality; the diagonal is included.
pub fn intra_modal_dist(x: &EmbeddingBatch, tau: Temperature) -> Result<RowStochastic> {
    scaled_softmax(x.as_matrix(), x.as_matrix(), tau)
}

pub fn one_hot_targets(n: usize) -> Result<RowStochastic> {
    if n == 0 {
        return Err(Error::BatchTooSmall { n });
    }
    Ok(RowStochastic(Matrix::identity(n)))
}

/// Positive `1 − α`, every negative `α/(n−1)`.
pub fn label_smooth_targets(n: usize, alpha: f64) -> Result<RowStochastic> {
    if n < 2 {
        return Err(Error::BatchTooSmall { n });
    }
    if !(0.0..1.0).contains(&alpha) {
        return Err(Error::ConfigInvalid(alloc::format!("alpha must be in [0, 1), got {alpha}")));
    }
    let off = alpha / (n - 1) as f64;
    let mut m = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            m.set(i, j, if i == j { 1.0 - alpha } else { off });
        }
    }
    Ok(RowStochastic(m))
}

/// `(1 − β)·onehot + β·soft`, entrywise.
pub fn mix_targets(onehot: &RowStochastic, soft: &RowStochastic, beta: f64) -> Result<RowStochastic> {
    if onehot.0.shape() != soft.0.shape() {
        return Err(Error::shape("mix_targets", onehot.0.shape(), soft.0.shape()));
    }
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::ConfigInvalid(alloc::format!("beta must be in [0, 1], got {beta}")));
    }
    let data: Vec<f64> = onehot
        .0
        .as_slice()
        .iter()
        .zip(soft.0.as_slice())
        .map(|(&y, &p)| (1.0 - beta) * y + beta * p)
        .collect();
    Ok(RowStochastic(Matrix::from_vec_unchecked(onehot.0.rows(), onehot.0.cols(), data)))
}

/// A single remaining negative renormalizes to exactly 1 whenever it has any
/// mass at all, so the saturation threshold only applies for `n > 2`.
pub(crate) fn negatives_degenerate(mass: f64, n: usize) -> bool {
    if n == 2 {
        !(mass > 0.0)
    } else {
        !(mass >= MIN_NEGATIVE_MASS)
    }
}

/// Drops entry `i` of row `i` and renormalizes the remaining negatives.
pub fn disentangle_negatives(p: &RowStochastic) -> Result<NegDisentangled> {
    let n = p.square_batch("disentangle_negatives")?;
    let mut out = Matrix::zeros(n, n - 1);
    for i in 0..n {
        let row = p.row(i);
        let mass: f64 = row.iter().enumerate().filter(|&(j, _)| j != i).map(|(_, x)| x).sum();
        if negatives_degenerate(mass, n) {
            return Err(Error::DegenerateRow { row: i });
        }
        let dst = out.row_mut(i);
        for (col, slot) in dst.iter_mut().enumerate() {
            *slot = row[NegDisentangled::original_index(i, col)] / mass;
        }
    }
    Ok(NegDisentangled { inner: out })
}

//! Two-layer tanh encoder heads, ROI aggregation and the flat parameter
//! layout they share.

use alloc::vec;
use alloc::vec::Vec;
use core::ops::Range;

use serde::{Deserialize, Serialize};

use super::optim::ParamRole;
use crate::distributions::{Modality, Temperature};
use crate::error::{Error, Result};
use crate::math;
use crate::numkit::{dot, Matrix, Seed};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoiAggregation {
    Mean,
    Max,
    Min,
    #[default]
    Attention,
}

impl RoiAggregation {
    pub fn name(self) -> &'static str {
        match self {
            RoiAggregation::Mean => "mean",
            RoiAggregation::Max => "max",
            RoiAggregation::Min => "min",
            RoiAggregation::Attention => "attention",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub d_image: usize,
    pub d_text: usize,
    pub d_roi: usize,
    pub d_tag: usize,
    pub hidden: usize,
    pub embed: usize,
    /// Key width of the ROI attention aggregator.
    pub key_dim: usize,
}

impl ModelDims {
    pub fn input(&self, m: Modality) -> usize {
        match m {
            Modality::Image => self.d_image,
            Modality::Text => self.d_text,
            Modality::Roi => self.d_roi,
            Modality::Tag => self.d_tag,
        }
    }
}

/// Offsets of one head `y = W2·tanh(W1·x + b1) + b2` in the flat vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HeadLayout {
    pub input: usize,
    pub hidden: usize,
    pub output: usize,
    pub offset: usize,
}

impl HeadLayout {
    pub fn w1(&self) -> Range<usize> {
        self.offset..self.offset + self.hidden * self.input
    }

    pub fn b1(&self) -> Range<usize> {
        let s = self.w1().end;
        s..s + self.hidden
    }

    pub fn w2(&self) -> Range<usize> {
        let s = self.b1().end;
        s..s + self.output * self.hidden
    }

    pub fn b2(&self) -> Range<usize> {
        let s = self.w2().end;
        s..s + self.output
    }

    pub fn range(&self) -> Range<usize> {
        self.offset..self.b2().end
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub dims: ModelDims,
    heads: [HeadLayout; 4],
    pub query: Range<usize>,
    pub keys: Range<usize>,
    pub value_scale: Range<usize>,
    /// `log(1/τ)` for the cross-modal distributions, then optionally a
    /// separate one for the guidance distributions.
    pub temperature: Range<usize>,
    pub len: usize,
}

impl Layout {
    pub fn new(dims: ModelDims, split_temperature: bool) -> Self {
        let mut offset = 0;
        let heads = Modality::ALL.map(|m| {
            let h = HeadLayout { input: dims.input(m), hidden: dims.hidden, output: dims.embed, offset };
            offset = h.range().end;
            h
        });
        let query = offset..offset + dims.key_dim;
        let keys = query.end..query.end + dims.key_dim * dims.d_roi;
        let value_scale = keys.end..keys.end + dims.d_roi;
        let temperature = value_scale.end..value_scale.end + if split_temperature { 2 } else { 1 };
        let len = temperature.end;
        Self { dims, heads, query, keys, value_scale, temperature, len }
    }

    pub fn head(&self, m: Modality) -> &HeadLayout {
        &self.heads[m.index()]
    }

    pub fn split_temperature(&self) -> bool {
        self.temperature.len() == 2
    }

    /// Everything that only feeds the guidance distributions.
    pub fn guidance_range(&self) -> Range<usize> {
        self.head(Modality::Roi).offset..self.value_scale.end
    }

    /// Weight decay on encoder weights, none on temperatures; guidance
    /// parameters are frozen when `freeze_guidance` is set.
    pub fn roles(&self, freeze_guidance: bool) -> Vec<ParamRole> {
        let mut roles = vec![ParamRole::Decayed; self.len];
        if freeze_guidance {
            roles[self.guidance_range()].iter_mut().for_each(|r| *r = ParamRole::Frozen);
        }
        roles[self.temperature.clone()].iter_mut().for_each(|r| *r = ParamRole::Plain);
        roles
    }

    /// `W1 ~ N(0, 1/in)`, `W2 ~ N(0, 1/H)`, zero biases, zero attention
    /// query, `Wk ~ N(0, 1/d_roi)`, unit value scales, `log(1/τ₀)`.
    pub fn init(&self, seed: Seed, tau_init: f64) -> Vec<f64> {
        use rand_distr::{Distribution, StandardNormal};
        let mut p = vec![0.0; self.len];
        let mut fill = |range: Range<usize>, std: f64, stream: u64| {
            let mut rng = seed.derive(stream).rng();
            for x in &mut p[range] {
                let z: f64 = StandardNormal.sample(&mut rng);
                *x = std * z;
            }
        };
        for (k, h) in self.heads.iter().enumerate() {
            fill(h.w1(), 1.0 / math::sqrt(h.input as f64), 2 * k as u64);
            fill(h.w2(), 1.0 / math::sqrt(h.hidden as f64), 2 * k as u64 + 1);
        }
        fill(self.keys.clone(), 1.0 / math::sqrt(self.dims.d_roi as f64), 8);
        p[self.value_scale.clone()].iter_mut().for_each(|x| *x = 1.0);
        let l = Temperature::from_tau(tau_init).log_inv_tau;
        p[self.temperature.clone()].iter_mut().for_each(|x| *x = l);
        p
    }

    pub fn attention<'a>(&self, params: &'a [f64]) -> Attention<'a> {
        Attention {
            query: &params[self.query.clone()],
            keys: &params[self.keys.clone()],
            value_scale: &params[self.value_scale.clone()],
        }
    }

    pub fn aggregator<'a>(&self, mode: RoiAggregation, params: &'a [f64]) -> Aggregator<'a> {
        match mode {
            RoiAggregation::Mean => Aggregator::Mean,
            RoiAggregation::Max => Aggregator::Max,
            RoiAggregation::Min => Aggregator::Min,
            RoiAggregation::Attention => Aggregator::Attention(self.attention(params)),
        }
    }
}

/// Single-query attention pooling: weights `softmax(q·(Wk x_m)/√d_k)`,
/// values `value_scale ⊙ x_m`.
#[derive(Debug, Clone, Copy)]
pub struct Attention<'a> {
    pub query: &'a [f64],
    /// `d_k × d_roi`, row-major.
    pub keys: &'a [f64],
    pub value_scale: &'a [f64],
}

#[derive(Debug, Clone, Copy)]
pub enum Aggregator<'a> {
    Mean,
    Max,
    Min,
    Attention(Attention<'a>),
}

impl Attention<'_> {
    fn key_dim(&self) -> usize {
        self.query.len()
    }

    fn key(&self, x: &[f64], out: &mut [f64]) {
        let d = x.len();
        for (a, o) in out.iter_mut().enumerate() {
            *o = dot(&self.keys[a * d..(a + 1) * d], x);
        }
    }

    fn weights(&self, rois: &[f64], d: usize) -> (Vec<f64>, Vec<f64>) {
        let m = rois.len() / d;
        let dk = self.key_dim();
        let inv = 1.0 / math::sqrt(dk as f64);
        let mut keys = vec![0.0; m * dk];
        let mut scores = vec![0.0; m];
        for r in 0..m {
            self.key(&rois[r * d..(r + 1) * d], &mut keys[r * dk..(r + 1) * dk]);
            scores[r] = inv * dot(self.query, &keys[r * dk..(r + 1) * dk]);
        }
        let mut w = vec![0.0; m];
        crate::numkit::softmax_into(&scores, &mut w);
        (w, keys)
    }
}

fn check_rois(rois: &[f64], d: usize) -> Result<usize> {
    if rois.is_empty() || d == 0 {
        return Err(Error::EmptySequence);
    }
    if !rois.len().is_multiple_of(d) {
        return Err(Error::BadLength { rows: rois.len() / d, cols: d, len: rois.len() });
    }
    Ok(rois.len() / d)
}

/// Pools an `M × d` row-major ROI sequence into one `d`-vector.
pub fn roi_aggregate(rois: &[f64], d: usize, agg: &Aggregator) -> Result<Vec<f64>> {
    let m = check_rois(rois, d)?;
    let rows = || rois.chunks_exact(d);
    let mut out = match agg {
        Aggregator::Max => vec![f64::NEG_INFINITY; d],
        Aggregator::Min => vec![f64::INFINITY; d],
        _ => vec![0.0; d],
    };
    match agg {
        Aggregator::Mean => {
            for row in rows() {
                out.iter_mut().zip(row).for_each(|(o, x)| *o += x);
            }
            out.iter_mut().for_each(|o| *o /= m as f64);
        }
        Aggregator::Max => rows().for_each(|row| out.iter_mut().zip(row).for_each(|(o, &x)| *o = o.max(x))),
        Aggregator::Min => rows().for_each(|row| out.iter_mut().zip(row).for_each(|(o, &x)| *o = o.min(x))),
        Aggregator::Attention(att) => {
            let (w, _) = att.weights(rois, d);
            for (row, &wr) in rows().zip(&w) {
                out.iter_mut().zip(row).for_each(|(o, x)| *o += wr * x);
            }
            out.iter_mut().zip(att.value_scale).for_each(|(o, s)| *o *= s);
        }
    }
    Ok(out)
}

/// Accumulates the attention parameter gradients for one ROI sequence given
/// the gradient of the pooled output.
pub(crate) fn attention_backward(
    rois: &[f64],
    d: usize,
    att: &Attention,
    d_out: &[f64],
    grad: &mut [f64],
    layout: &Layout,
) {
    let m = rois.len() / d;
    let dk = att.key_dim();
    let inv = 1.0 / math::sqrt(dk as f64);
    let (w, keys) = att.weights(rois, d);
    let mut pooled = vec![0.0; d];
    for (row, &wr) in rois.chunks_exact(d).zip(&w) {
        pooled.iter_mut().zip(row).for_each(|(o, x)| *o += wr * x);
    }
    let g_value = &mut grad[layout.value_scale.clone()];
    for ((g, &dy), &p) in g_value.iter_mut().zip(d_out).zip(&pooled) {
        *g += dy * p;
    }
    let u: Vec<f64> = d_out.iter().zip(att.value_scale).map(|(a, b)| a * b).collect();
    let dw: Vec<f64> = rois.chunks_exact(d).map(|row| dot(&u, row)).collect();
    let mean_dw = dot(&dw, &w);
    for r in 0..m {
        let ds = w[r] * (dw[r] - mean_dw) * inv;
        if ds == 0.0 {
            continue;
        }
        let key = &keys[r * dk..(r + 1) * dk];
        for (g, &k) in grad[layout.query.clone()].iter_mut().zip(key) {
            *g += ds * k;
        }
        let row = &rois[r * d..(r + 1) * d];
        let g_keys = &mut grad[layout.keys.clone()];
        for (a, &q) in att.query.iter().enumerate() {
            let c = ds * q;
            if c == 0.0 {
                continue;
            }
            for (g, &x) in g_keys[a * d..(a + 1) * d].iter_mut().zip(row) {
                *g += c * x;
            }
        }
    }
}

/// Activations kept for the backward pass.
#[derive(Debug, Clone)]
pub(crate) struct HeadCache {
    x: Matrix,
    h: Matrix,
}

fn affine(x: &Matrix, w: &[f64], b: &[f64]) -> Matrix {
    let (n, input, output) = (x.rows(), x.cols(), b.len());
    let mut y = Matrix::zeros(n, output);
    for i in 0..n {
        let xi = x.row(i);
        for (o, yo) in y.row_mut(i).iter_mut().enumerate() {
            *yo = b[o] + dot(&w[o * input..(o + 1) * input], xi);
        }
    }
    y
}

/// Raw (unnormalized) head output for a batch of inputs.
pub(crate) fn head_forward(params: &[f64], hl: &HeadLayout, x: Matrix) -> (Matrix, HeadCache) {
    let mut h = affine(&x, &params[hl.w1()], &params[hl.b1()]);
    h.as_mut_slice().iter_mut().for_each(|v| *v = math::tanh(*v));
    let y = affine(&h, &params[hl.w2()], &params[hl.b2()]);
    (y, HeadCache { x, h })
}

/// Accumulates head parameter gradients into `grad`; returns the input
/// gradient when asked.
pub(crate) fn head_backward(
    params: &[f64],
    hl: &HeadLayout,
    cache: &HeadCache,
    dy: &Matrix,
    grad: &mut [f64],
    want_dx: bool,
) -> Option<Matrix> {
    let (n, input, hidden) = (dy.rows(), hl.input, hl.hidden);
    let w2 = &params[hl.w2()];
    let w1 = &params[hl.w1()];
    let mut dpre = Matrix::zeros(n, hidden);
    for i in 0..n {
        let dyi = dy.row(i);
        let hi = cache.h.row(i);
        {
            let g = &mut grad[hl.w2()];
            for (o, &d) in dyi.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                for (gk, &hk) in g[o * hidden..(o + 1) * hidden].iter_mut().zip(hi) {
                    *gk += d * hk;
                }
            }
        }
        grad[hl.b2()].iter_mut().zip(dyi).for_each(|(g, d)| *g += d);
        let dp = dpre.row_mut(i);
        for (o, &d) in dyi.iter().enumerate() {
            for (acc, &w) in dp.iter_mut().zip(&w2[o * hidden..(o + 1) * hidden]) {
                *acc += d * w;
            }
        }
        for (acc, &hk) in dp.iter_mut().zip(hi) {
            *acc *= 1.0 - hk * hk;
        }
    }
    for i in 0..n {
        let dp = dpre.row(i);
        let xi = cache.x.row(i);
        let g = &mut grad[hl.w1()];
        for (k, &d) in dp.iter().enumerate() {
            if d == 0.0 {
                continue;
            }
            for (gj, &xj) in g[k * input..(k + 1) * input].iter_mut().zip(xi) {
                *gj += d * xj;
            }
        }
        grad[hl.b1()].iter_mut().zip(dp).for_each(|(g, d)| *g += d);
    }
    if !want_dx {
        return None;
    }
    let mut dx = Matrix::zeros(n, input);
    for i in 0..n {
        let dp = dpre.row(i);
        let out = dx.row_mut(i);
        for (k, &d) in dp.iter().enumerate() {
            if d == 0.0 {
                continue;
            }
            for (o, &w) in out.iter_mut().zip(&w1[k * input..(k + 1) * input]) {
                *o += d * w;
            }
        }
    }
    Some(dx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::central_difference;

    fn dims() -> ModelDims {
        ModelDims { d_image: 3, d_text: 4, d_roi: 5, d_tag: 2, hidden: 6, embed: 3, key_dim: 2 }
    }

    #[test]
    fn layout_is_contiguous() {
        let l = Layout::new(dims(), true);
        let mut end = 0;
        for m in Modality::ALL {
            let h = l.head(m);
            assert_eq!(h.offset, end);
            end = h.range().end;
        }
        assert_eq!(l.query.start, end);
        assert_eq!(l.len, l.temperature.end);
        assert_eq!(l.temperature.len(), 2);
        let roles = l.roles(true);
        assert_eq!(roles[l.head(Modality::Image).offset], ParamRole::Decayed);
        assert_eq!(roles[l.head(Modality::Tag).offset], ParamRole::Frozen);
        assert_eq!(roles[l.query.start], ParamRole::Frozen);
        assert_eq!(roles[l.temperature.start], ParamRole::Plain);
    }

    #[test]
    fn aggregation_examples() {
        let rois = [1.0, 0.0, 0.0, 1.0];
        assert_eq!(roi_aggregate(&rois, 2, &Aggregator::Mean).unwrap(), vec![0.5, 0.5]);
        assert_eq!(roi_aggregate(&rois, 2, &Aggregator::Max).unwrap(), vec![1.0, 1.0]);
        assert_eq!(roi_aggregate(&rois, 2, &Aggregator::Min).unwrap(), vec![0.0, 0.0]);
        let single = [0.3, -2.0];
        for agg in [Aggregator::Mean, Aggregator::Max, Aggregator::Min] {
            assert_eq!(roi_aggregate(&single, 2, &agg).unwrap(), single.to_vec());
        }
        assert!(matches!(roi_aggregate(&[], 2, &Aggregator::Mean), Err(Error::EmptySequence)));
    }

    #[test]
    fn zero_query_attention_is_mean() {
        let l = Layout::new(dims(), false);
        let p = l.init(Seed(1), 0.07);
        let rois: Vec<f64> = (0..15).map(|k| (k as f64 * 0.37).sin()).collect();
        let att = l.aggregator(RoiAggregation::Attention, &p);
        let a = roi_aggregate(&rois, 5, &att).unwrap();
        let m = roi_aggregate(&rois, 5, &Aggregator::Mean).unwrap();
        for (x, y) in a.iter().zip(&m) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_gradients_match_differences() {
        let l = Layout::new(dims(), false);
        let mut p = l.init(Seed(2), 0.07);
        // Move away from the zero query so every path is exercised.
        for (k, i) in l.query.clone().enumerate() {
            p[i] = 0.7 - 0.9 * k as f64;
        }
        for (k, i) in l.value_scale.clone().enumerate() {
            p[i] = 1.0 + 0.1 * k as f64;
        }
        let rois: Vec<f64> = (0..15).map(|k| (k as f64 * 1.3).cos()).collect();
        let coef = [0.4, -1.1, 0.25, 0.9, -0.3];
        let f = |q: &[f64]| {
            let agg = l.aggregator(RoiAggregation::Attention, q);
            dot(&roi_aggregate(&rois, 5, &agg).unwrap(), &coef)
        };
        let mut grad = vec![0.0; l.len];
        attention_backward(&rois, 5, &l.attention(&p), &coef, &mut grad, &l);
        let fd = central_difference(f, &p, 1e-6);
        for i in l.query.start..l.value_scale.end {
            assert!((grad[i] - fd[i]).abs() < 1e-8, "{i}: {} vs {}", grad[i], fd[i]);
        }
    }

    #[test]
    fn head_gradients_match_differences() {
        let l = Layout::new(dims(), false);
        let p = l.init(Seed(3), 0.07);
        let hl = *l.head(Modality::Text);
        let x = crate::numkit::gaussian_matrix(3, 4, Seed(4));
        let coef = crate::numkit::gaussian_matrix(3, 3, Seed(5));
        let f = |q: &[f64]| {
            let (y, _) = head_forward(q, &hl, x.clone());
            dot(y.as_slice(), coef.as_slice())
        };
        let (_, cache) = head_forward(&p, &hl, x.clone());
        let mut grad = vec![0.0; l.len];
        let dx = head_backward(&p, &hl, &cache, &coef, &mut grad, true).unwrap();
        let fd = central_difference(f, &p, 1e-6);
        for i in hl.range() {
            assert!((grad[i] - fd[i]).abs() < 1e-8, "{i}");
        }
        let fx = |v: &[f64]| {
            let (y, _) = head_forward(&p, &hl, Matrix::new(3, 4, v.to_vec()).unwrap());
            dot(y.as_slice(), coef.as_slice())
        };
        let fdx = central_difference(fx, x.as_slice(), 1e-6);
        for (a, b) in dx.as_slice().iter().zip(&fdx) {
            assert!((a - b).abs() < 1e-8);
        }
    }
}

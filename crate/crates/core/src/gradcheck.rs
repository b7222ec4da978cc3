//! Analytic gradients of the objectives and a central-difference checker.
//!
//! [`backward`] differentiates every loss with respect to the raw
//! (pre-normalization) embeddings of all four modalities and the temperature
//! parameters. The graph is fixed and shallow, so each stage has a closed
//! form:
//!
//! * divergence rows: `∂KL(t‖p)/∂p = −t/p`, `∂KL(t‖p)/∂t = ln(t/p) + 1`,
//!   `∂JS/∂a = ½ ln(a/m)`;
//! * negative disentanglement `x*_j = x_j / S`: `∂/∂x_j = (g*_j − ⟨g*, x*⟩)/S`;
//! * row softmax: `∂/∂z = p ⊙ (g − ⟨g, p⟩)`;
//! * scaled similarities `z = s·q·kᵀ`: `∂q = s·dz·k`, `∂k = s·dzᵀ·q`,
//!   `∂s = Σ dz ⊙ (q·kᵀ)`;
//! * row normalization `x = u/‖u‖`: `∂u = (dx − x⟨dx, x⟩)/‖u‖`.
//!
//! [`finite_difference_grad`] never touches this code. It perturbs inputs and
//! re-runs a separate double-double forward pass, which is itself checked
//! against [`crate::objectives`].

use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use self::dd::Dd;

use crate::distributions::{
    intra_modal_dist, label_smooth_targets, one_hot_targets, EmbeddingBatch, Modality, RowStochastic, Temperature,
    Temperatures,
};
use crate::error::{Error, Result};
use crate::math;
use crate::numkit::{gaussian_matrix, gram, norm, softmax_into, Matrix, Seed};
use crate::objectives::{
    clip_loss_from, guidance_losses_from, relation_enhanced_soft_loss, soft_loss, softclip_total_from, DistSet,
    Divergence, LossConfig, SupervisionForm,
};

mod dd;
mod reference;

pub const DEFAULT_EPSILON: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-5;
/// Below this magnitude an analytic entry is compared by absolute error.
pub const RELATIVE_THRESHOLD: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossSelector {
    Clip,
    Soft,
    SoftRe,
    Total,
    MixedGamma,
}

impl LossSelector {
    pub const ALL: [LossSelector; 5] =
        [LossSelector::Clip, LossSelector::Soft, LossSelector::SoftRe, LossSelector::Total, LossSelector::MixedGamma];

    pub fn name(self) -> &'static str {
        match self {
            LossSelector::Clip => "clip",
            LossSelector::Soft => "soft",
            LossSelector::SoftRe => "soft_re",
            LossSelector::Total => "total",
            LossSelector::MixedGamma => "mixed_gamma",
        }
    }
}

/// Pre-normalization embeddings for the four modalities.
#[derive(Debug, Clone, PartialEq)]
pub struct RawInputs {
    pub v: Matrix,
    pub t: Matrix,
    pub r: Matrix,
    pub a: Matrix,
}

impl RawInputs {
    pub fn random(n: usize, d: usize, seed: Seed) -> Self {
        Self {
            v: gaussian_matrix(n, d, seed.derive(0)),
            t: gaussian_matrix(n, d, seed.derive(1)),
            r: gaussian_matrix(n, d, seed.derive(2)),
            a: gaussian_matrix(n, d, seed.derive(3)),
        }
    }

    pub fn get(&self, m: Modality) -> &Matrix {
        match m {
            Modality::Image => &self.v,
            Modality::Text => &self.t,
            Modality::Roi => &self.r,
            Modality::Tag => &self.a,
        }
    }

    pub fn get_mut(&mut self, m: Modality) -> &mut Matrix {
        match m {
            Modality::Image => &mut self.v,
            Modality::Text => &mut self.t,
            Modality::Roi => &mut self.r,
            Modality::Tag => &mut self.a,
        }
    }

    fn check(&self) -> Result<usize> {
        let n = self.v.rows();
        for m in [&self.t, &self.r, &self.a] {
            if m.rows() != n {
                return Err(Error::shape("inputs", self.v.shape(), m.shape()));
            }
        }
        if self.v.cols() != self.t.cols() {
            return Err(Error::shape("inputs", self.v.shape(), self.t.shape()));
        }
        if self.r.cols() != self.a.cols() {
            return Err(Error::shape("inputs", self.r.shape(), self.a.shape()));
        }
        Ok(n)
    }

    fn normalized(&self) -> Result<[EmbeddingBatch; 4]> {
        Ok([
            EmbeddingBatch::normalize(&self.v)?,
            EmbeddingBatch::normalize(&self.t)?,
            EmbeddingBatch::normalize(&self.r)?,
            EmbeddingBatch::normalize(&self.a)?,
        ])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientBundle {
    pub d_v: Matrix,
    pub d_t: Matrix,
    pub d_r: Matrix,
    pub d_a: Matrix,
    pub d_log_inv_tau: f64,
    /// Present when the guidance distributions use their own temperature.
    pub d_log_inv_tau_intra: Option<f64>,
}

impl GradientBundle {
    pub fn get(&self, m: Modality) -> &Matrix {
        match m {
            Modality::Image => &self.d_v,
            Modality::Text => &self.d_t,
            Modality::Roi => &self.d_r,
            Modality::Tag => &self.d_a,
        }
    }

    fn get_mut(&mut self, m: Modality) -> &mut Matrix {
        match m {
            Modality::Image => &mut self.d_v,
            Modality::Text => &mut self.d_t,
            Modality::Roi => &mut self.d_r,
            Modality::Tag => &mut self.d_a,
        }
    }

    fn zeros_like(inputs: &RawInputs, temps: &Temperatures) -> Self {
        Self {
            d_v: Matrix::zeros(inputs.v.rows(), inputs.v.cols()),
            d_t: Matrix::zeros(inputs.t.rows(), inputs.t.cols()),
            d_r: Matrix::zeros(inputs.r.rows(), inputs.r.cols()),
            d_a: Matrix::zeros(inputs.a.rows(), inputs.a.cols()),
            d_log_inv_tau: 0.0,
            d_log_inv_tau_intra: temps.intra.map(|_| 0.0),
        }
    }
}

// ---------------------------------------------------------------------------
// Forward oracle path.

fn evaluate_f64(selector: LossSelector, inputs: &RawInputs, temps: &Temperatures, cfg: &LossConfig) -> Result<f64> {
    inputs.check()?;
    let [v, t, r, a] = inputs.normalized()?;
    let dists = DistSet::build(&v, &t, &r, &a, temps, cfg.supervision_form)?;
    match selector {
        LossSelector::Clip => {
            let n = v.len();
            let y = if cfg.label_smoothing { label_smooth_targets(n, cfg.alpha)? } else { one_hot_targets(n)? };
            clip_loss_from(&dists.image_to_text, &dists.text_to_image, &y, cfg.target_floor)
        }
        LossSelector::Soft => soft_loss(&dists, cfg),
        LossSelector::SoftRe => relation_enhanced_soft_loss(&dists, cfg),
        LossSelector::Total => Ok(softclip_total_from(&dists, cfg)?.total),
        LossSelector::MixedGamma => {
            let g = temps.guidance();
            let (image_self, text_self) = (intra_modal_dist(&v, g)?, intra_modal_dist(&t, g)?);
            Ok(guidance_losses_from(&dists, &image_self, &text_self, cfg)?.mix(cfg.gamma))
        }
    }
}

/// Forward value of the selected loss from raw inputs, fully differentiable
/// (targets are not held fixed).
pub fn evaluate(selector: LossSelector, inputs: &RawInputs, temps: &Temperatures, cfg: &LossConfig) -> Result<f64> {
    evaluate_f64(selector, inputs, temps, cfg)
}

/// Central differences of `f` at `x`, one coordinate at a time.
pub fn central_difference<F>(mut f: F, x: &[f64], eps: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + eps;
            let hi = f(&probe);
            probe[i] = x[i] - eps;
            let lo = f(&probe);
            probe[i] = x[i];
            (hi - lo) / (2.0 * eps)
        })
        .collect()
}

/// Central-difference gradient of the selected loss. Perturbations apply to
/// the pre-normalization inputs and the temperature parameters. With
/// `stop_gradient_targets` the guidance distributions are evaluated at the
/// unperturbed point and held fixed. Loss values are computed in
/// double-double precision so that rounding stays far below the step.
pub fn finite_difference_grad(
    selector: LossSelector,
    inputs: &RawInputs,
    temps: &Temperatures,
    cfg: &LossConfig,
    epsilon: f64,
) -> Result<GradientBundle> {
    if !(1e-7..=1e-3).contains(&epsilon) {
        return Err(Error::ConfigInvalid(alloc::format!("epsilon must be in [1e-7, 1e-3], got {epsilon}")));
    }
    // Surface forward errors exactly as the production path reports them.
    evaluate_f64(selector, inputs, temps, cfg)?;
    let base = reference::Point::new(inputs, temps.cross, temps.intra);
    let frozen =
        if cfg.stop_gradient_targets { Some(reference::guides(selector, &base, cfg)?) } else { None };
    let f = |p: &reference::Point| reference::evaluate(selector, p, cfg, frozen.as_ref());
    let eps = Dd::from(epsilon);
    let two_eps = Dd::from(2.0 * epsilon);

    let mut out = GradientBundle::zeros_like(inputs, temps);
    let mut probe = base.clone();
    for m in Modality::ALL {
        // ROI and tag inputs reach the loss only through guidance.
        if frozen.is_some() && matches!(m, Modality::Roi | Modality::Tag) {
            continue;
        }
        let slot = m.index();
        for k in 0..probe.x[slot].data.len() {
            let x0 = base.x[slot].data[k];
            probe.x[slot].data[k] = x0 + eps;
            let hi = f(&probe)?;
            probe.x[slot].data[k] = x0 - eps;
            let lo = f(&probe)?;
            probe.x[slot].data[k] = x0;
            out.get_mut(m).as_mut_slice()[k] = f64::from((hi - lo) / two_eps);
        }
    }
    let bumped = |intra: bool| -> Result<f64> {
        let mut value = [Dd::ZERO; 2];
        for (slot, delta) in value.iter_mut().zip([eps, -eps]) {
            let mut p = base.clone();
            match (intra, p.log_inv_tau_intra.as_mut()) {
                (true, Some(l)) => *l = *l + delta,
                _ => p.log_inv_tau = p.log_inv_tau + delta,
            }
            *slot = f(&p)?;
        }
        Ok(f64::from((value[0] - value[1]) / two_eps))
    };
    out.d_log_inv_tau = bumped(false)?;
    if temps.intra.is_some() {
        out.d_log_inv_tau_intra = Some(bumped(true)?);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Analytic backward pass.

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Slot {
    Cross,
    Guide,
}

/// One row-softmax distribution `softmax(s · q_i·k_j)` and its gradient.
struct Node {
    query: Modality,
    key: Modality,
    slot: Slot,
    sims: Matrix,
    probs: Matrix,
    grad: Matrix,
}

struct Graph<'a> {
    unit: [Matrix; 4],
    norms: [Vec<f64>; 4],
    temps: &'a Temperatures,
    cfg: &'a LossConfig,
    nodes: Vec<Node>,
    n: usize,
}

/// Accumulates `w · ∂D(t‖p)` into the target and prediction gradients.
fn divergence_grad(div: Divergence, t: &[f64], p: &[f64], floor: f64, w: f64, gt: &mut [f64], gp: &mut [f64]) {
    let lnf = |x: f64| math::ln(x.max(floor));
    // Forward KL(x‖y) contributions to (gx, gy).
    let kl = |x: &[f64], y: &[f64], w: f64, gx: &mut [f64], gy: &mut [f64]| {
        for j in 0..x.len() {
            if x[j] > 0.0 {
                gx[j] += w * (lnf(x[j]) - lnf(y[j]) + if x[j] > floor { 1.0 } else { 0.0 });
                if y[j] > floor {
                    gy[j] -= w * x[j] / y[j];
                }
            } else {
                gx[j] += w * (math::ln(floor) - lnf(y[j]));
            }
        }
    };
    match div {
        Divergence::ForwardKl => kl(t, p, w, gt, gp),
        Divergence::SymmetricKl => {
            kl(t, p, 0.5 * w, gt, gp);
            kl(p, t, 0.5 * w, gp, gt);
        }
        Divergence::Js => {
            for j in 0..t.len() {
                let m = 0.5 * (t[j] + p[j]);
                let mterm = if m > floor { 0.5 } else { 0.0 };
                let side = |x: f64| 0.5 * (lnf(x) - lnf(m)) + if x > floor { 0.5 } else { 0.0 } - mterm;
                gt[j] += w * side(t[j]);
                gp[j] += w * side(p[j]);
            }
        }
    }
}

fn divergence_value(div: Divergence, t: &[f64], p: &[f64], floor: f64) -> f64 {
    div.row(t, p, floor)
}

/// Drops entry `i` and renormalizes; returns the kept mass too.
fn disentangle_row(x: &[f64], i: usize) -> Result<(Vec<f64>, f64)> {
    let mass: f64 = x.iter().enumerate().filter(|&(j, _)| j != i).map(|(_, v)| v).sum();
    if crate::distributions::negatives_degenerate(mass, x.len()) {
        return Err(Error::DegenerateRow { row: i });
    }
    let kept = x.iter().enumerate().filter(|&(j, _)| j != i).map(|(_, v)| v / mass).collect();
    Ok((kept, mass))
}

/// Pulls a gradient on the disentangled row back onto the full row.
fn disentangle_backward(g_star: &[f64], x_star: &[f64], mass: f64, i: usize, w: f64, out: &mut [f64]) {
    let inner: f64 = g_star.iter().zip(x_star).map(|(a, b)| a * b).sum();
    for (col, g) in g_star.iter().enumerate() {
        let j = if col < i { col } else { col + 1 };
        out[j] += w * (g - inner) / mass;
    }
}

impl<'a> Graph<'a> {
    fn new(inputs: &RawInputs, temps: &'a Temperatures, cfg: &'a LossConfig) -> Result<Self> {
        let n = inputs.check()?;
        if n < 2 {
            return Err(Error::BatchTooSmall { n });
        }
        let mut unit: [Matrix; 4] = [Matrix::zeros(1, 1), Matrix::zeros(1, 1), Matrix::zeros(1, 1), Matrix::zeros(1, 1)];
        let mut norms: [Vec<f64>; 4] = Default::default();
        for m in Modality::ALL {
            let raw = inputs.get(m);
            let ns: Vec<f64> = raw.row_iter().map(norm).collect();
            if let Some(row) = ns.iter().position(|&x| !(x >= crate::numkit::MIN_ROW_NORM)) {
                return Err(Error::ZeroRow { row });
            }
            let mut u = raw.clone();
            for (i, &nrm) in ns.iter().enumerate() {
                for x in u.row_mut(i) {
                    *x /= nrm;
                }
            }
            unit[m.index()] = u;
            norms[m.index()] = ns;
        }
        Ok(Self { unit, norms, temps, cfg, nodes: Vec::new(), n })
    }

    fn temperature(&self, slot: Slot) -> Temperature {
        match slot {
            Slot::Cross => self.temps.cross,
            Slot::Guide => self.temps.guidance(),
        }
    }

    fn node(&mut self, query: Modality, key: Modality, slot: Slot) -> usize {
        if let Some(k) = self.nodes.iter().position(|x| x.query == query && x.key == key && x.slot == slot) {
            return k;
        }
        let sims = gram(&self.unit[query.index()], &self.unit[key.index()]).expect("matching dims checked");
        let s = self.temperature(slot).inv_tau();
        let mut probs = Matrix::zeros(self.n, self.n);
        let mut logits = vec![0.0; self.n];
        for i in 0..self.n {
            for (z, &g) in logits.iter_mut().zip(sims.row(i)) {
                *z = s * g;
            }
            softmax_into(&logits, probs.row_mut(i));
        }
        self.nodes.push(Node { query, key, slot, sims, probs, grad: Matrix::zeros(self.n, self.n) });
        self.nodes.len() - 1
    }

    fn predictions(&mut self) -> (usize, usize) {
        (
            self.node(Modality::Image, Modality::Text, Slot::Cross),
            self.node(Modality::Text, Modality::Image, Slot::Cross),
        )
    }

    fn roi_tag_guidance(&mut self, form: SupervisionForm) -> (usize, usize) {
        use Modality::{Roi, Tag};
        let rr = (Roi, Roi);
        let aa = (Tag, Tag);
        let ra = (Roi, Tag);
        let ar = (Tag, Roi);
        let (x, y) = match form {
            SupervisionForm::R2rA2a => (rr, aa),
            SupervisionForm::A2aR2r => (aa, rr),
            SupervisionForm::R2aA2r => (ra, ar),
            SupervisionForm::A2rR2a => (ar, ra),
        };
        (self.node(x.0, x.1, Slot::Guide), self.node(y.0, y.1, Slot::Guide))
    }

    fn image_text_guidance(&mut self) -> (usize, usize) {
        (
            self.node(Modality::Image, Modality::Image, Slot::Guide),
            self.node(Modality::Text, Modality::Text, Slot::Guide),
        )
    }

    fn add_grad(&mut self, node: usize, row: usize, g: &[f64]) {
        for (dst, &x) in self.nodes[node].grad.row_mut(row).iter_mut().zip(g) {
            *dst += x;
        }
    }

    /// Cross-entropy of `targets` against a prediction node, weight `w`.
    fn clip_direction(&mut self, pred: usize, targets: &RowStochastic, w: f64) -> f64 {
        let floor = self.cfg.target_floor;
        let scale = w / self.n as f64;
        let mut value = 0.0;
        let mut g = vec![0.0; self.n];
        for i in 0..self.n {
            let p = self.nodes[pred].probs.row(i);
            let y = targets.row(i);
            let mut row = 0.0;
            for j in 0..self.n {
                g[j] = 0.0;
                if y[j] > 0.0 {
                    row -= y[j] * math::ln(p[j].max(floor));
                    if p[j] > floor {
                        g[j] = -scale * y[j] / p[j];
                    }
                }
            }
            value += row;
            self.add_grad(pred, i, &g);
        }
        w * value / self.n as f64
    }

    fn mixed_row(&self, guide: usize, i: usize) -> Vec<f64> {
        let beta = self.cfg.beta;
        self.nodes[guide]
            .probs
            .row(i)
            .iter()
            .enumerate()
            .map(|(j, &g)| if i == j { 1.0 - beta + beta * g } else { beta * g })
            .collect()
    }

    /// One direction of the soft term (`relation = false`) or the
    /// relation-enhanced term (`relation = true`), weight `w`.
    fn soft_direction(&mut self, pred: usize, guide: usize, w: f64, relation: bool) -> Result<f64> {
        let n = self.n;
        let (div, floor, beta) = (self.cfg.divergence, self.cfg.target_floor, self.cfg.beta);
        let detach = self.cfg.stop_gradient_targets;
        let scale = w / n as f64;
        let mut value = 0.0;
        for i in 0..n {
            let t = self.mixed_row(guide, i);
            let p = self.nodes[pred].probs.row(i).to_vec();
            let mut gp_full = vec![0.0; n];
            let mut gt_full = vec![0.0; n];
            if relation {
                let (ts, tm) = disentangle_row(&t, i)?;
                let (ps, pm) = disentangle_row(&p, i)?;
                value += divergence_value(div, &ts, &ps, floor);
                let mut gts = vec![0.0; n - 1];
                let mut gps = vec![0.0; n - 1];
                divergence_grad(div, &ts, &ps, floor, 1.0, &mut gts, &mut gps);
                disentangle_backward(&gps, &ps, pm, i, scale, &mut gp_full);
                disentangle_backward(&gts, &ts, tm, i, scale, &mut gt_full);
            } else {
                value += divergence_value(div, &t, &p, floor);
                divergence_grad(div, &t, &p, floor, scale, &mut gt_full, &mut gp_full);
            }
            self.add_grad(pred, i, &gp_full);
            if !detach {
                let g: Vec<f64> = gt_full.iter().map(|x| beta * x).collect();
                self.add_grad(guide, i, &g);
            }
        }
        Ok(w * value / n as f64)
    }

    /// Both directions averaged, weight `w`.
    fn soft_term(&mut self, guides: (usize, usize), w: f64, relation: bool) -> Result<f64> {
        self.cfg.check_soft_targets()?;
        let (p_it, p_ti) = self.predictions();
        let a = self.soft_direction(p_it, guides.0, 0.5 * w, relation)?;
        let b = self.soft_direction(p_ti, guides.1, 0.5 * w, relation)?;
        Ok(a + b)
    }

    fn clip_term(&mut self, w: f64) -> Result<f64> {
        let y = if self.cfg.label_smoothing { label_smooth_targets(self.n, self.cfg.alpha)? } else { one_hot_targets(self.n)? };
        let (p_it, p_ti) = self.predictions();
        Ok(self.clip_direction(p_it, &y, 0.5 * w) + self.clip_direction(p_ti, &y, 0.5 * w))
    }

    fn guided(&mut self, guides: (usize, usize), w: f64) -> Result<f64> {
        let mut out = 0.0;
        if self.cfg.soft_weight > 0.0 {
            out += self.soft_term(guides, w * self.cfg.soft_weight, false)?;
        }
        if self.cfg.lambda_re > 0.0 {
            out += self.soft_term(guides, w * self.cfg.lambda_re, true)?;
        }
        Ok(out)
    }

    fn forward(&mut self, selector: LossSelector) -> Result<f64> {
        let form = self.cfg.supervision_form;
        match selector {
            LossSelector::Clip => self.clip_term(1.0),
            LossSelector::Soft => {
                let g = self.roi_tag_guidance(form);
                self.soft_term(g, 1.0, false)
            }
            LossSelector::SoftRe => {
                let g = self.roi_tag_guidance(form);
                self.soft_term(g, 1.0, true)
            }
            LossSelector::Total => {
                let clip = self.clip_term(self.cfg.mu_clip)?;
                let mut soft = 0.0;
                let mut re = 0.0;
                if self.cfg.soft_weight > 0.0 {
                    let g = self.roi_tag_guidance(form);
                    soft = self.soft_term(g, self.cfg.soft_weight, false)?;
                }
                if self.cfg.lambda_re > 0.0 {
                    let g = self.roi_tag_guidance(form);
                    re = self.soft_term(g, self.cfg.lambda_re, true)?;
                }
                Ok(soft + re + clip)
            }
            LossSelector::MixedGamma => {
                let gamma = self.cfg.gamma;
                let ra = self.roi_tag_guidance(form);
                let it = self.image_text_guidance();
                let a = self.guided(ra, gamma)?;
                let b = self.guided(it, 1.0 - gamma)?;
                Ok(a + b)
            }
        }
    }

    fn backward(self, inputs: &RawInputs) -> GradientBundle {
        let mut out = GradientBundle::zeros_like(inputs, self.temps);
        let mut d_unit: [Matrix; 4] = [
            Matrix::zeros(inputs.v.rows(), inputs.v.cols()),
            Matrix::zeros(inputs.t.rows(), inputs.t.cols()),
            Matrix::zeros(inputs.r.rows(), inputs.r.cols()),
            Matrix::zeros(inputs.a.rows(), inputs.a.cols()),
        ];
        let mut d_scale = [0.0_f64; 2];
        for node in &self.nodes {
            if node.grad.is_all_zero() {
                continue;
            }
            let s = self.temperature(node.slot).inv_tau();
            let q = &self.unit[node.query.index()];
            let k = &self.unit[node.key.index()];
            let dim = q.cols();
            let mut dq = vec![0.0; dim];
            let mut dk_rows = Matrix::zeros(self.n, dim);
            for i in 0..self.n {
                let p = node.probs.row(i);
                let g = node.grad.row(i);
                let inner: f64 = p.iter().zip(g).map(|(a, b)| a * b).sum();
                dq.iter_mut().for_each(|x| *x = 0.0);
                for j in 0..self.n {
                    let dz = p[j] * (g[j] - inner);
                    if dz == 0.0 {
                        continue;
                    }
                    d_scale[node.slot as usize] += dz * node.sims.get(i, j);
                    let dsim = s * dz;
                    for (acc, &kx) in dq.iter_mut().zip(k.row(j)) {
                        *acc += dsim * kx;
                    }
                    for (acc, &qx) in dk_rows.row_mut(j).iter_mut().zip(q.row(i)) {
                        *acc += dsim * qx;
                    }
                }
                for (acc, x) in d_unit[node.query.index()].row_mut(i).iter_mut().zip(&dq) {
                    *acc += x;
                }
            }
            d_unit[node.key.index()].add_assign(&dk_rows);
        }

        for m in Modality::ALL {
            let x = &self.unit[m.index()];
            let dx = &d_unit[m.index()];
            let du = out.get_mut(m);
            for i in 0..x.rows() {
                let proj: f64 = x.row(i).iter().zip(dx.row(i)).map(|(a, b)| a * b).sum();
                let nrm = self.norms[m.index()][i];
                for ((o, &xi), &gi) in du.row_mut(i).iter_mut().zip(x.row(i)).zip(dx.row(i)) {
                    *o = (gi - xi * proj) / nrm;
                }
            }
        }

        let cross = self.temps.cross.inv_tau_derivative() * d_scale[Slot::Cross as usize];
        match self.temps.intra {
            Some(intra) => {
                out.d_log_inv_tau = cross;
                out.d_log_inv_tau_intra = Some(intra.inv_tau_derivative() * d_scale[Slot::Guide as usize]);
            }
            None => {
                out.d_log_inv_tau = cross + self.temps.cross.inv_tau_derivative() * d_scale[Slot::Guide as usize];
            }
        }
        out
    }
}

/// Forward value and exact gradients of the selected loss with respect to
/// the raw inputs and temperature parameters. Detached targets
/// (`stop_gradient_targets`) contribute nothing to the guidance branches.
pub fn backward(
    selector: LossSelector,
    inputs: &RawInputs,
    temps: &Temperatures,
    cfg: &LossConfig,
) -> Result<(f64, GradientBundle)> {
    let mut graph = Graph::new(inputs, temps, cfg)?;
    let value = graph.forward(selector)?;
    Ok((value, graph.backward(inputs)))
}

// ---------------------------------------------------------------------------
// Reports.

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamReport {
    pub name: String,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub loss: LossSelector,
    pub seed: u64,
    pub n: usize,
    pub d: usize,
    pub stop_gradient_targets: bool,
    pub epsilon: f64,
    pub tolerance: f64,
    pub params: Vec<ParamReport>,
    pub pass: bool,
    /// Forward/backward failure, if any; the check fails in that case.
    pub error: Option<String>,
}

/// Compares two gradient vectors entry by entry.
pub fn compare(name: &str, analytic: &[f64], numeric: &[f64], tolerance: f64) -> ParamReport {
    let mut max_rel: f64 = 0.0;
    let mut max_abs: f64 = 0.0;
    let mut pass = analytic.len() == numeric.len();
    for (&a, &f) in analytic.iter().zip(numeric) {
        let abs = (a - f).abs();
        max_abs = max_abs.max(abs);
        if a.abs() > RELATIVE_THRESHOLD {
            let rel = abs / a.abs().max(f.abs());
            max_rel = max_rel.max(rel);
            pass &= rel < tolerance;
        } else {
            pass &= abs < tolerance;
        }
        pass &= a.is_finite() && f.is_finite();
    }
    ParamReport { name: name.to_string(), max_rel_err: max_rel, max_abs_err: max_abs, pass }
}

/// Runs [`backward`] against [`finite_difference_grad`] at
/// [`DEFAULT_EPSILON`] on random inputs of size `n × d`.
pub fn check_gradients(
    selector: LossSelector,
    seed: Seed,
    n: usize,
    d: usize,
    cfg: &LossConfig,
    tolerance: f64,
) -> GradCheckReport {
    let mut report = GradCheckReport {
        loss: selector,
        seed: seed.0,
        n,
        d,
        stop_gradient_targets: cfg.stop_gradient_targets,
        epsilon: DEFAULT_EPSILON,
        tolerance,
        params: Vec::new(),
        pass: false,
        error: None,
    };
    let inputs = RawInputs::random(n, d, seed);
    let tau = Temperature::from_tau(cfg.tau_init);
    let temps = if cfg.shared_temperature { Temperatures::shared(tau) } else { Temperatures::split(tau, tau) };
    let run = || -> Result<(GradientBundle, GradientBundle)> {
        let (_, analytic) = backward(selector, &inputs, &temps, cfg)?;
        let numeric = finite_difference_grad(selector, &inputs, &temps, cfg, DEFAULT_EPSILON)?;
        Ok((analytic, numeric))
    };
    match run() {
        Ok((an, nu)) => {
            for m in Modality::ALL {
                report.params.push(compare(m.name(), an.get(m).as_slice(), nu.get(m).as_slice(), tolerance));
            }
            report.params.push(compare("log_inv_tau", &[an.d_log_inv_tau], &[nu.d_log_inv_tau], tolerance));
            if let (Some(a), Some(b)) = (an.d_log_inv_tau_intra, nu.d_log_inv_tau_intra) {
                report.params.push(compare("log_inv_tau_intra", &[a], &[b], tolerance));
            }
            report.pass = report.params.iter().all(|p| p.pass);
        }
        Err(e) => report.error = Some(e.to_string()),
    }
    report
}

//! Scalar loss terms.
//!
//! All losses are means over batch rows. Divergences are taken as
//! `KL(target ‖ prediction)`; the symmetric form averages both directions.
//! Logarithms see `max(x, target_floor)`, the stored distributions are never
//! modified.

use alloc::format;

use serde::{Deserialize, Serialize};

use crate::distributions::{
    cross_modal_dist, disentangle_negatives, intra_modal_dist, label_smooth_targets, mix_targets,
    one_hot_targets, EmbeddingBatch, RowDistributions, RowStochastic, Temperatures,
};
use crate::error::{Error, Result};
use crate::math;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Divergence {
    ForwardKl,
    SymmetricKl,
    Js,
}

impl Divergence {
    pub fn name(self) -> &'static str {
        match self {
            Divergence::ForwardKl => "forward_kl",
            Divergence::SymmetricKl => "symmetric_kl",
            Divergence::Js => "js",
        }
    }

    /// Divergence between one target row and one prediction row.
    pub fn row(self, target: &[f64], pred: &[f64], floor: f64) -> f64 {
        match self {
            Divergence::ForwardKl => kl_row(target, pred, floor),
            Divergence::SymmetricKl => 0.5 * (kl_row(target, pred, floor) + kl_row(pred, target, floor)),
            Divergence::Js => js_row(target, pred, floor),
        }
    }
}

/// Which guidance distribution supervises each direction:
/// `<v2l>_<l2v>` with R2R/A2A the ROI and tag self-similarities and R2A/A2R
/// the ROI-to-tag and tag-to-ROI cross similarities.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SupervisionForm {
    #[serde(rename = "R2R_A2A")]
    R2rA2a,
    #[serde(rename = "A2A_R2R")]
    A2aR2r,
    #[serde(rename = "R2A_A2R")]
    R2aA2r,
    #[serde(rename = "A2R_R2A")]
    A2rR2a,
}

impl SupervisionForm {
    pub fn uses_cross_guidance(self) -> bool {
        matches!(self, SupervisionForm::R2aA2r | SupervisionForm::A2rR2a)
    }

    pub fn name(self) -> &'static str {
        match self {
            SupervisionForm::R2rA2a => "R2R_A2A",
            SupervisionForm::A2aR2r => "A2A_R2R",
            SupervisionForm::R2aA2r => "R2A_A2R",
            SupervisionForm::A2rR2a => "A2R_R2A",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub tau_init: f64,
    /// Label-smoothing strength, used when `label_smoothing` is on.
    pub alpha: f64,
    /// Weight of the guidance distribution in the mixed targets.
    pub beta: f64,
    /// ROI/tag share in the mixed-guidance objective.
    pub gamma: f64,
    pub lambda_re: f64,
    pub mu_clip: f64,
    /// Weight of the plain soft term; zero turns it off.
    pub soft_weight: f64,
    /// CLIP term uses label-smoothed instead of one-hot targets.
    pub label_smoothing: bool,
    pub divergence: Divergence,
    pub supervision_form: SupervisionForm,
    pub stop_gradient_targets: bool,
    /// Guidance distributions get their own learnable temperature when false.
    pub shared_temperature: bool,
    pub target_floor: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            tau_init: 0.07,
            alpha: 0.2,
            beta: 0.3,
            gamma: 1.0,
            lambda_re: 1.0,
            mu_clip: 0.5,
            soft_weight: 1.0,
            label_smoothing: false,
            divergence: Divergence::SymmetricKl,
            supervision_form: SupervisionForm::R2rA2a,
            stop_gradient_targets: true,
            shared_temperature: true,
            target_floor: 1e-12,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: alloc::string::String| Err(Error::ConfigInvalid(msg));
        if !(self.tau_init > 0.0 && self.tau_init.is_finite()) {
            return bad(format!("tau_init must be positive, got {}", self.tau_init));
        }
        if !(0.0..1.0).contains(&self.alpha) {
            return bad(format!("alpha must be in [0, 1), got {}", self.alpha));
        }
        for (name, v) in [("beta", self.beta), ("gamma", self.gamma)] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} must be in [0, 1], got {v}"));
            }
        }
        for (name, v) in [("lambda_re", self.lambda_re), ("mu_clip", self.mu_clip), ("soft_weight", self.soft_weight)] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be a finite non-negative number, got {v}"));
            }
        }
        if !(self.target_floor > 0.0 && self.target_floor < 1e-3) {
            return bad(format!("target_floor must be in (0, 1e-3), got {}", self.target_floor));
        }
        if self.uses_soft_targets() {
            self.check_soft_targets()?;
        }
        Ok(())
    }

    /// Whether any term builds mixed targets.
    pub fn uses_soft_targets(&self) -> bool {
        self.soft_weight > 0.0 || self.lambda_re > 0.0
    }

    /// One-hot targets (`β = 0`) only admit the forward KL.
    pub fn check_soft_targets(&self) -> Result<()> {
        if self.beta == 0.0 && self.divergence != Divergence::ForwardKl {
            return Err(Error::DegenerateTargets);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub clip: f64,
    pub soft: f64,
    pub soft_re: f64,
    pub total: f64,
    pub soft_v2l: f64,
    pub soft_l2v: f64,
    pub soft_re_v2l: f64,
    pub soft_re_l2v: f64,
}

/// Every distribution the objective needs, built once per batch.
#[derive(Debug, Clone, PartialEq)]
pub struct DistSet {
    pub image_to_text: RowStochastic,
    pub text_to_image: RowStochastic,
    pub roi_self: RowStochastic,
    pub tag_self: RowStochastic,
    pub roi_to_tag: Option<RowStochastic>,
    pub tag_to_roi: Option<RowStochastic>,
}

impl DistSet {
    pub fn build(
        v: &EmbeddingBatch,
        t: &EmbeddingBatch,
        r: &EmbeddingBatch,
        a: &EmbeddingBatch,
        temps: &Temperatures,
        form: SupervisionForm,
    ) -> Result<Self> {
        let g = temps.guidance();
        let cross = form.uses_cross_guidance();
        Ok(Self {
            image_to_text: cross_modal_dist(v, t, temps.cross)?,
            text_to_image: cross_modal_dist(t, v, temps.cross)?,
            roi_self: intra_modal_dist(r, g)?,
            tag_self: intra_modal_dist(a, g)?,
            roi_to_tag: if cross { Some(cross_modal_dist(r, a, g)?) } else { None },
            tag_to_roi: if cross { Some(cross_modal_dist(a, r, g)?) } else { None },
        })
    }

    /// Guidance for (v2l, l2v) under the given supervision form.
    pub fn guidance(&self, form: SupervisionForm) -> Result<(&RowStochastic, &RowStochastic)> {
        let missing = || Error::ConfigInvalid(format!("supervision form {} needs ROI/tag cross distributions", form.name()));
        Ok(match form {
            SupervisionForm::R2rA2a => (&self.roi_self, &self.tag_self),
            SupervisionForm::A2aR2r => (&self.tag_self, &self.roi_self),
            SupervisionForm::R2aA2r => (
                self.roi_to_tag.as_ref().ok_or_else(missing)?,
                self.tag_to_roi.as_ref().ok_or_else(missing)?,
            ),
            SupervisionForm::A2rR2a => (
                self.tag_to_roi.as_ref().ok_or_else(missing)?,
                self.roi_to_tag.as_ref().ok_or_else(missing)?,
            ),
        })
    }
}

/// Per-direction values of a soft term; `value()` is their mean.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DirectionPair {
    pub v2l: f64,
    pub l2v: f64,
}

impl DirectionPair {
    pub fn value(self) -> f64 {
        0.5 * (self.v2l + self.l2v)
    }
}

pub(crate) fn kl_row(t: &[f64], p: &[f64], floor: f64) -> f64 {
    t.iter()
        .zip(p)
        .filter(|(&ti, _)| ti > 0.0)
        .map(|(&ti, &pi)| ti * (math::ln(ti.max(floor)) - math::ln(pi.max(floor))))
        .sum()
}

pub(crate) fn js_row(a: &[f64], b: &[f64], floor: f64) -> f64 {
    let mut out = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        let m = 0.5 * (x + y);
        let lm = math::ln(m.max(floor));
        if x > 0.0 {
            out += 0.5 * x * (math::ln(x.max(floor)) - lm);
        }
        if y > 0.0 {
            out += 0.5 * y * (math::ln(y.max(floor)) - lm);
        }
    }
    out
}

fn same_shape<D: RowDistributions>(op: &'static str, a: &D, b: &D) -> Result<()> {
    if a.as_matrix().shape() != b.as_matrix().shape() {
        return Err(Error::shape(op, a.as_matrix().shape(), b.as_matrix().shape()));
    }
    Ok(())
}

fn mean_rows<D: RowDistributions>(a: &D, b: &D, f: impl Fn(&[f64], &[f64]) -> f64) -> f64 {
    let (a, b) = (a.as_matrix(), b.as_matrix());
    let total: f64 = a.row_iter().zip(b.row_iter()).map(|(x, y)| f(x, y)).sum();
    total / a.rows() as f64
}

/// Mean over rows of `−Σ_j t_ij ln p_ij`, with `0·ln(·) = 0`.
pub fn cross_entropy_rows(targets: &RowStochastic, preds: &RowStochastic, floor: f64) -> Result<f64> {
    same_shape("cross_entropy_rows", targets, preds)?;
    Ok(mean_rows(targets, preds, |t, p| {
        -t.iter()
            .zip(p)
            .filter(|(&ti, _)| ti > 0.0)
            .map(|(&ti, &pi)| ti * math::ln(pi.max(floor)))
            .sum::<f64>()
    }))
}

/// Mean over rows of `KL(target ‖ prediction)`.
pub fn kl_rows<D: RowDistributions>(targets: &D, preds: &D, floor: f64) -> Result<f64> {
    same_shape("kl_rows", targets, preds)?;
    Ok(mean_rows(targets, preds, |t, p| kl_row(t, p, floor)))
}

/// `½(KL(a ‖ b) + KL(b ‖ a))`, averaged over rows.
pub fn sym_kl_rows<D: RowDistributions>(a: &D, b: &D, floor: f64) -> Result<f64> {
    same_shape("sym_kl_rows", a, b)?;
    Ok(mean_rows(a, b, |x, y| 0.5 * (kl_row(x, y, floor) + kl_row(y, x, floor))))
}

/// Jensen–Shannon divergence, averaged over rows; bounded by `ln 2`.
pub fn js_rows<D: RowDistributions>(a: &D, b: &D, floor: f64) -> Result<f64> {
    same_shape("js_rows", a, b)?;
    Ok(mean_rows(a, b, |x, y| js_row(x, y, floor)))
}

fn divergence_rows<D: RowDistributions>(div: Divergence, t: &D, p: &D, floor: f64) -> Result<f64> {
    same_shape("divergence", t, p)?;
    Ok(mean_rows(t, p, |x, y| div.row(x, y, floor)))
}

/// CLIP loss from prebuilt distributions and a shared target matrix.
pub fn clip_loss_from(
    image_to_text: &RowStochastic,
    text_to_image: &RowStochastic,
    targets: &RowStochastic,
    floor: f64,
) -> Result<f64> {
    let v2l = cross_entropy_rows(targets, image_to_text, floor)?;
    let l2v = cross_entropy_rows(targets, text_to_image, floor)?;
    Ok(0.5 * (v2l + l2v))
}

pub fn clip_loss(v: &EmbeddingBatch, t: &EmbeddingBatch, temps: &Temperatures) -> Result<f64> {
    let p_it = cross_modal_dist(v, t, temps.cross)?;
    let p_ti = cross_modal_dist(t, v, temps.cross)?;
    clip_loss_from(&p_it, &p_ti, &one_hot_targets(v.len())?, LossConfig::default().target_floor)
}

fn mixed_pair(
    guide_v2l: &RowStochastic,
    guide_l2v: &RowStochastic,
    cfg: &LossConfig,
) -> Result<(RowStochastic, RowStochastic)> {
    cfg.check_soft_targets()?;
    let y = one_hot_targets(guide_v2l.rows())?;
    Ok((mix_targets(&y, guide_v2l, cfg.beta)?, mix_targets(&y, guide_l2v, cfg.beta)?))
}

/// Soft term for explicit predictions and guidance distributions.
pub fn soft_terms(
    pred_v2l: &RowStochastic,
    pred_l2v: &RowStochastic,
    guide_v2l: &RowStochastic,
    guide_l2v: &RowStochastic,
    cfg: &LossConfig,
) -> Result<DirectionPair> {
    let (tv, tl) = mixed_pair(guide_v2l, guide_l2v, cfg)?;
    Ok(DirectionPair {
        v2l: divergence_rows(cfg.divergence, &tv, pred_v2l, cfg.target_floor)?,
        l2v: divergence_rows(cfg.divergence, &tl, pred_l2v, cfg.target_floor)?,
    })
}

/// Relation-enhanced soft term: targets and predictions lose their positive
/// entry and are renormalized before the divergence.
pub fn relation_terms(
    pred_v2l: &RowStochastic,
    pred_l2v: &RowStochastic,
    guide_v2l: &RowStochastic,
    guide_l2v: &RowStochastic,
    cfg: &LossConfig,
) -> Result<DirectionPair> {
    let (tv, tl) = mixed_pair(guide_v2l, guide_l2v, cfg)?;
    let (tv, tl) = (disentangle_negatives(&tv)?, disentangle_negatives(&tl)?);
    let (pv, pl) = (disentangle_negatives(pred_v2l)?, disentangle_negatives(pred_l2v)?);
    Ok(DirectionPair {
        v2l: divergence_rows(cfg.divergence, &tv, &pv, cfg.target_floor)?,
        l2v: divergence_rows(cfg.divergence, &tl, &pl, cfg.target_floor)?,
    })
}

pub fn soft_loss(dists: &DistSet, cfg: &LossConfig) -> Result<f64> {
    let (gv, gl) = dists.guidance(cfg.supervision_form)?;
    Ok(soft_terms(&dists.image_to_text, &dists.text_to_image, gv, gl, cfg)?.value())
}

pub fn relation_enhanced_soft_loss(dists: &DistSet, cfg: &LossConfig) -> Result<f64> {
    let (gv, gl) = dists.guidance(cfg.supervision_form)?;
    Ok(relation_terms(&dists.image_to_text, &dists.text_to_image, gv, gl, cfg)?.value())
}

/// `soft_weight·soft + λ·soft_re + μ·clip` from prebuilt distributions.
/// Terms with zero weight are skipped and reported as zero, except CLIP.
pub fn softclip_total_from(dists: &DistSet, cfg: &LossConfig) -> Result<LossBreakdown> {
    let n = dists.image_to_text.rows();
    let targets = if cfg.label_smoothing { label_smooth_targets(n, cfg.alpha)? } else { one_hot_targets(n)? };
    let clip = clip_loss_from(&dists.image_to_text, &dists.text_to_image, &targets, cfg.target_floor)?;
    let zero = DirectionPair { v2l: 0.0, l2v: 0.0 };
    let (gv, gl) = if cfg.uses_soft_targets() { dists.guidance(cfg.supervision_form)? } else { (&dists.roi_self, &dists.tag_self) };
    let soft = if cfg.soft_weight > 0.0 {
        soft_terms(&dists.image_to_text, &dists.text_to_image, gv, gl, cfg)?
    } else {
        zero
    };
    let re = if cfg.lambda_re > 0.0 {
        relation_terms(&dists.image_to_text, &dists.text_to_image, gv, gl, cfg)?
    } else {
        zero
    };
    let total = cfg.soft_weight * soft.value() + cfg.lambda_re * re.value() + cfg.mu_clip * clip;
    Ok(LossBreakdown {
        clip,
        soft: soft.value(),
        soft_re: re.value(),
        total,
        soft_v2l: soft.v2l,
        soft_l2v: soft.l2v,
        soft_re_v2l: re.v2l,
        soft_re_l2v: re.l2v,
    })
}

pub fn softclip_total(
    v: &EmbeddingBatch,
    t: &EmbeddingBatch,
    r: &EmbeddingBatch,
    a: &EmbeddingBatch,
    temps: &Temperatures,
    cfg: &LossConfig,
) -> Result<LossBreakdown> {
    let n = v.len();
    for x in [t, r, a] {
        if x.len() != n {
            return Err(Error::shape("softclip_total", (n, v.dim()), (x.len(), x.dim())));
        }
    }
    softclip_total_from(&DistSet::build(v, t, r, a, temps, cfg.supervision_form)?, cfg)
}

/// The two guidance-specific objectives `L(R,A)` and `L(I,T)`, each
/// `soft_weight·soft + λ·soft_re` without the CLIP term.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GuidanceLosses {
    pub roi_tag: f64,
    pub image_text: f64,
}

impl GuidanceLosses {
    pub fn mix(self, gamma: f64) -> f64 {
        gamma * self.roi_tag + (1.0 - gamma) * self.image_text
    }
}

fn guided_objective(
    pred_v2l: &RowStochastic,
    pred_l2v: &RowStochastic,
    guide_v2l: &RowStochastic,
    guide_l2v: &RowStochastic,
    cfg: &LossConfig,
) -> Result<f64> {
    let mut out = 0.0;
    if cfg.soft_weight > 0.0 {
        out += cfg.soft_weight * soft_terms(pred_v2l, pred_l2v, guide_v2l, guide_l2v, cfg)?.value();
    }
    if cfg.lambda_re > 0.0 {
        out += cfg.lambda_re * relation_terms(pred_v2l, pred_l2v, guide_v2l, guide_l2v, cfg)?.value();
    }
    Ok(out)
}

/// Both guidance objectives from prebuilt distributions. `image_self` and
/// `text_self` guide v2l and l2v respectively for `L(I,T)`.
pub fn guidance_losses_from(
    dists: &DistSet,
    image_self: &RowStochastic,
    text_self: &RowStochastic,
    cfg: &LossConfig,
) -> Result<GuidanceLosses> {
    let (gv, gl) = dists.guidance(cfg.supervision_form)?;
    Ok(GuidanceLosses {
        roi_tag: guided_objective(&dists.image_to_text, &dists.text_to_image, gv, gl, cfg)?,
        image_text: guided_objective(&dists.image_to_text, &dists.text_to_image, image_self, text_self, cfg)?,
    })
}

pub fn guidance_losses(
    v: &EmbeddingBatch,
    t: &EmbeddingBatch,
    r: &EmbeddingBatch,
    a: &EmbeddingBatch,
    temps: &Temperatures,
    cfg: &LossConfig,
) -> Result<GuidanceLosses> {
    let dists = DistSet::build(v, t, r, a, temps, cfg.supervision_form)?;
    let g = temps.guidance();
    guidance_losses_from(&dists, &intra_modal_dist(v, g)?, &intra_modal_dist(t, g)?, cfg)
}

/// `γ·L(R,A) + (1−γ)·L(I,T)`; no CLIP term.
pub fn mixed_guidance_loss(
    v: &EmbeddingBatch,
    t: &EmbeddingBatch,
    r: &EmbeddingBatch,
    a: &EmbeddingBatch,
    temps: &Temperatures,
    gamma: f64,
    cfg: &LossConfig,
) -> Result<f64> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::ConfigInvalid(format!("gamma must be in [0, 1], got {gamma}")));
    }
    Ok(guidance_losses(v, t, r, a, temps, cfg)?.mix(gamma))
}

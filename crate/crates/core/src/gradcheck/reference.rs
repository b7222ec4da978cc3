//! Loss forward pass in double-double precision for the finite-difference
//! oracle. Central differences at ε = 1e-5 lose about `ulp(L)/ε` to rounding
//! in f64, which swamps gradient entries of order 1e-6; here that floor sits
//! near 1e-27.

use alloc::vec::Vec;

use super::dd::Dd;
use super::{LossSelector, RawInputs};
use crate::distributions::{negatives_degenerate, Modality, Temperature};
use crate::error::{Error, Result};
use crate::numkit::{Matrix, MIN_ROW_NORM};
use crate::objectives::{Divergence, LossConfig, SupervisionForm};

#[derive(Debug, Clone)]
pub(crate) struct DdMat {
    rows: usize,
    cols: usize,
    pub data: Vec<Dd>,
}

impl DdMat {
    fn from_matrix(m: &Matrix) -> Self {
        Self { rows: m.rows(), cols: m.cols(), data: m.as_slice().iter().map(|&x| Dd::from(x)).collect() }
    }

    fn row(&self, i: usize) -> &[Dd] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }
}

/// Evaluation point: raw inputs per modality and temperature parameters.
#[derive(Debug, Clone)]
pub(crate) struct Point {
    pub x: [DdMat; 4],
    pub log_inv_tau: Dd,
    pub log_inv_tau_intra: Option<Dd>,
}

impl Point {
    pub fn new(inputs: &RawInputs, cross: Temperature, intra: Option<Temperature>) -> Self {
        Self {
            x: Modality::ALL.map(|m| DdMat::from_matrix(inputs.get(m))),
            log_inv_tau: Dd::from(cross.log_inv_tau),
            log_inv_tau_intra: intra.map(|t| Dd::from(t.log_inv_tau)),
        }
    }

    fn n(&self) -> usize {
        self.x[0].rows
    }
}

/// Guidance distributions, already paired as (v2l, l2v).
#[derive(Debug, Clone, Default)]
pub(crate) struct Guides {
    roi_tag: Option<(Dist, Dist)>,
    image_text: Option<(Dist, Dist)>,
}

fn scale(log_inv_tau: Dd) -> Dd {
    let lo = Dd::from(Temperature::LOG_INV_MIN);
    let hi = Dd::from(Temperature::LOG_INV_MAX);
    let l = if log_inv_tau < lo {
        lo
    } else if log_inv_tau > hi {
        hi
    } else {
        log_inv_tau
    };
    l.exp()
}

fn unit(m: &DdMat) -> Result<DdMat> {
    let mut out = m.clone();
    for i in 0..m.rows {
        let nrm = m.row(i).iter().map(|&x| x * x).sum::<Dd>().sqrt();
        if !(nrm.hi >= MIN_ROW_NORM) {
            return Err(Error::ZeroRow { row: i });
        }
        for x in &mut out.data[i * m.cols..(i + 1) * m.cols] {
            *x = *x / nrm;
        }
    }
    Ok(out)
}

/// Row distributions with their logarithms, both in double-double.
#[derive(Debug, Clone)]
pub(crate) struct Dist {
    n: usize,
    p: Vec<Dd>,
    lp: Vec<Dd>,
}

impl Dist {
    fn row(&self, i: usize) -> (&[Dd], &[Dd]) {
        let cols = self.p.len() / self.n;
        (&self.p[i * cols..(i + 1) * cols], &self.lp[i * cols..(i + 1) * cols])
    }
}

/// Row softmax of `s · q·kᵀ`; logarithms come from log-sum-exp.
fn softmax_dist(q: &DdMat, k: &DdMat, s: Dd) -> Dist {
    let n = q.rows;
    let mut p = Vec::with_capacity(n * k.rows);
    let mut lp = Vec::with_capacity(n * k.rows);
    let mut z = Vec::with_capacity(k.rows);
    for i in 0..n {
        z.clear();
        for j in 0..k.rows {
            let dot: Dd = q.row(i).iter().zip(k.row(j)).map(|(&a, &b)| a * b).sum();
            z.push(s * dot);
        }
        let m = z.iter().copied().fold(z[0], |a, b| if b > a { b } else { a });
        let start = p.len();
        p.extend(z.iter().map(|&x| (x - m).exp()));
        let total: Dd = p[start..].iter().copied().sum();
        let log_total = total.ln();
        for x in &mut p[start..] {
            *x = *x / total;
        }
        lp.extend(z.iter().map(|&x| x - m - log_total));
    }
    Dist { n, p, lp }
}

/// `ln(max(x, floor))` given `ln x`.
fn ln_floor(x: Dd, lx: Dd, floor: f64) -> Dd {
    if x < Dd::from(floor) {
        Dd::from(floor).ln()
    } else {
        lx
    }
}

/// A row and its logarithm.
type Row<'a> = (&'a [Dd], &'a [Dd]);

fn kl_row(t: Row, p: Row, floor: f64) -> Dd {
    let mut out = Dd::ZERO;
    for j in 0..t.0.len() {
        if t.0[j].hi > 0.0 {
            out = out + t.0[j] * (ln_floor(t.0[j], t.1[j], floor) - ln_floor(p.0[j], p.1[j], floor));
        }
    }
    out
}

fn js_row(a: Row, b: Row, floor: f64) -> Dd {
    let half = Dd::from(0.5);
    let mut out = Dd::ZERO;
    for j in 0..a.0.len() {
        let (x, y) = (a.0[j], b.0[j]);
        let lm = (half * (x + y)).max_f64(floor).ln();
        if x.hi > 0.0 {
            out = out + half * x * (ln_floor(x, a.1[j], floor) - lm);
        }
        if y.hi > 0.0 {
            out = out + half * y * (ln_floor(y, b.1[j], floor) - lm);
        }
    }
    out
}

fn divergence_row(div: Divergence, t: Row, p: Row, floor: f64) -> Dd {
    match div {
        Divergence::ForwardKl => kl_row(t, p, floor),
        Divergence::SymmetricKl => Dd::from(0.5) * (kl_row(t, p, floor) + kl_row(p, t, floor)),
        Divergence::Js => js_row(t, p, floor),
    }
}

fn disentangle(row: Row, i: usize) -> Result<(Vec<Dd>, Vec<Dd>)> {
    let mass: Dd = row.0.iter().enumerate().filter(|&(j, _)| j != i).map(|(_, &x)| x).sum();
    if negatives_degenerate(f64::from(mass), row.0.len()) {
        return Err(Error::DegenerateRow { row: i });
    }
    let log_mass = mass.ln();
    let keep = |j: &usize| *j != i;
    Ok((
        (0..row.0.len()).filter(keep).map(|j| row.0[j] / mass).collect(),
        (0..row.0.len()).filter(keep).map(|j| row.1[j] - log_mass).collect(),
    ))
}

struct Eval<'a> {
    cfg: &'a LossConfig,
    n: usize,
    log_beta: Dd,
    p_it: Dist,
    p_ti: Dist,
}

impl Eval<'_> {
    fn mean(&self, x: Dd) -> Dd {
        x / Dd::from(self.n as f64)
    }

    fn clip(&self) -> Dd {
        let n = self.n;
        let floor = self.cfg.target_floor;
        let (on, off) = if self.cfg.label_smoothing {
            let a = self.cfg.alpha;
            (Dd::ONE - Dd::from(a), Dd::from(a) / Dd::from((n - 1) as f64))
        } else {
            (Dd::ONE, Dd::ZERO)
        };
        let ce = |d: &Dist| -> Dd {
            let mut total = Dd::ZERO;
            for i in 0..n {
                let (p, lp) = d.row(i);
                for j in 0..n {
                    let y = if i == j { on } else { off };
                    if y.hi > 0.0 {
                        total = total - y * ln_floor(p[j], lp[j], floor);
                    }
                }
            }
            self.mean(total)
        };
        Dd::from(0.5) * (ce(&self.p_it) + ce(&self.p_ti))
    }

    /// Row `i` of `(1 − β)·I + β·guide` with its logarithm.
    fn mixed_row(&self, guide: &Dist, i: usize) -> (Vec<Dd>, Vec<Dd>) {
        let (beta, log_beta) = (Dd::from(self.cfg.beta), self.log_beta);
        let (g, lg) = guide.row(i);
        let mut t = Vec::with_capacity(g.len());
        let mut lt = Vec::with_capacity(g.len());
        for j in 0..g.len() {
            if i == j {
                let x = Dd::ONE - beta + beta * g[j];
                t.push(x);
                lt.push(x.ln());
            } else if self.cfg.beta > 0.0 {
                t.push(beta * g[j]);
                lt.push(log_beta + lg[j]);
            } else {
                t.push(Dd::ZERO);
                lt.push(log_beta);
            }
        }
        (t, lt)
    }

    fn direction(&self, pred: &Dist, guide: &Dist, relation: bool) -> Result<Dd> {
        let (floor, div) = (self.cfg.target_floor, self.cfg.divergence);
        let mut total = Dd::ZERO;
        for i in 0..self.n {
            let (t, lt) = self.mixed_row(guide, i);
            let p = pred.row(i);
            total = total
                + if relation {
                    let (ts, lts) = disentangle((&t, &lt), i)?;
                    let (ps, lps) = disentangle(p, i)?;
                    divergence_row(div, (&ts, &lts), (&ps, &lps), floor)
                } else {
                    divergence_row(div, (&t, &lt), p, floor)
                };
        }
        Ok(self.mean(total))
    }

    fn soft(&self, guides: &(Dist, Dist), relation: bool) -> Result<Dd> {
        self.cfg.check_soft_targets()?;
        let a = self.direction(&self.p_it, &guides.0, relation)?;
        let b = self.direction(&self.p_ti, &guides.1, relation)?;
        Ok(Dd::from(0.5) * (a + b))
    }

    fn guided(&self, guides: &(Dist, Dist)) -> Result<Dd> {
        let mut out = Dd::ZERO;
        if self.cfg.soft_weight > 0.0 {
            out = out + Dd::from(self.cfg.soft_weight) * self.soft(guides, false)?;
        }
        if self.cfg.lambda_re > 0.0 {
            out = out + Dd::from(self.cfg.lambda_re) * self.soft(guides, true)?;
        }
        Ok(out)
    }
}

/// Which guidance pairs (roi/tag, image/text) the selector reads.
pub(crate) fn needs(selector: LossSelector, cfg: &LossConfig) -> (bool, bool) {
    match selector {
        LossSelector::Clip => (false, false),
        LossSelector::Soft | LossSelector::SoftRe => (true, false),
        LossSelector::Total => (cfg.soft_weight > 0.0 || cfg.lambda_re > 0.0, false),
        LossSelector::MixedGamma => (true, true),
    }
}

/// Guidance distributions the selector reads, evaluated at `point`.
pub(crate) fn guides(selector: LossSelector, point: &Point, cfg: &LossConfig) -> Result<Guides> {
    let (roi_tag, image_text) = needs(selector, cfg);
    let s = scale(point.log_inv_tau_intra.unwrap_or(point.log_inv_tau));
    let mut out = Guides::default();
    if roi_tag {
        let r = unit(&point.x[Modality::Roi.index()])?;
        let a = unit(&point.x[Modality::Tag.index()])?;
        out.roi_tag = Some(match cfg.supervision_form {
            SupervisionForm::R2rA2a => (softmax_dist(&r, &r, s), softmax_dist(&a, &a, s)),
            SupervisionForm::A2aR2r => (softmax_dist(&a, &a, s), softmax_dist(&r, &r, s)),
            SupervisionForm::R2aA2r => (softmax_dist(&r, &a, s), softmax_dist(&a, &r, s)),
            SupervisionForm::A2rR2a => (softmax_dist(&a, &r, s), softmax_dist(&r, &a, s)),
        });
    }
    if image_text {
        let v = unit(&point.x[Modality::Image.index()])?;
        let t = unit(&point.x[Modality::Text.index()])?;
        out.image_text = Some((softmax_dist(&v, &v, s), softmax_dist(&t, &t, s)));
    }
    Ok(out)
}

/// Selected loss at `point`; `frozen` replaces the live guidance.
pub(crate) fn evaluate(selector: LossSelector, point: &Point, cfg: &LossConfig, frozen: Option<&Guides>) -> Result<Dd> {
    let v = unit(&point.x[Modality::Image.index()])?;
    let t = unit(&point.x[Modality::Text.index()])?;
    let s = scale(point.log_inv_tau);
    let log_beta = if cfg.beta > 0.0 { Dd::from(cfg.beta).ln() } else { Dd::from(f64::NEG_INFINITY) };
    let eval = Eval { cfg, n: point.n(), log_beta, p_it: softmax_dist(&v, &t, s), p_ti: softmax_dist(&t, &v, s) };
    let live;
    let g = match frozen {
        Some(g) => g,
        None => {
            live = guides(selector, point, cfg)?;
            &live
        }
    };
    let missing = || Error::ConfigInvalid("guidance distributions were not prepared".into());
    match selector {
        LossSelector::Clip => Ok(eval.clip()),
        LossSelector::Soft => eval.soft(g.roi_tag.as_ref().ok_or_else(missing)?, false),
        LossSelector::SoftRe => eval.soft(g.roi_tag.as_ref().ok_or_else(missing)?, true),
        LossSelector::Total => {
            let mut out = Dd::from(cfg.mu_clip) * eval.clip();
            if cfg.soft_weight > 0.0 || cfg.lambda_re > 0.0 {
                out = out + eval.guided(g.roi_tag.as_ref().ok_or_else(missing)?)?;
            }
            Ok(out)
        }
        LossSelector::MixedGamma => {
            let gamma = Dd::from(cfg.gamma);
            let a = eval.guided(g.roi_tag.as_ref().ok_or_else(missing)?)?;
            let b = eval.guided(g.image_text.as_ref().ok_or_else(missing)?)?;
            Ok(gamma * a + (Dd::ONE - gamma) * b)
        }
    }
}

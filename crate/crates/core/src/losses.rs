//! Training objectives: contrastive and prototype classification terms, the
//! mean-entropy regularizer, the Jensen-Shannon MI estimator and the SimGCD
//! and HiLo totals.
//!
//! The scalar functions (`rep_loss`, `cls_loss`, ...) work on plain vectors
//! and serve as references. Training uses the batched tape versions built
//! around [`HeadInputs`], where a batch of `n` samples is laid out as `2n`
//! rows: rows `0..n` are the first view and rows `n..2n` the second.

use serde::{Deserialize, Serialize};

use crate::autodiff::{softplus, Var};
use crate::error::{Error, Result};

/// Added to self-similarities so they vanish from the contrastive softmax.
const SELF_MASK: f64 = -1e9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Temperature of the self-supervised contrastive term.
    pub tau_u: f64,
    /// Temperature of the supervised contrastive term.
    pub tau_c: f64,
    /// Student temperature of the prototype classifier.
    pub tau_s: f64,
    /// Teacher (sharpening) temperature.
    pub tau_t: f64,
    pub lambda: f64,
    /// Entropy weight in the SimGCD objective.
    pub epsilon: f64,
    /// Entropy weight in the HiLo objective.
    pub varpi: f64,
    /// Weight of the domain-head loss and its entropy term.
    pub domain_weight: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            tau_u: 0.07,
            tau_c: 1.0,
            tau_s: 0.1,
            tau_t: 0.07,
            lambda: 0.35,
            epsilon: 0.1,
            varpi: 0.1,
            domain_weight: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, t) in [("tau_u", self.tau_u), ("tau_c", self.tau_c), ("tau_s", self.tau_s), ("tau_t", self.tau_t)] {
            if !(t > 0.0 && t.is_finite()) {
                return Err(Error::Config(format!("loss.{name} must be > 0, got {t}")));
            }
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!("loss.lambda must lie in [0, 1], got {}", self.lambda)));
        }
        for (name, w) in [("epsilon", self.epsilon), ("varpi", self.varpi), ("domain_weight", self.domain_weight)] {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::Config(format!("loss.{name} must be >= 0, got {w}")));
            }
        }
        Ok(())
    }
}

/// Scalar values of every loss component for one batch.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    /// Semantic representation terms, `λ·rep_u + (1−λ)·rep_sup`.
    pub rep_s: f64,
    /// Semantic classification terms, `λ·cls_u + (1−λ)·cls_sup`.
    pub cls_s: f64,
    pub rep_d: f64,
    pub cls_d: f64,
    pub l_s: f64,
    pub l_d: f64,
    pub l_m: f64,
    pub delta_s: f64,
    pub delta_d: f64,
    pub total: f64,
}

impl LossBundle {
    pub fn is_finite(&self) -> bool {
        [
            self.rep_s, self.cls_s, self.rep_d, self.cls_d, self.l_s, self.l_d, self.l_m, self.delta_s, self.delta_d,
            self.total,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// InfoNCE for one anchor. The softmax runs over positives and negatives.
pub fn rep_loss(anchor: &[f64], positives: &[Vec<f64>], negatives: &[Vec<f64>], tau: f64) -> Result<f64> {
    if positives.is_empty() {
        return Err(Error::invalid("rep_loss needs at least one positive"));
    }
    if tau <= 0.0 {
        return Err(Error::invalid(format!("temperature must be > 0, got {tau}")));
    }
    let pos: Vec<f64> = positives.iter().map(|p| dot(anchor, p) / tau).collect();
    let all: Vec<f64> = pos.iter().copied().chain(negatives.iter().map(|n| dot(anchor, n) / tau)).collect();
    let lse = log_sum_exp(&all);
    Ok(-pos.iter().map(|p| p - lse).sum::<f64>() / pos.len() as f64)
}

/// [`rep_loss`] scaled by the anchor's semantic proportion `alpha`.
pub fn patchmix_rep_loss(
    anchor: &[f64],
    positives: &[Vec<f64>],
    negatives: &[Vec<f64>],
    alpha: f64,
    tau: f64,
) -> Result<f64> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::invalid(format!("alpha must lie in [0, 1], got {alpha}")));
    }
    Ok(alpha * rep_loss(anchor, positives, negatives, tau)?)
}

/// Cross-entropy `−Σ q_k log p_k`.
pub fn cls_loss(prediction: &[f64], target: &[f64]) -> Result<f64> {
    if prediction.len() != target.len() {
        return Err(Error::shape("cls_loss", &[prediction.len()], &[target.len()]));
    }
    let total: f64 = target.iter().sum();
    if target.iter().any(|q| *q < 0.0) || (total - 1.0).abs() > 1e-6 {
        return Err(Error::invalid(format!("target is not a distribution (sums to {total})")));
    }
    Ok(-target
        .iter()
        .zip(prediction)
        .filter(|(q, _)| **q > 0.0)
        .map(|(q, p)| q * p.ln())
        .sum::<f64>())
}

/// Sharpened softmax of prototype scores, used as a constant target.
pub fn sharpen_teacher(logits: &[f64], tau_t: f64) -> Result<Vec<f64>> {
    if tau_t <= 0.0 {
        return Err(Error::invalid(format!("teacher temperature must be > 0, got {tau_t}")));
    }
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|v| ((v - m) / tau_t).exp()).collect();
    let z: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / z).collect())
}

/// `Δ = −H(mean prediction)`.
pub fn entropy_reg(predictions: &[Vec<f64>]) -> Result<f64> {
    let k = predictions.first().map_or(0, Vec::len);
    if predictions.is_empty() || k == 0 {
        return Err(Error::invalid("entropy_reg needs at least one prediction"));
    }
    let mut mean = vec![0.0; k];
    for p in predictions {
        if p.len() != k {
            return Err(Error::shape("entropy_reg", &[k], &[p.len()]));
        }
        mean.iter_mut().zip(p).for_each(|(m, v)| *m += v / predictions.len() as f64);
    }
    Ok(mean.iter().filter(|m| **m > 0.0).map(|m| m * m.ln()).sum())
}

/// Batched contrastive loss over `z` (`[R, dim]`, unit rows).
///
/// Anchor `a` has weight `w_a` and positive rows `pos_a`; its softmax runs over
/// every row except itself. Returns the mean over anchors of
/// `−w_a / |pos_a| · Σ_p log softmax_p`, or zero when there are no anchors.
pub fn info_nce<'t>(z: Var<'t>, anchors: &[(usize, f64, Vec<usize>)], tau: f64) -> Result<Var<'t>> {
    let tape = z.tape();
    if anchors.is_empty() {
        return Ok(tape.scalar(0.0));
    }
    if tau <= 0.0 {
        return Err(Error::invalid(format!("temperature must be > 0, got {tau}")));
    }
    let r = z.shape()[0];
    let rows: Vec<usize> = anchors.iter().map(|a| a.0).collect();
    let mut mask = vec![0.0; anchors.len() * r];
    let mut weights = vec![0.0; anchors.len() * r];
    let scale = 1.0 / anchors.len() as f64;
    for (i, (row, w, pos)) in anchors.iter().enumerate() {
        if pos.is_empty() {
            return Err(Error::invalid(format!("anchor row {row} has no positives")));
        }
        mask[i * r + row] = SELF_MASK;
        for &p in pos {
            weights[i * r + p] += w * scale / pos.len() as f64;
        }
    }
    let logits = z
        .index_select(&rows)?
        .matmul_nt(z)?
        .scale(1.0 / tau)
        .add(tape.constant_from(&[anchors.len(), r], mask)?)?;
    let logp = logits.log_softmax(1.0)?;
    Ok(logp.mul(tape.constant_from(&[anchors.len(), r], weights)?)?.sum().neg())
}

/// Mean cross-entropy of `logp` rows against fixed targets.
fn cross_entropy<'t>(logp: Var<'t>, rows: &[usize], targets: &[Vec<f64>]) -> Result<Var<'t>> {
    let tape = logp.tape();
    if rows.is_empty() {
        return Ok(tape.scalar(0.0));
    }
    let k = logp.shape()[1];
    let mut t = Vec::with_capacity(rows.len() * k);
    for q in targets {
        if q.len() != k {
            return Err(Error::shape("cross_entropy target", &[k], &[q.len()]));
        }
        t.extend_from_slice(q);
    }
    let picked = logp.index_select(rows)?;
    Ok(picked
        .mul(tape.constant_from(&[rows.len(), k], t)?)?
        .sum()
        .scale(-1.0 / rows.len() as f64))
}

/// Teacher targets for a two-view batch: row `i` gets the sharpened
/// prediction of the other view of the same sample. `logits` holds the raw
/// prototype scores, `[2n, k]` row-major.
pub fn teacher_targets(logits: &[f64], k: usize, tau_t: f64) -> Result<Vec<Vec<f64>>> {
    let rows = logits.len() / k.max(1);
    if k == 0 || rows % 2 != 0 || rows * k != logits.len() {
        return Err(Error::invalid(format!("teacher_targets expects [2n, {k}] scores, got {} values", logits.len())));
    }
    let n = rows / 2;
    (0..rows)
        .map(|i| {
            let other = (i + n) % rows;
            sharpen_teacher(&logits[other * k..(other + 1) * k], tau_t)
        })
        .collect()
}

/// Everything one head needs for its share of the objective.
pub struct HeadInputs<'t> {
    /// Projection features `[2n, proj_dim]`, unit rows.
    pub z: Var<'t>,
    /// Prototype scores `[2n, k]` (dot products of unit vectors).
    pub logits: Var<'t>,
    /// Contrastive anchor weight per row (`α`, or 1 without mixing).
    pub alpha: Vec<f64>,
    /// Per sample: the group shared with other labelled samples (class for the
    /// semantic head, domain for the domain head), or `None` when unlabelled.
    pub groups: Vec<Option<usize>>,
    /// Targets of the all-batch classification term, one per row.
    pub targets: Vec<Vec<f64>>,
    /// Targets of the labelled classification term, one per row of a labelled sample.
    pub sup_targets: Vec<Option<Vec<f64>>>,
}

/// The five terms a head contributes, each already averaged.
pub struct HeadTerms<'t> {
    pub rep_u: Var<'t>,
    pub cls_u: Var<'t>,
    pub rep_sup: Var<'t>,
    pub cls_sup: Var<'t>,
    pub entropy: Var<'t>,
}

impl<'t> HeadTerms<'t> {
    /// `λ·(rep_u + cls_u) + (1 − λ)·(rep_sup + cls_sup)`, plus the separate
    /// representation and classification parts.
    pub fn combine(&self, lambda: f64) -> Result<(Var<'t>, Var<'t>, Var<'t>)> {
        let rep = self.rep_u.scale(lambda).add(self.rep_sup.scale(1.0 - lambda))?;
        let cls = self.cls_u.scale(lambda).add(self.cls_sup.scale(1.0 - lambda))?;
        Ok((rep.add(cls)?, rep, cls))
    }
}

impl<'t> HeadInputs<'t> {
    fn check(&self) -> Result<(usize, usize)> {
        let r = self.z.shape()[0];
        let k = self.logits.shape()[1];
        let n = self.groups.len();
        if r != 2 * n || self.logits.shape()[0] != r {
            return Err(Error::invalid(format!(
                "head inputs need 2n rows for n = {n} samples, got z {:?} and logits {:?}",
                self.z.shape(),
                self.logits.shape()
            )));
        }
        if self.alpha.len() != r || self.targets.len() != r || self.sup_targets.len() != r {
            return Err(Error::invalid(format!(
                "per-row inputs must have {r} entries (alpha {}, targets {}, sup_targets {})",
                self.alpha.len(),
                self.targets.len(),
                self.sup_targets.len()
            )));
        }
        if let Some(a) = self.alpha.iter().find(|a| !(0.0..=1.0).contains(*a)) {
            return Err(Error::invalid(format!("alpha must lie in [0, 1], got {a}")));
        }
        Ok((n, k))
    }

    pub fn terms(&self, cfg: &LossConfig) -> Result<HeadTerms<'t>> {
        let (n, _) = self.check()?;
        let r = 2 * n;
        let self_anchors: Vec<(usize, f64, Vec<usize>)> =
            (0..r).map(|i| (i, self.alpha[i], vec![(i + n) % r])).collect();
        let rep_u = info_nce(self.z, &self_anchors, cfg.tau_u)?;

        let sup_anchors: Vec<(usize, f64, Vec<usize>)> = (0..r)
            .filter_map(|i| {
                let g = self.groups[i % n]?;
                let pos = (0..r).filter(|&j| j != i && self.groups[j % n] == Some(g)).collect();
                Some((i, self.alpha[i], pos))
            })
            .collect();
        let rep_sup = info_nce(self.z, &sup_anchors, cfg.tau_c)?;

        let logp = self.logits.log_softmax(cfg.tau_s)?;
        let all_rows: Vec<usize> = (0..r).collect();
        let cls_u = cross_entropy(logp, &all_rows, &self.targets)?;
        let (sup_rows, sup_q): (Vec<usize>, Vec<Vec<f64>>) = self
            .sup_targets
            .iter()
            .enumerate()
            .filter_map(|(i, q)| q.clone().map(|q| (i, q)))
            .unzip();
        let cls_sup = cross_entropy(logp, &sup_rows, &sup_q)?;

        let mean = self.logits.softmax(cfg.tau_s)?.mean_axis0()?;
        let entropy = mean.mul(mean.ln())?.sum();
        Ok(HeadTerms {
            rep_u,
            cls_u,
            rep_sup,
            cls_sup,
            entropy,
        })
    }
}

/// One-hot vector of length `k`.
pub fn one_hot(index: usize, k: usize) -> Vec<f64> {
    let mut v = vec![0.0; k];
    v[index] = 1.0;
    v
}

/// SimGCD objective for one head. Returns the differentiable total and the
/// component values.
pub fn simgcd_loss<'t>(head: &HeadInputs<'t>, cfg: &LossConfig) -> Result<(Var<'t>, LossBundle)> {
    let terms = head.terms(cfg)?;
    let (main, rep, cls) = terms.combine(cfg.lambda)?;
    let total = main.add(terms.entropy.scale(cfg.epsilon))?;
    let bundle = LossBundle {
        rep_s: rep.item(),
        cls_s: cls.item(),
        l_s: main.item(),
        delta_s: terms.entropy.item(),
        total: total.item(),
        ..LossBundle::default()
    };
    Ok((total, bundle))
}

/// Jensen-Shannon MI estimate from a critic grid `M[i][j] = Φ(z_d_i, z_s_j)`:
/// diagonal entries are joint pairs, off-diagonal entries product pairs.
pub fn mi_js<'t>(grid: Var<'t>) -> Result<Var<'t>> {
    let shape = grid.shape();
    if shape.len() != 2 || shape[0] != shape[1] {
        return Err(Error::invalid(format!("mi_js expects a square grid, got {shape:?}")));
    }
    let n = shape[0];
    if n < 2 {
        return Err(Error::invalid("mi_js needs at least 2 samples"));
    }
    let tape = grid.tape();
    let diag: Vec<f64> = (0..n * n).map(|ij| if ij / n == ij % n { 1.0 / n as f64 } else { 0.0 }).collect();
    let off: Vec<f64> = (0..n * n)
        .map(|ij| if ij / n == ij % n { 0.0 } else { 1.0 / (n * (n - 1)) as f64 })
        .collect();
    let joint = grid.neg().softplus().mul(tape.constant_from(&[n, n], diag)?)?.sum().neg();
    let marginal = grid.softplus().mul(tape.constant_from(&[n, n], off)?)?.sum();
    joint.sub(marginal)
}

/// Value-only [`mi_js`] for a grid given row-major.
pub fn mi_js_value(grid: &[f64], n: usize) -> Result<f64> {
    if n < 2 || grid.len() != n * n {
        return Err(Error::invalid(format!("mi_js needs an n x n grid with n >= 2, got {} values", grid.len())));
    }
    let mut joint = 0.0;
    let mut marginal = 0.0;
    for i in 0..n {
        for j in 0..n {
            let m = grid[i * n + j];
            if i == j {
                joint -= softplus(-m);
            } else {
                marginal += softplus(m);
            }
        }
    }
    Ok(joint / n as f64 - marginal / (n * (n - 1)) as f64)
}

/// HiLo objective `L_m + L_s + w_d·L_d + ϖ·(Δ_s + w_d·Δ_d)`.
///
/// `domain` is skipped when absent or when `domain_weight` is zero; `mi` is
/// the critic grid and is skipped when absent.
pub fn hilo_total<'t>(
    semantic: &HeadInputs<'t>,
    domain: Option<&HeadInputs<'t>>,
    mi: Option<Var<'t>>,
    cfg: &LossConfig,
) -> Result<(Var<'t>, LossBundle)> {
    let s = semantic.terms(cfg)?;
    let (l_s, rep_s, cls_s) = s.combine(cfg.lambda)?;
    let mut total = l_s.add(s.entropy.scale(cfg.varpi))?;
    let mut bundle = LossBundle {
        rep_s: rep_s.item(),
        cls_s: cls_s.item(),
        l_s: l_s.item(),
        delta_s: s.entropy.item(),
        ..LossBundle::default()
    };
    if let Some(d) = domain.filter(|_| cfg.domain_weight > 0.0) {
        let t = d.terms(cfg)?;
        let (l_d, rep_d, cls_d) = t.combine(cfg.lambda)?;
        let w = cfg.domain_weight;
        total = total.add(l_d.scale(w))?.add(t.entropy.scale(cfg.varpi * w))?;
        bundle.rep_d = rep_d.item();
        bundle.cls_d = cls_d.item();
        bundle.l_d = l_d.item();
        bundle.delta_d = t.entropy.item();
    }
    if let Some(grid) = mi {
        let l_m = mi_js(grid)?;
        total = total.add(l_m)?;
        bundle.l_m = l_m.item();
    }
    bundle.total = total.item();
    Ok((total, bundle))
}

//! Patch-level mixing in embedding space, the attention-weighted semantic
//! proportion `α` and label smoothing.

use rand::Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::encoder::{stack_patches, EncoderState, ForwardOutputs};
use crate::error::{Error, Result};

/// Shape parameters of the per-patch Beta distribution.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PatchMixConfig {
    pub beta_a: f64,
    pub beta_b: f64,
    /// Both views of an anchor mix with the same partner (each with its own
    /// `β`); otherwise each view draws its partner independently.
    pub shared_partner: bool,
}

impl Default for PatchMixConfig {
    fn default() -> Self {
        let v = (1.0 + std::f64::consts::E).ln();
        Self {
            beta_a: v,
            beta_b: v,
            shared_partner: false,
        }
    }
}

impl PatchMixConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta_a > 0.0 && self.beta_b > 0.0 && self.beta_a.is_finite() && self.beta_b.is_finite()) {
            return Err(Error::Config(format!(
                "patchmix Beta parameters must be > 0, got ({}, {})",
                self.beta_a, self.beta_b
            )));
        }
        Ok(())
    }
}

/// How one anchor is mixed for one view.
#[derive(Clone, Debug, PartialEq)]
pub struct MixSpec {
    /// Batch index of the partner.
    pub partner: usize,
    /// Per-patch proportion kept from the anchor.
    pub beta: Vec<f64>,
    pub alpha: f64,
    pub beta_params: (f64, f64),
}

/// `p` independent draws from `Beta(a, b)`.
pub fn sample_beta<R: Rng + ?Sized>(p: usize, cfg: &PatchMixConfig, rng: &mut R) -> Result<Vec<f64>> {
    cfg.validate()?;
    let dist = Beta::new(cfg.beta_a, cfg.beta_b).map_err(|e| Error::invalid(e.to_string()))?;
    Ok((0..p).map(|_| dist.sample(rng)).collect())
}

/// Mixes patch rows of `x` (`[P + 1, D]`, CLS in row 0) with those of `x2`;
/// the CLS row of `x` is kept.
pub fn mix(x: &Tensor, x2: &Tensor, beta: &[f64]) -> Result<Tensor> {
    if x.shape() != x2.shape() || x.shape().len() != 2 {
        return Err(Error::shape("mix", x.shape(), x2.shape()));
    }
    if beta.len() + 1 != x.rows() {
        return Err(Error::invalid(format!(
            "mix needs one beta per patch: {} patches, {} betas",
            x.rows() - 1,
            beta.len()
        )));
    }
    let mut out = x.clone();
    for (j, b) in beta.iter().enumerate() {
        let other = x2.row(j + 1);
        for (v, o) in out.row_mut(j + 1).iter_mut().zip(other) {
            *v = b * *v + (1.0 - b) * o;
        }
    }
    Ok(out)
}

/// Batched [`mix`] on a tape: `tokens` is `[B, P + 1, D]`, sample `i` is
/// mixed with row `partners[i]` using `betas[i]`.
pub fn mix_tokens<'t>(tokens: Var<'t>, partners: &[usize], betas: &[Vec<f64>]) -> Result<Var<'t>> {
    let shape = tokens.shape();
    if shape.len() != 3 || partners.len() != shape[0] || betas.len() != shape[0] {
        return Err(Error::invalid(format!(
            "mix_tokens: tokens {shape:?} with {} partners and {} beta vectors",
            partners.len(),
            betas.len()
        )));
    }
    let (b, t, d) = (shape[0], shape[1], shape[2]);
    if let Some(p) = partners.iter().find(|&&p| p >= b) {
        return Err(Error::invalid(format!("partner index {p} outside batch of {b}")));
    }
    let mut keep = Vec::with_capacity(b * t);
    for beta in betas {
        if beta.len() + 1 != t {
            return Err(Error::invalid(format!("expected {} betas per sample, got {}", t - 1, beta.len())));
        }
        keep.push(1.0);
        keep.extend_from_slice(beta);
    }
    let give: Vec<f64> = keep.iter().map(|k| 1.0 - k).collect();
    let tape = tokens.tape();
    let rows = tokens.reshape(&[b * t, d])?;
    let partner_rows: Vec<usize> = partners.iter().flat_map(|&p| (p * t)..(p * t + t)).collect();
    let mixed = rows
        .mul_col(tape.constant_from(&[b * t], keep)?)?
        .add(rows.index_select(&partner_rows)?.mul_col(tape.constant_from(&[b * t], give)?)?)?;
    mixed.reshape(&[b, t, d])
}

fn normalized(s: &[f64]) -> Vec<f64> {
    let z: f64 = s.iter().sum();
    if z > 0.0 {
        s.iter().map(|v| v / z).collect()
    } else {
        s.to_vec()
    }
}

/// `α = β·s / (β·s + (1 − β)·s′)`, with `s` and `s′` normalized to sum 1.
/// Returns 0.5 when the denominator is below `1e-12`.
pub fn alpha(beta: &[f64], s: &[f64], s2: &[f64]) -> Result<f64> {
    if beta.len() != s.len() || s.len() != s2.len() {
        return Err(Error::invalid(format!(
            "alpha: beta {}, s {}, s' {} must have equal length",
            beta.len(),
            s.len(),
            s2.len()
        )));
    }
    if s.iter().chain(s2).any(|v| *v < 0.0 || !v.is_finite()) {
        return Err(Error::invalid("attention scores must be finite and nonnegative"));
    }
    let (s, s2) = (normalized(s), normalized(s2));
    let own: f64 = beta.iter().zip(&s).map(|(b, v)| b * v).sum();
    let other: f64 = beta.iter().zip(&s2).map(|(b, v)| (1.0 - b) * v).sum();
    let den = own + other;
    if den < 1e-12 {
        return Ok(0.5);
    }
    Ok((own / den).clamp(0.0, 1.0))
}

/// `q̄ = α·q + (1 − α)/K`.
pub fn smooth_label(q: &[f64], alpha: f64) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::invalid(format!("alpha must lie in [0, 1], got {alpha}")));
    }
    let k = q.len() as f64;
    Ok(q.iter().map(|v| alpha * v + (1.0 - alpha) / k).collect())
}

/// Plans two independently mixed views for every batch member.
///
/// Partners are drawn uniformly from the unlabelled members, excluding the
/// anchor itself unless it is the only one. `attn[i]` are the anchor's own
/// unmixed attention scores. Draw order is view-major, then anchor, partner
/// before `β`.
pub fn make_mixed_views<R: Rng + ?Sized>(
    labelled: &[bool],
    attn: &[Vec<f64>],
    cfg: &PatchMixConfig,
    rng: &mut R,
) -> Result<[Vec<MixSpec>; 2]> {
    let n = labelled.len();
    if attn.len() != n {
        return Err(Error::shape("make_mixed_views", &[n], &[attn.len()]));
    }
    let pool: Vec<usize> = (0..n).filter(|&i| !labelled[i]).collect();
    if pool.is_empty() {
        return Err(Error::invalid("PatchMix needs at least one unlabelled sample in the batch"));
    }
    let p = attn.first().map_or(0, Vec::len);
    let plan = |rng: &mut R, fixed: Option<&[MixSpec]>| -> Result<Vec<MixSpec>> {
        (0..n)
            .map(|i| {
                let partner = match fixed {
                    Some(prev) => prev[i].partner,
                    None => {
                        let candidates: Vec<usize> = pool.iter().copied().filter(|&j| j != i).collect();
                        if candidates.is_empty() {
                            i
                        } else {
                            candidates[rng.gen_range(0..candidates.len())]
                        }
                    }
                };
                let beta = sample_beta(p, cfg, rng)?;
                let a = alpha(&beta, &attn[i], &attn[partner])?;
                Ok(MixSpec {
                    partner,
                    beta,
                    alpha: a,
                    beta_params: (cfg.beta_a, cfg.beta_b),
                })
            })
            .collect()
    };
    let first = plan(rng, None)?;
    let second = plan(rng, cfg.shared_partner.then_some(first.as_slice()))?;
    Ok([first, second])
}

/// Inference forward of mixed inputs built from raw patches.
pub fn mixed_forward(state: &EncoderState, samples: &[Tensor], specs: &[MixSpec]) -> Result<Vec<ForwardOutputs>> {
    let tape = Tape::new();
    let bound = state.bind(&tape, false);
    let tokens = bound.embed(stack_patches(&tape, samples, &state.config)?)?;
    let partners: Vec<usize> = specs.iter().map(|s| s.partner).collect();
    let betas: Vec<Vec<f64>> = specs.iter().map(|s| s.beta.clone()).collect();
    let feats = bound.forward(mix_tokens(tokens, &partners, &betas)?)?;
    let (p, d) = (state.config.proj_dim, state.config.token_dim);
    let (zd, zs, zh, zhd) = (feats.z_d.value(), feats.z_s.value(), feats.z_hat.value(), feats.z_hat_d.value());
    Ok((0..samples.len())
        .map(|i| ForwardOutputs {
            z_d: zd[i * p..(i + 1) * p].to_vec(),
            z_s: zs[i * p..(i + 1) * p].to_vec(),
            z_hat: zh[i * d..(i + 1) * d].to_vec(),
            z_hat_d: zhd[i * d..(i + 1) * d].to_vec(),
            attn_cls: feats.attn_cls[i].clone(),
        })
        .collect())
}

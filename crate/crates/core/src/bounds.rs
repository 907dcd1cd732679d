//! Domain-adaptation bound quantities: the empirical 𝒜-distance, the VC
//! confidence term and the two target-error bounds.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `2 ln 2`, the magnitude of the JS estimate under an independent critic.
pub const MI_FLOOR: f64 = 2.0 * std::f64::consts::LN_2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BoundsConfig {
    /// VC-dimension proxy. `None` uses the domain head's parameter count.
    pub vc_dim: Option<usize>,
    pub delta: f64,
    /// Clamp the dependence score into `[0, 1]`.
    pub mi_clamp: bool,
}

impl Default for BoundsConfig {
    fn default() -> Self {
        Self {
            vc_dim: None,
            delta: 0.05,
            mi_clamp: true,
        }
    }
}

impl BoundsConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::Config(format!("bounds.delta must lie in (0, 1), got {}", self.delta)));
        }
        if self.vc_dim == Some(0) {
            return Err(Error::Config("bounds.vc_dim must be >= 1".into()));
        }
        Ok(())
    }
}

fn check_rate(name: &str, v: f64) -> Result<()> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(Error::invalid(format!("{name} must lie in [0, 1], got {v}")))
    }
}

/// Empirical 𝒜-distance from a domain classifier's two error rates. The
/// classifier or its complement, whichever errs less, supplies the minimum.
pub fn proxy_a_distance(err_a: f64, err_b: f64) -> Result<f64> {
    check_rate("err_a", err_a)?;
    check_rate("err_b", err_b)?;
    let s = err_a + err_b;
    Ok(2.0 * (1.0 - s.min(2.0 - s)))
}

/// Error rates of a two-way domain prediction: the fraction of `a` samples
/// predicted `b` and of `b` samples predicted `a`.
pub fn domain_errors(predicted_b: &[bool], is_b: &[bool]) -> Result<(f64, f64)> {
    if predicted_b.len() != is_b.len() {
        return Err(Error::shape("domain_errors", &[predicted_b.len()], &[is_b.len()]));
    }
    let (mut wrong_a, mut n_a, mut wrong_b, mut n_b) = (0usize, 0usize, 0usize, 0usize);
    for (&p, &b) in predicted_b.iter().zip(is_b) {
        if b {
            n_b += 1;
            wrong_b += usize::from(!p);
        } else {
            n_a += 1;
            wrong_a += usize::from(p);
        }
    }
    if n_a == 0 || n_b == 0 {
        return Err(Error::invalid("domain_errors needs samples from both domains"));
    }
    Ok((wrong_a as f64 / n_a as f64, wrong_b as f64 / n_b as f64))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Confidence {
    /// `4 max(√(...), √(...))`; a negative radicand contributes 0.
    pub value: f64,
    /// Set when a radicand was negative.
    pub vacuous: bool,
}

/// VC confidence term of the 𝒜-distance estimate (natural logarithms).
pub fn confidence_term(d: usize, m_a: usize, m_b: usize, delta: f64) -> Result<Confidence> {
    if d == 0 || m_a == 0 || m_b == 0 {
        return Err(Error::invalid("confidence_term needs d, m_a, m_b >= 1"));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::invalid(format!("delta must lie in (0, 1), got {delta}")));
    }
    let mut vacuous = false;
    let mut branch = |m: usize| {
        let m = m as f64;
        let radicand = (d as f64 * (2.0 * m).ln() - (2.0 / delta).ln()) / m;
        if radicand < 0.0 {
            vacuous = true;
            0.0
        } else {
            radicand.sqrt()
        }
    };
    let value = 4.0 * branch(m_a).max(branch(m_b));
    Ok(Confidence { value, vacuous })
}

/// Nonnegative dependence score from a JS estimate: the estimate minus its
/// `-2 ln 2` independence floor, clamped at 0 and, with `clamp`, at 1.
pub fn dependence_score(mi_estimate: f64, clamp: bool) -> f64 {
    let s = (mi_estimate + MI_FLOOR).max(0.0);
    if clamp {
        s.min(1.0)
    } else {
        s
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub e_l: f64,
    pub e_u: f64,
    pub d_hat: f64,
    pub confidence_term: f64,
    pub confidence_vacuous: bool,
    pub vc_dim: usize,
    pub mi_estimate: f64,
    pub dependence: f64,
    pub thm1_rhs: f64,
    pub thm2_rhs: f64,
    /// `thm1_rhs - e_u`; negative means the bound was violated.
    pub thm1_slack: f64,
    pub thm2_slack: f64,
}

impl BoundReport {
    pub fn is_finite(&self) -> bool {
        [
            self.e_l,
            self.e_u,
            self.d_hat,
            self.confidence_term,
            self.mi_estimate,
            self.dependence,
            self.thm1_rhs,
            self.thm2_rhs,
            self.thm1_slack,
            self.thm2_slack,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

/// Evaluates both bounds against the measured errors.
/// `thm1 = e_l + d̂/2 + confidence/2`, `thm2 = e_l + √dependence`.
pub fn thm_bounds(
    e_l: f64,
    e_u: f64,
    d_hat: f64,
    confidence: Confidence,
    vc_dim: usize,
    mi_estimate: f64,
    cfg: &BoundsConfig,
) -> Result<BoundReport> {
    check_rate("e_l", e_l)?;
    check_rate("e_u", e_u)?;
    if !(0.0..=2.0).contains(&d_hat) {
        return Err(Error::invalid(format!("d_hat must lie in [0, 2], got {d_hat}")));
    }
    if !mi_estimate.is_finite() || !confidence.value.is_finite() {
        return Err(Error::NonFinite("bound inputs".into()));
    }
    let dependence = dependence_score(mi_estimate, cfg.mi_clamp);
    let thm1_rhs = e_l + d_hat / 2.0 + confidence.value / 2.0;
    let thm2_rhs = e_l + dependence.sqrt();
    Ok(BoundReport {
        e_l,
        e_u,
        d_hat,
        confidence_term: confidence.value,
        confidence_vacuous: confidence.vacuous,
        vc_dim,
        mi_estimate,
        dependence,
        thm1_rhs,
        thm2_rhs,
        thm1_slack: thm1_rhs - e_u,
        thm2_slack: thm2_rhs - e_u,
    })
}

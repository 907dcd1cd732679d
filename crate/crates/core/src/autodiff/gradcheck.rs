use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Outcome of comparing reverse-mode gradients with central differences.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub max_rel_error: f64,
    /// Coordinate at which the maximum was attained.
    pub worst_index: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

/// Relative discrepancy used by [`grad_check`].
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs() + 1e-12)
}

fn eval_scalar<F>(f: &F, point: &Tensor, tracked: bool) -> Result<(f64, Option<Vec<f64>>)>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let x = if tracked { tape.leaf(point) } else { tape.constant(point) };
    let y = f(&tape, x)?;
    if y.numel() != 1 {
        return Err(Error::shape("grad_check", &y.shape(), &[1]));
    }
    let v = y.item();
    if !v.is_finite() {
        return Err(Error::NonFinite(format!("grad_check forward value {v}")));
    }
    let grad = if tracked {
        Some(tape.backward(y)?.tensor(&x).into_data())
    } else {
        None
    };
    Ok((v, grad))
}

/// Checks the gradient of scalar program `f` at `point` with central
/// differences of half-width `step`, returning the worst relative error
/// `|a - c| / (|a| + |c| + 1e-12)` over coordinates.
pub fn grad_check<F>(f: F, point: &Tensor, step: f64) -> Result<GradCheck>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    let all: Vec<usize> = (0..point.numel()).collect();
    grad_check_at(f, point, step, &all)
}

/// [`grad_check`] restricted to the listed coordinates. `analytic` and
/// `numeric` follow the order of `coords`; `worst_index` is a coordinate of
/// `point`.
pub fn grad_check_at<F>(f: F, point: &Tensor, step: f64, coords: &[usize]) -> Result<GradCheck>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    if !(step > 0.0 && step <= 1e-2) {
        return Err(Error::invalid(format!("grad_check step must lie in (0, 1e-2], got {step}")));
    }
    if let Some(&i) = coords.iter().find(|&&i| i >= point.numel()) {
        return Err(Error::invalid(format!("coordinate {i} outside a point of {} values", point.numel())));
    }
    let (_, full) = eval_scalar(&f, point, true)?;
    let full = full.expect("tracked evaluation returns a gradient");
    let analytic: Vec<f64> = coords.iter().map(|&i| full[i]).collect();
    let mut numeric = Vec::with_capacity(coords.len());
    let mut probe = point.clone();
    for &i in coords {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let (fp, _) = eval_scalar(&f, &probe, false)?;
        probe.data_mut()[i] = orig - step;
        let (fm, _) = eval_scalar(&f, &probe, false)?;
        probe.data_mut()[i] = orig;
        numeric.push((fp - fm) / (2.0 * step));
    }
    let (worst, max_rel_error) = analytic
        .iter()
        .zip(&numeric)
        .map(|(&a, &n)| rel_error(a, n))
        .enumerate()
        .fold((0, 0.0), |best, (i, e)| if e > best.1 { (i, e) } else { best });
    Ok(GradCheck {
        max_rel_error,
        worst_index: coords.get(worst).copied().unwrap_or(0),
        analytic,
        numeric,
    })
}

/// Pins the higher-ranked signature [`grad_check`] expects onto a closure
/// that is bound to a variable before use.
pub fn program<F>(f: F) -> F
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    f
}

//! Central finite-difference verification of reverse-mode gradients.

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Magnitude below which gradient entries are compared on an absolute scale.
///
/// Central differences at `eps = 1e-5` carry roundoff of order
/// `1e-16 · |f| / eps`; entries smaller than this floor would otherwise be
/// dominated by that noise.
pub const REL_ERR_FLOOR: f64 = 1e-6;

/// Relative error of one coordinate, `|a − n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR);
    (analytic - numeric).abs() / denom
}

pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| relative_error(*a, *n))
        .fold(0.0, f64::max)
}

/// `(f(x+εeᵢ) − f(x−εeᵢ)) / 2ε` for each coordinate of `x`.
pub fn central_difference(mut f: impl FnMut(&[f64]) -> Result<f64>, x: &[f64], eps: f64) -> Result<Vec<f64>> {
    let mut probe = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + eps;
        let hi = f(&probe)?;
        probe[i] = orig - eps;
        let lo = f(&probe)?;
        probe[i] = orig;
        if !hi.is_finite() || !lo.is_finite() {
            return Err(Error::Numeric(format!("non-finite value probing coordinate {i}")));
        }
        out.push((hi - lo) / (2.0 * eps));
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    pub max_relative_error: f64,
}

/// Compares the tape gradient of the scalar `f` at `x` against central
/// differences.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let input = tape.param(x);
    let out = f(&tape, input)?;
    let value = out.item();
    if !value.is_finite() {
        return Err(Error::Numeric("objective is not finite".into()));
    }
    let analytic = tape.backward(out)?.get(input).into_data();

    let shape = x.shape().to_vec();
    let numeric = central_difference(
        |probe| {
            let t = Tape::new();
            let v = t.constant(Tensor::new(shape.clone(), probe.to_vec())?);
            Ok(f(&t, v)?.item())
        },
        x.data(),
        eps,
    )?;
    let max_relative_error = max_relative_error(&analytic, &numeric);
    Ok(GradCheckReport {
        analytic,
        numeric,
        max_relative_error,
    })
}

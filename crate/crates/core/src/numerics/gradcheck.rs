//! Central finite differences, the reference every analytic gradient in the
//! crate is certified against.

use super::params::ParamSet;
use super::tensor::Tensor;
use crate::Result;

/// Denominator floor for [`relative_error`].
pub const REL_FLOOR: f64 = 1e-6;

/// `(f(p + eps) - f(p - eps)) / 2eps` for every scalar of every parameter.
pub fn central_difference<F>(params: &ParamSet, eps: f64, mut f: F) -> Result<Vec<Tensor>>
where
    F: FnMut(&ParamSet) -> Result<f64>,
{
    let mut work = params.clone();
    let mut out = Vec::with_capacity(params.len());
    for i in 0..params.len() {
        let mut g = Tensor::zeros(params.get(i).shape());
        for j in 0..params.get(i).len() {
            let orig = work.get(i).data()[j];
            work.get_mut(i).data_mut()[j] = orig + eps;
            let plus = f(&work)?;
            work.get_mut(i).data_mut()[j] = orig - eps;
            let minus = f(&work)?;
            work.get_mut(i).data_mut()[j] = orig;
            g.data_mut()[j] = (plus - minus) / (2.0 * eps);
        }
        out.push(g);
    }
    Ok(out)
}

/// `|a - n| / max(|a|, |n|, REL_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Largest [`relative_error`] across matching tensors.
pub fn max_relative_error(analytic: &[Tensor], numeric: &[Tensor]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .flat_map(|(a, n)| a.data().iter().zip(n.data()))
        .map(|(&a, &n)| relative_error(a, n))
        .fold(0.0, f64::max)
}

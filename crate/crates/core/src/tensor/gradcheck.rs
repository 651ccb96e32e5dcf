use super::{DenseTensor, ParamId, ParamStore};
use crate::error::Result;

/// Denominator floor used by [`relative_error`]. Below this magnitude the
/// comparison degrades gracefully to an absolute one.
pub const GRAD_REL_FLOOR: f64 = 1e-4;

/// `|a - b| / max(|a|, |b|, GRAD_REL_FLOOR)`
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(GRAD_REL_FLOOR)
}

/// Central-difference gradient of a scalar function with respect to one
/// parameter. The parameter is restored bit-exactly afterwards.
///
/// `f` must be deterministic: reseed any randomness it uses on every call.
pub fn finite_diff_grad<F>(store: &mut ParamStore, at: ParamId, step: f64, mut f: F) -> Result<DenseTensor>
where
    F: FnMut(&ParamStore) -> Result<f64>,
{
    let n = store.value(at).numel();
    let mut out = vec![0.0; n];
    for (i, slot) in out.iter_mut().enumerate() {
        let orig = store.value(at).values()[i];
        store.get_mut(at).value_mut().values_mut()[i] = orig + step;
        let plus = f(store);
        store.get_mut(at).value_mut().values_mut()[i] = orig - step;
        let minus = f(store);
        store.get_mut(at).value_mut().values_mut()[i] = orig;
        *slot = (plus? - minus?) / (2.0 * step);
    }
    DenseTensor::new(store.value(at).dims(), out)
}

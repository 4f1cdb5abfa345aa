//! Central finite differences for verifying analytic gradients.

use crate::autograd::{ParamId, ParamStore};
use crate::tensor::Matrix;

/// Numeric gradient of `f` with respect to parameter `id`, one entry at a time.
/// The parameter is restored exactly after each probe.
pub fn central_difference(
    store: &mut ParamStore,
    id: ParamId,
    eps: f64,
    f: impl Fn(&ParamStore) -> f64,
) -> Matrix {
    let (r, c) = store.get(id).shape();
    let mut out = Matrix::zeros(r, c);
    for k in 0..r * c {
        let orig = store.get(id).as_slice()[k];
        store.get_mut(id).as_mut_slice()[k] = orig + eps;
        let plus = f(store);
        store.get_mut(id).as_mut_slice()[k] = orig - eps;
        let minus = f(store);
        store.get_mut(id).as_mut_slice()[k] = orig;
        out.as_mut_slice()[k] = (plus - minus) / (2.0 * eps);
    }
    out
}

/// `|a - n| / max(|a| + |n|, 1e-12)` over whole vectors (Euclidean norms).
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let diff: f64 = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n) * (a - n))
        .sum::<f64>()
        .sqrt();
    let norm_a = analytic.iter().map(|v| v * v).sum::<f64>().sqrt();
    let norm_n = numeric.iter().map(|v| v * v).sum::<f64>().sqrt();
    diff / (norm_a + norm_n).max(1e-12)
}

//! Central finite-difference gradient checking.
//!
//! Only the forward closure is used here, so these estimates are an
//! independent oracle for [`Graph::backward`](super::Graph::backward).

use super::ParamStore;

/// Central differences `(f(p + h) - f(p - h)) / 2h` for every scalar
/// parameter in `store`. Parameter values are restored afterwards.
pub fn finite_difference_grads<F>(store: &mut ParamStore, step: f64, mut loss: F) -> Vec<Vec<f64>>
where
    F: FnMut(&ParamStore) -> f64,
{
    let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
    let mut grads = Vec::with_capacity(ids.len());
    for id in ids {
        let n = store.get(id).len();
        let mut g = vec![0.0; n];
        for (i, gi) in g.iter_mut().enumerate() {
            let orig = store.get(id).value[i];
            store.get_mut(id).value[i] = orig + step;
            let plus = loss(store);
            store.get_mut(id).value[i] = orig - step;
            let minus = loss(store);
            store.get_mut(id).value[i] = orig;
            *gi = (plus - minus) / (2.0 * step);
        }
        grads.push(g);
    }
    grads
}

/// Entries whose analytic and numeric magnitudes are both below this floor
/// are compared in absolute terms.
pub const RELATIVE_FLOOR: f64 = 1e-6;

/// `max |a - n| / max(|a|, |n|, RELATIVE_FLOOR)` over all entries.
pub fn max_relative_error(analytic: &[Vec<f64>], numeric: &[Vec<f64>]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .flat_map(|(a, n)| {
            assert_eq!(a.len(), n.len());
            a.iter().zip(n)
        })
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(RELATIVE_FLOOR))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn central_difference_of_cubic() {
        let mut store = ParamStore::new();
        let id = store.add("x", 1, 1, vec![2.0]);
        let g = finite_difference_grads(&mut store, 1e-5, |s| s.get(id).value[0].powi(3));
        assert!((g[0][0] - 12.0).abs() < 1e-8);
        assert_eq!(store.get(id).value[0], 2.0);
    }

    #[test]
    fn relative_error_uses_floor() {
        let e = max_relative_error(&[vec![1e-9]], &[vec![2e-9]]);
        assert!(e < 1e-2);
        let e = max_relative_error(&[vec![1.0]], &[vec![1.001]]);
        assert!((e - 0.001 / 1.001).abs() < 1e-12);
    }
}

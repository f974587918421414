//! Finite-difference gradient checking.
//!
//! The checker never looks inside the tape: it re-evaluates the loss closure
//! with perturbed parameters, so it stays an independent oracle for the
//! reverse pass.

use alloc::vec::Vec;

use crate::error::Result;
use crate::param::ParamStore;
use crate::scalar::Scalar;

/// Central-difference gradient of `loss` with respect to every trainable
/// element of `store`, in registration order. `h` is the half-step; 1e-5 is
/// a good default in 64-bit.
///
/// The closure must be a pure function of the store values (same RNG draws,
/// same data) or the comparison is meaningless.
pub fn finite_diff_grad<S, F>(store: &mut ParamStore<S>, h: f64, mut loss: F) -> Result<Vec<f64>>
where
    S: Scalar,
    F: FnMut(&ParamStore<S>) -> Result<S>,
{
    let base = store.snapshot();
    let mut out = Vec::new();
    let mut flat_off = 0;
    for id in store.ids().collect::<Vec<_>>() {
        let n = store.get(id).value.len();
        if store.get(id).frozen {
            flat_off += n;
            continue;
        }
        for k in 0..n {
            let orig = base[flat_off + k];
            let hv = S::from_f64(h);

            store.get_mut(id).value.data_mut()[k] = orig + hv;
            let up = loss(store)?.to_f64();
            store.get_mut(id).value.data_mut()[k] = orig - hv;
            let down = loss(store)?.to_f64();
            store.get_mut(id).value.data_mut()[k] = orig;

            out.push((up - down) / (2.0 * h));
        }
        flat_off += n;
    }
    Ok(out)
}

/// Analytic gradients flattened in the same order `finite_diff_grad` uses:
/// trainable parameters in registration order, elements row-major.
pub fn flatten_trainable_grads<S: Scalar>(store: &ParamStore<S>) -> Vec<f64> {
    let mut out = Vec::new();
    for (_, p) in store.iter() {
        if p.frozen {
            continue;
        }
        out.extend(p.grad.data().iter().map(|g| g.to_f64()));
    }
    out
}

/// Worst relative error between two gradient vectors. The denominator is
/// floored so near-zero entries compare absolutely.
pub fn max_rel_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    assert_eq!(a.len(), b.len(), "gradient length mismatch");
    let mut worst = 0.0f64;
    for (&x, &y) in a.iter().zip(b) {
        let denom = x.abs().max(y.abs()).max(floor);
        let rel = (x - y).abs() / denom;
        if rel > worst {
            worst = rel;
        }
    }
    worst
}

/// Outcome of one gradient check, kept small enough to print in reports.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub n_checked: usize,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

/// Run backward once (via `analytic`), then compare against central
/// differences of `loss`. `analytic` must leave the parameter grads filled.
pub fn check_gradients<S, F, G>(
    store: &mut ParamStore<S>,
    h: f64,
    tolerance: f64,
    mut analytic: G,
    loss: F,
) -> Result<GradCheckReport>
where
    S: Scalar,
    F: FnMut(&ParamStore<S>) -> Result<S>,
    G: FnMut(&mut ParamStore<S>) -> Result<S>,
{
    store.zero_grads();
    analytic(store)?;
    let got = flatten_trainable_grads(store);
    let want = finite_diff_grad(store, h, loss)?;
    Ok(GradCheckReport {
        n_checked: got.len(),
        max_rel_error: max_rel_error(&got, &want, 1e-6),
        tolerance,
    })
}

//! Finite-difference utilities for verifying analytic gradients.
//!
//! The pattern: express the quantity under test as a scalar function of a
//! parameter list, compute analytic gradients once via the tape, then
//! compare each component against a central difference of the same
//! function. Everything is f64, so agreement to ~1e-6 relative error is
//! expected for smooth operations at sensible step sizes.

use crate::Arr;

/// Relative error with an absolute floor, symmetric in its arguments.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-12)
}

/// Central finite difference of `f` with respect to element `elem` (in
/// flat row-major order) of `params[param]`, using step size `h`.
pub fn central_diff<F>(f: F, params: &[Arr], param: usize, elem: usize, h: f64) -> f64
where
    F: Fn(&[Arr]) -> f64,
{
    let mut shifted = params.to_vec();
    let orig = shifted[param].as_slice().expect("standard layout")[elem];

    shifted[param].as_slice_mut().unwrap()[elem] = orig + h;
    let above = f(&shifted);
    shifted[param].as_slice_mut().unwrap()[elem] = orig - h;
    let below = f(&shifted);

    (above - below) / (2.0 * h)
}

/// Compares the analytic gradient arrays against central differences of
/// `f` at every element of every parameter. Returns the worst relative
/// error observed, or panics with a description of the first element whose
/// relative error exceeds `tol` (with an absolute-error escape hatch for
/// components near zero).
pub fn assert_gradients_match<F>(
    f: F,
    params: &[Arr],
    analytic: &[Arr],
    h: f64,
    tol: f64,
) -> f64
where
    F: Fn(&[Arr]) -> f64,
{
    assert_eq!(params.len(), analytic.len());
    let mut worst = 0.0f64;
    for (pi, (p, grad)) in params.iter().zip(analytic).enumerate() {
        assert_eq!(p.shape(), grad.shape(), "gradient shape mismatch at param {pi}");
        let ga = grad.as_slice().expect("standard layout");
        for elem in 0..p.len() {
            let numeric = central_diff(&f, params, pi, elem, h);
            let err = rel_err(ga[elem], numeric);
            // Tiny derivatives drown in the O(h^2) truncation error of the
            // central difference; fall back to an absolute comparison.
            if (ga[elem] - numeric).abs() < tol * 1e-2 {
                continue;
            }
            assert!(
                err <= tol,
                "gradient mismatch: param {pi} elem {elem}: analytic {} vs numeric {} (rel err {err:.3e})",
                ga[elem],
                numeric
            );
            worst = worst.max(err);
        }
    }
    worst
}

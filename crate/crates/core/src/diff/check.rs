//! Central finite-difference verification of analytic gradients.

use crate::error::{Error, Result};
use crate::num::Real;

/// Compares the analytic gradient returned by `f` against central finite
/// differences at `point`, returning the max over coordinates of
/// |analytic - central| / max(|analytic|, |central|, 1e-8).
///
/// `f` must return the scalar value and its full analytic gradient.
pub fn check_gradient<T: Real>(
    f: &mut dyn FnMut(&[T]) -> Result<(T, Vec<T>)>,
    point: &[T],
    step: T,
) -> Result<T> {
    assert!(step > T::zero(), "step must be positive");
    let (_, analytic) = f(point)?;
    assert_eq!(analytic.len(), point.len(), "gradient length mismatch");
    let eps = T::of(1e-8);
    let mut x = point.to_vec();
    let mut worst = T::zero();
    for i in 0..point.len() {
        let xi = point[i];
        x[i] = xi + step;
        let (fp, _) = f(&x)?;
        x[i] = xi - step;
        let (fm, _) = f(&x)?;
        x[i] = xi;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::NonFiniteStencil { coord: i });
        }
        let central = (fp - fm) / (T::of(2.0) * step);
        let denom = analytic[i].abs().max(central.abs()).max(eps);
        let err = (analytic[i] - central).abs() / denom;
        if err > worst {
            worst = err;
        }
    }
    Ok(worst)
}

/// Central finite difference of a scalar function along coordinate `i`.
pub fn central_diff<T: Real>(
    f: &mut dyn FnMut(&[T]) -> T,
    point: &[T],
    i: usize,
    step: T,
) -> T {
    let mut x = point.to_vec();
    x[i] = point[i] + step;
    let fp = f(&x);
    x[i] = point[i] - step;
    let fm = f(&x);
    (fp - fm) / (T::of(2.0) * step)
}

/// Relative error with the same denominator convention as `check_gradient`.
pub fn rel_err<T: Real>(a: T, b: T) -> T {
    (a - b).abs() / a.abs().max(b.abs()).max(T::of(1e-8))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sin_gradient_is_tight() {
        let mut f = |x: &[f64]| Ok((x[0].sin(), vec![x[0].cos()]));
        let err = check_gradient(&mut f, &[0.7], 1e-4).unwrap();
        assert!(err < 1e-6, "err = {err}");
    }

    #[test]
    fn abs_kink_is_loud() {
        // |x| at 0 with the (wrong there) analytic subgradient 0.
        let mut f = |x: &[f64]| Ok((x[0].abs(), vec![x[0].signum() * ((x[0] != 0.0) as i32 as f64)]));
        let err = check_gradient(&mut f, &[0.0], 1e-4).unwrap();
        assert!(err > 0.5, "kink should report a large error, got {err}");
    }

    #[test]
    fn nonfinite_stencil_names_coordinate() {
        let mut f = |x: &[f64]| Ok((x[1].ln(), vec![0.0, 1.0 / x[1]]));
        let e = check_gradient(&mut f, &[1.0, 1e-9], 1e-4).unwrap_err();
        match e {
            Error::NonFiniteStencil { coord } => assert_eq!(coord, 1),
            other => panic!("unexpected error {other:?}"),
        }
    }
}

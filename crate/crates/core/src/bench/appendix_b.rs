//! Gradients of the two adaptive-bin-width constructions for a one-bin-edge
//! piecewise-linear warp on [0, 1].
//!
//! With bin widths `theta` and `1 - theta`, treating the bin values
//! `Q1, Q2` as unnormalized densities and moving the gradient inside the
//! expectation gives a value whose sign does not depend on `theta`. Treating
//! them as bin masses gives `(1/theta) int_0^theta p - (1/(1-theta)) int_theta^1 p`,
//! which vanishes identically for uniform `p`.

use crate::error::{FlowError, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AppendixB {
    pub density_normalized: f64,
    pub mass_normalized: f64,
}

impl AppendixB {
    pub fn density_normalized_sign(&self) -> f64 {
        self.density_normalized.signum()
    }
}

pub fn appendix_b_gradients(
    theta: f64,
    q1: f64,
    q2: f64,
    p: impl Fn(f64) -> f64,
) -> Result<AppendixB> {
    if !(theta > 0.0 && theta < 1.0) {
        return Err(FlowError::Domain(format!(
            "bin edge {theta} must lie strictly inside (0, 1)"
        )));
    }
    if !(q1 > 0.0 && q2 > 0.0 && q1.is_finite() && q2.is_finite()) {
        return Err(FlowError::Domain(format!(
            "bin values ({q1}, {q2}) must be positive"
        )));
    }
    let left = integrate(&p, 0.0, theta, 1e-13);
    let right = integrate(&p, theta, 1.0, 1e-13);
    Ok(AppendixB {
        density_normalized: (1.0 - q2 / q1) * left + (q1 / q2 - 1.0) * right,
        mass_normalized: left / theta - right / (1.0 - theta),
    })
}

/// Adaptive Simpson quadrature of `f` over `[a, b]`.
pub fn integrate(f: &impl Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    let m = 0.5 * (a + b);
    let (fa, fm, fb) = (f(a), f(m), f(b));
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    simpson(f, a, b, fa, fm, fb, whole, tol, 48)
}

#[allow(clippy::too_many_arguments)]
fn simpson(
    f: &impl Fn(f64) -> f64,
    a: f64,
    b: f64,
    fa: f64,
    fm: f64,
    fb: f64,
    whole: f64,
    tol: f64,
    depth: u32,
) -> f64 {
    let m = 0.5 * (a + b);
    let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
    let (flm, frm) = (f(lm), f(rm));
    let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
    let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
    let delta = left + right - whole;
    if depth == 0 || delta.abs() <= 15.0 * tol {
        return left + right + delta / 15.0;
    }
    simpson(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1)
        + simpson(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_mass_normalized_vanishes() {
        for theta in [0.1, 0.5, 0.9] {
            let g = appendix_b_gradients(theta, 1.0, 3.0, |_| 1.0).unwrap();
            assert!(
                g.mass_normalized.abs() < 1e-12,
                "{theta}: {}",
                g.mass_normalized
            );
        }
    }

    #[test]
    fn density_normalized_sign_ignores_theta() {
        let lo = appendix_b_gradients(0.1, 1.0, 3.0, |_| 1.0).unwrap();
        let hi = appendix_b_gradients(0.9, 1.0, 3.0, |_| 1.0).unwrap();
        assert_eq!(lo.density_normalized_sign(), hi.density_normalized_sign());
        assert!(lo.density_normalized < 0.0);
    }

    #[test]
    fn half_step_target() {
        let g = appendix_b_gradients(0.5, 1.0, 1.0, |x| if x < 0.5 { 2.0 } else { 0.0 }).unwrap();
        assert!((g.mass_normalized - 2.0).abs() < 1e-9);
    }

    #[test]
    fn edge_values_are_rejected() {
        for theta in [0.0, 1.0] {
            assert!(matches!(
                appendix_b_gradients(theta, 1.0, 3.0, |_| 1.0),
                Err(FlowError::Domain(_))
            ));
        }
        assert!(appendix_b_gradients(0.5, 0.0, 3.0, |_| 1.0).is_err());
    }

    #[test]
    fn quadrature() {
        assert!(
            (integrate(&|x: f64| x.sin(), 0.0, std::f64::consts::PI, 1e-12) - 2.0).abs() < 1e-10
        );
        assert!((integrate(&|x: f64| x.sqrt(), 0.0, 1.0, 1e-12) - 2.0 / 3.0).abs() < 1e-9);
    }
}

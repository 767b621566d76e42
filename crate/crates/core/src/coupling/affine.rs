//! Additive and multiply-add warps applied in logit space, so that they map
//! the unit interval onto itself.

/// Inputs are pushed at least this far from 0 and 1 before taking the logit.
pub const DOMAIN_EPSILON: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Inverse,
}

/// Per-dimension log-scale `s` and translation `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineParams {
    pub s: Vec<f64>,
    pub t: Vec<f64>,
}

fn logit(x: f64) -> f64 {
    (x / (1.0 - x)).ln()
}

fn sigmoid(l: f64) -> f64 {
    if l >= 0.0 {
        1.0 / (1.0 + (-l).exp())
    } else {
        let e = l.exp();
        e / (1.0 + e)
    }
}

/// `ln(sigmoid(l) * (1 - sigmoid(l)))`, stable for large `|l|`.
fn log_sigmoid_slope(l: f64) -> f64 {
    let a = l.abs();
    -a - 2.0 * (-a).exp().ln_1p()
}

fn clamp_domain(x: f64) -> (f64, bool) {
    let c = x.clamp(DOMAIN_EPSILON, 1.0 - DOMAIN_EPSILON);
    (c, c != x)
}

/// Result of one affine warp.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineWarp {
    pub y: f64,
    /// Log density change of the forward map at the forward-direction input.
    pub log_det: f64,
    /// The input had to be moved into `[DOMAIN_EPSILON, 1 - DOMAIN_EPSILON]`.
    pub clamped: bool,
}

/// Warps `x` by `sigmoid(logit(x) * exp(s) + t)` or its inverse.
///
/// `log_det` always refers to the forward map evaluated at its input, i.e. at
/// the returned `y` in the inverse direction, and includes the Jacobians of
/// the logit and sigmoid squashing.
pub fn affine_warp(x: f64, s: f64, t: f64, direction: Direction) -> AffineWarp {
    let (x, clamped) = clamp_domain(x);
    match direction {
        Direction::Forward => {
            let l = logit(x);
            let lp = l * s.exp() + t;
            let y = sigmoid(lp);
            AffineWarp {
                y,
                log_det: s + log_sigmoid_slope(lp) - log_sigmoid_slope(l),
                clamped,
            }
        }
        Direction::Inverse => {
            let lp = logit(x);
            let l = (lp - t) * (-s).exp();
            let y = sigmoid(l);
            AffineWarp {
                y,
                log_det: s + log_sigmoid_slope(lp) - log_sigmoid_slope(l),
                clamped,
            }
        }
    }
}

/// Accumulates `d/d(s, t)` of `gy * y + g_log_det * log_det` and returns the
/// derivative with respect to `x`. `grad_s` is `None` for additive warps.
pub(super) fn backprop(
    x: f64,
    s: f64,
    t: f64,
    gy: f64,
    g_log_det: f64,
    grad_s: Option<&mut f64>,
    grad_t: &mut f64,
) -> f64 {
    let (xc, clamped) = clamp_domain(x);
    let l = logit(xc);
    let es = s.exp();
    let lp = l * es + t;
    let y = sigmoid(lp);
    let slope = y * (1.0 - y);
    // d(log_det)/d(lp) = 1 - 2y
    let g_lp = gy * slope + g_log_det * (1.0 - 2.0 * y);
    *grad_t += g_lp;
    if let Some(gs) = grad_s {
        *gs += g_lp * l * es + g_log_det;
    }
    if clamped {
        return 0.0;
    }
    let dl_dx = 1.0 / (xc * (1.0 - xc));
    g_lp * es * dl_dx - g_log_det * (1.0 - 2.0 * xc) * dl_dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_parameters_are_identity() {
        for x in [0.01, 0.3, 0.5, 0.97] {
            let w = affine_warp(x, 0.0, 0.0, Direction::Forward);
            assert!((w.y - x).abs() < 1e-15);
            assert!(w.log_det.abs() < 1e-14);
        }
    }

    #[test]
    fn logit_space_scale_and_shift() {
        // logit(x) = 0.2, s = ln 2, t = 0.1 -> logit(y) = 0.5
        let x = sigmoid(0.2);
        let s = 2f64.ln();
        let w = affine_warp(x, s, 0.1, Direction::Forward);
        assert!((logit(w.y) - 0.5).abs() < 1e-12);
        let squash = log_sigmoid_slope(0.5) - log_sigmoid_slope(0.2);
        assert!((w.log_det - squash - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn inverse_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut worst: f64 = 0.0;
        let mut skipped = 0;
        for _ in 0..10_000 {
            let x: f64 = rng.random_range(0.0..1.0);
            let s = rng.random_range(-2.0..2.0);
            let t = rng.random_range(-2.0..2.0);
            let f = affine_warp(x, s, t, Direction::Forward);
            let b = affine_warp(f.y, s, t, Direction::Inverse);
            if b.clamped {
                skipped += 1;
                continue;
            }
            let expected = x.clamp(DOMAIN_EPSILON, 1.0 - DOMAIN_EPSILON);
            worst = worst.max((b.y - expected).abs());
            assert!(
                (b.log_det - f.log_det).abs() < 1e-9 * (1.0 + f.log_det.abs()),
                "{x} {s} {t}: {} vs {}",
                b.log_det,
                f.log_det
            );
        }
        assert!(worst < 1e-9, "{worst}");
        assert!(skipped < 500, "{skipped}");
    }

    #[test]
    fn clamps_domain_edges() {
        let w = affine_warp(0.0, 0.5, 0.0, Direction::Forward);
        assert!(w.clamped && w.y > 0.0);
        assert!(affine_warp(1.0, 0.5, 0.0, Direction::Forward).clamped);
    }

    #[test]
    fn backprop_matches_finite_differences() {
        let objective = |x: f64, s: f64, t: f64| {
            let w = affine_warp(x, s, t, Direction::Forward);
            0.8 * w.y - 1.1 * w.log_det
        };
        for (x, s, t) in [(0.2, 0.3, -0.4), (0.7, -1.0, 0.5), (0.5, 0.0, 0.0)] {
            let (mut gs, mut gt) = (0.0, 0.0);
            let gx = backprop(x, s, t, 0.8, -1.1, Some(&mut gs), &mut gt);
            let h = 1e-6;
            let fd_s = (objective(x, s + h, t) - objective(x, s - h, t)) / (2.0 * h);
            let fd_t = (objective(x, s, t + h) - objective(x, s, t - h)) / (2.0 * h);
            let fd_x = (objective(x + h, s, t) - objective(x - h, s, t)) / (2.0 * h);
            assert!((fd_s - gs).abs() < 1e-7);
            assert!((fd_t - gt).abs() < 1e-7);
            assert!((fd_x - gx).abs() < 1e-6 * (1.0 + fd_x.abs()));
        }
    }
}

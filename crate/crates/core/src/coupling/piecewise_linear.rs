//! Piecewise-linear warps: piecewise-constant densities over `K` bins of
//! fixed width `1/K`.

use ndarray::Array2;

use super::{check_finite, clamp_unit, softmax_into};
use crate::error::Result;

/// Row-normalized bin masses, one row per warped dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct PwlParams {
    pub q: Array2<f64>,
}

impl PwlParams {
    pub fn bins(&self) -> usize {
        self.q.ncols()
    }
}

pub fn normalize_pwl(raw: &Array2<f64>) -> Result<PwlParams> {
    let mut q = Array2::zeros(raw.raw_dim());
    for (src, mut dst) in raw.rows().into_iter().zip(q.rows_mut()) {
        let src = src.to_vec();
        check_finite(&src, "piecewise-linear logits")?;
        softmax_into(&src, dst.as_slice_mut().expect("contiguous row"));
    }
    Ok(PwlParams { q })
}

/// Warps `x` through the CDF of the piecewise-constant density with bin masses `q`.
/// Returns `(y, pdf)`.
pub fn pwl_warp(x: f64, q: &[f64]) -> (f64, f64) {
    let k = q.len();
    let x = clamp_unit(x);
    let scaled = x * k as f64;
    let b = (scaled.floor() as usize).min(k - 1);
    let alpha = scaled - b as f64;
    let below: f64 = q[..b].iter().sum();
    let y = clamp_unit(alpha * q[b] + below);
    (y, q[b] * k as f64)
}

/// Inverse of [`pwl_warp`]. A `y` falling on a zero-mass bin maps to that
/// bin's left edge.
pub fn pwl_unwarp(y: f64, q: &[f64]) -> f64 {
    let k = q.len();
    let y = clamp_unit(y);
    let mut below = 0.0;
    let mut b = k - 1;
    for (i, &mass) in q.iter().enumerate() {
        if y < below + mass {
            b = i;
            break;
        }
        if i + 1 < k {
            below += mass;
        }
    }
    let alpha = if q[b] > 0.0 {
        ((y - below) / q[b]).clamp(0.0, 1.0)
    } else {
        0.0
    };
    clamp_unit((b as f64 + alpha) / k as f64)
}

/// Forward warp of one dimension from raw logits; returns `(y, log pdf)`.
#[cfg(test)]
fn forward(raw: &[f64], x: f64, q: &mut [f64]) -> Result<(f64, f64)> {
    check_finite(raw, "piecewise-linear logits")?;
    softmax_into(raw, q);
    let (y, pdf) = pwl_warp(x, q);
    Ok((y, pdf.ln()))
}

/// Accumulates `d/d raw` of `gy * y + g_log_pdf * log pdf` into `raw_grad`
/// and returns the derivative with respect to `x`. `q` is the softmax of the
/// raw logits.
pub(super) fn backprop(q: &[f64], x: f64, gy: f64, g_log_pdf: f64, raw_grad: &mut [f64]) -> f64 {
    let k = q.len();
    let x = clamp_unit(x);
    let scaled = x * k as f64;
    let b = (scaled.floor() as usize).min(k - 1);
    let alpha = scaled - b as f64;
    // dy/dQ_j = 1 below the bin, alpha inside it; dlog pdf/dQ_b = 1/Q_b
    let dot_gq: f64 = gy * (q[..b].iter().sum::<f64>() + alpha * q[b]);
    for j in 0..k {
        let gq = if j < b {
            gy
        } else if j == b {
            gy * alpha
        } else {
            0.0
        };
        let softmax_part = q[j] * (gq - dot_gq);
        let log_part = g_log_pdf * (if j == b { 1.0 } else { 0.0 } - q[j]);
        raw_grad[j] += softmax_part + log_part;
    }
    gy * q[b] * k as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::FlowError;
    use ndarray::array;

    /// Midpoint-rule integral of the piecewise-constant density from 0 to `x`.
    fn quadrature_cdf(q: &[f64], x: f64) -> f64 {
        let h = 1e-6;
        let n = (x / h).round() as usize;
        (0..n)
            .map(|i| pwl_warp((i as f64 + 0.5) * h, q).1 * h)
            .sum()
    }

    #[test]
    fn softmax_rows() {
        let p = normalize_pwl(&Array2::zeros((2, 4))).unwrap();
        assert!(p.q.iter().all(|&v| (v - 0.25).abs() < 1e-15));
        let p = normalize_pwl(&array![[0.0, 3f64.ln()]]).unwrap();
        assert!((p.q[[0, 0]] - 0.25).abs() < 1e-15 && (p.q[[0, 1]] - 0.75).abs() < 1e-15);
        let shifted = normalize_pwl(&array![[7.0, 7.0 + 3f64.ln()]]).unwrap();
        assert!((shifted.q[[0, 1]] - 0.75).abs() < 1e-15);
        assert!(matches!(
            normalize_pwl(&array![[0.0, f64::NAN]]),
            Err(FlowError::Parameter(_))
        ));
    }

    #[test]
    fn uniform_masses_are_identity() {
        let q = [0.25; 4];
        for x in [0.0, 0.1, 0.5, 0.99] {
            let (y, pdf) = pwl_warp(x, &q);
            assert!((y - x).abs() < 1e-15);
            assert!((pdf - 1.0).abs() < 1e-15);
            assert!((pwl_unwarp(x, &q) - x).abs() < 1e-15);
        }
    }

    #[test]
    fn two_bin_values_match_quadrature() {
        let q = [0.25, 0.75];
        for (x, y_expected) in [(0.5, 0.25), (0.75, 0.625)] {
            let (y, pdf) = pwl_warp(x, &q);
            assert!((y - y_expected).abs() < 1e-12);
            assert!((quadrature_cdf(&q, x) - y).abs() < 1e-6);
            assert!((pdf - 1.5).abs() < 1e-12);
        }
        assert!((pwl_unwarp(0.625, &q) - 0.75).abs() < 1e-12);
    }

    #[test]
    fn bin_boundary_maps_to_left_closed_edge() {
        let q = [0.25, 0.75];
        assert_eq!(pwl_unwarp(0.25, &q), 0.5);
        let (y, _) = pwl_warp(0.5, &q);
        assert!((y - 0.25).abs() < 1e-12);
    }

    #[test]
    fn zero_mass_bin_uses_left_edge() {
        let q = [0.5, 0.0, 0.5];
        let x = pwl_unwarp(0.5, &q);
        assert!((x - 2.0 / 3.0).abs() < 1e-12);
        assert!((pwl_warp(x, &q).0 - 0.5).abs() < 1e-12);
    }

    #[test]
    fn backprop_matches_finite_differences() {
        let raw = [0.3, -1.2, 0.8, 0.1];
        let mut q = [0.0; 4];
        for x in [0.05, 0.3, 0.62, 0.9] {
            let (gy, gl) = (0.7, -1.3);
            let mut grad = [0.0; 4];
            softmax_into(&raw, &mut q);
            let gx = backprop(&q, x, gy, gl, &mut grad);
            let objective = |r: &[f64], x: f64| {
                let mut q = [0.0; 4];
                let (y, lp) = forward(r, x, &mut q).unwrap();
                gy * y + gl * lp
            };
            let h = 1e-6;
            for j in 0..4 {
                let mut up = raw;
                up[j] += h;
                let mut down = raw;
                down[j] -= h;
                let fd = (objective(&up, x) - objective(&down, x)) / (2.0 * h);
                assert!((fd - grad[j]).abs() < 1e-7, "raw {j}: {fd} vs {}", grad[j]);
            }
            let fd = (objective(&raw, x + h) - objective(&raw, x - h)) / (2.0 * h);
            assert!((fd - gx).abs() < 1e-7);
        }
    }
}

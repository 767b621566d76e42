//! Piecewise-quadratic warps: piecewise-linear densities over `K` bins of
//! learned width, defined by `K + 1` vertex heights.

use ndarray::Array2;

use super::{check_finite, clamp_unit, softmax_into};
use crate::error::{FlowError, Result};

/// Below this ratio of `|a| / b` the quadratic term is dropped when inverting.
const LINEAR_FALLBACK: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct PwqParams {
    /// Bin widths, `|B| x K`, rows sum to one.
    pub w: Array2<f64>,
    /// Vertex densities, `|B| x (K + 1)`, rows integrate to one.
    pub v: Array2<f64>,
}

/// Normalizes one row: `w = softmax(raw_w)`, `v = exp(raw_v) / trapezoid mass`.
pub(super) fn normalize_row(raw_w: &[f64], raw_v: &[f64], w: &mut [f64], v: &mut [f64]) {
    softmax_into(raw_w, w);
    let max = raw_v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    for (dst, &r) in v.iter_mut().zip(raw_v) {
        *dst = (r - max).exp();
    }
    let mass: f64 = w
        .iter()
        .enumerate()
        .map(|(k, wk)| 0.5 * (v[k] + v[k + 1]) * wk)
        .sum();
    for dst in v.iter_mut() {
        *dst /= mass;
    }
}

pub fn normalize_pwq(raw_w: &Array2<f64>, raw_v: &Array2<f64>) -> Result<PwqParams> {
    let (rows, k) = raw_w.dim();
    if raw_v.dim() != (rows, k + 1) {
        return Err(FlowError::Shape(format!(
            "vertex logits {:?} do not match width logits {:?}",
            raw_v.dim(),
            raw_w.dim()
        )));
    }
    let mut w = Array2::zeros((rows, k));
    let mut v = Array2::zeros((rows, k + 1));
    for r in 0..rows {
        let rw = raw_w.row(r).to_vec();
        let rv = raw_v.row(r).to_vec();
        check_finite(&rw, "bin width logits")?;
        check_finite(&rv, "vertex logits")?;
        let mut wr = vec![0.0; k];
        let mut vr = vec![0.0; k + 1];
        normalize_row(&rw, &rv, &mut wr, &mut vr);
        w.row_mut(r).assign(&ndarray::ArrayView1::from(&wr));
        v.row_mut(r).assign(&ndarray::ArrayView1::from(&vr));
    }
    Ok(PwqParams { w, v })
}

/// Bin containing `x`, offset of `x` into it and the mass of all bins below.
struct Located {
    bin: usize,
    offset: f64,
    mass_below: f64,
}

fn locate_x(x: f64, w: &[f64], v: &[f64]) -> Located {
    let k = w.len();
    let mut left = 0.0;
    let mut mass_below = 0.0;
    for b in 0..k {
        if x < left + w[b] || b + 1 == k {
            let offset = (x - left).clamp(0.0, w[b]);
            return Located {
                bin: b,
                offset,
                mass_below,
            };
        }
        left += w[b];
        mass_below += 0.5 * (v[b] + v[b + 1]) * w[b];
    }
    unreachable!("at least one bin")
}

/// Warps `x` through the piecewise-quadratic CDF. Returns `(y, pdf)`.
pub fn pwq_warp(x: f64, w: &[f64], v: &[f64]) -> (f64, f64) {
    let x = clamp_unit(x);
    let Located {
        bin: b,
        offset,
        mass_below,
    } = locate_x(x, w, v);
    let slope = (v[b + 1] - v[b]) / w[b];
    let pdf = v[b] + offset * slope;
    let y = mass_below + offset * v[b] + 0.5 * offset * offset * slope;
    (clamp_unit(y), pdf)
}

/// Inverse of [`pwq_warp`]: locates the bin by cumulative trapezoid mass and
/// solves the quadratic for the relative position inside it.
pub fn pwq_unwarp(y: f64, w: &[f64], v: &[f64]) -> f64 {
    let k = w.len();
    let y = clamp_unit(y);
    let mut left = 0.0;
    let mut mass_below = 0.0;
    let mut bin = k - 1;
    for b in 0..k {
        let mass = 0.5 * (v[b] + v[b + 1]) * w[b];
        if y < mass_below + mass || b + 1 == k {
            bin = b;
            break;
        }
        mass_below += mass;
        left += w[b];
    }
    let b = bin;
    let a = (v[b + 1] - v[b]) * w[b];
    let lin = v[b] * w[b];
    let c = (y - mass_below).max(0.0);
    let alpha = if a.abs() < LINEAR_FALLBACK * lin {
        c / lin
    } else {
        // 0.5 a t^2 + lin t - c = 0; the citardauq form avoids cancelling
        // -lin + sqrt(...) since lin >= 0.
        let disc = (lin * lin + 2.0 * a * c).max(0.0);
        let denom = lin + disc.sqrt();
        if denom > 0.0 {
            2.0 * c / denom
        } else {
            0.0
        }
    };
    clamp_unit(left + alpha.clamp(0.0, 1.0) * w[b])
}

/// Raw layout: `K` width logits followed by `K + 1` vertex logits.
pub(super) fn split(raw: &[f64]) -> (&[f64], &[f64]) {
    let k = (raw.len() - 1) / 2;
    raw.split_at(k)
}

#[cfg(test)]
fn forward(raw: &[f64], x: f64, w: &mut [f64], v: &mut [f64]) -> Result<(f64, f64)> {
    check_finite(raw, "piecewise-quadratic logits")?;
    let (rw, rv) = split(raw);
    normalize_row(rw, rv, w, v);
    let (y, pdf) = pwq_warp(x, w, v);
    Ok((y, pdf.ln()))
}

/// Accumulates `d/d raw` of `gy * y + g_log_pdf * log pdf` into `raw_grad`
/// and returns the derivative with respect to `x`. `w` and `v` are the
/// normalized parameters produced from `raw` by [`normalize_row`].
#[allow(clippy::too_many_arguments)]
pub(super) fn backprop(
    w: &[f64],
    v: &[f64],
    x: f64,
    gy: f64,
    g_log_pdf: f64,
    raw_grad: &mut [f64],
    gw: &mut [f64],
    gv: &mut [f64],
) -> f64 {
    let k = w.len();
    let x = clamp_unit(x);
    let Located {
        bin: b, offset: d, ..
    } = locate_x(x, w, v);
    let wb = w[b];
    let delta = v[b + 1] - v[b];
    let pdf = v[b] + d * delta / wb;
    let gp = g_log_pdf / pdf;

    gw.fill(0.0);
    gv.fill(0.0);
    // bins fully below x: y gains their trapezoid mass, and the offset d
    // shrinks as they widen
    for j in 0..b {
        gw[j] = gy * (0.5 * (v[j] + v[j + 1]) - pdf) - gp * delta / wb;
        gv[j] += gy * 0.5 * w[j];
        gv[j + 1] += gy * 0.5 * w[j];
    }
    gw[b] = -gy * 0.5 * d * d * delta / (wb * wb) - gp * d * delta / (wb * wb);
    gv[b] += gy * (d - 0.5 * d * d / wb) + gp * (1.0 - d / wb);
    gv[b + 1] += gy * 0.5 * d * d / wb + gp * d / wb;

    // through v = e / S with S = sum_k (e_k + e_{k+1}) / 2 * w_k
    let a: f64 = gv.iter().zip(v.iter()).map(|(g, vj)| g * vj).sum();
    let (graw_w, graw_v) = raw_grad.split_at_mut(k);
    for m in 0..=k {
        let w_left = if m > 0 { w[m - 1] } else { 0.0 };
        let w_right = if m < k { w[m] } else { 0.0 };
        graw_v[m] += v[m] * (gv[m] - a * 0.5 * (w_left + w_right));
    }
    for j in 0..k {
        gw[j] -= a * 0.5 * (v[j] + v[j + 1]);
    }
    let dot: f64 = gw.iter().zip(w.iter()).map(|(g, wj)| g * wj).sum();
    for j in 0..k {
        graw_w[j] += w[j] * (gw[j] - dot);
    }
    gy * pdf + gp * delta / wb
}

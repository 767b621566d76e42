//! One-blob encoding of unit-interval scalars.
//!
//! A Gaussian kernel with standard deviation `1/k` is placed at the scalar
//! and integrated exactly over each of `k` uniform bins. Mass falling
//! outside `[0, 1]` is dropped, not renormalized.

use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::error::{FlowError, Result};

const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Beyond this many standard deviations the normal tail mass is below 1e-16.
const TAIL_CUTOFF: f64 = 8.25;
const TABLE_STEP: f64 = 1.0 / 128.0;

/// Standard normal CDF.
pub(crate) fn normal_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z * std::f64::consts::FRAC_1_SQRT_2)
}

pub(crate) fn normal_pdf(z: f64) -> f64 {
    FRAC_1_SQRT_2PI * (-0.5 * z * z).exp()
}

/// Cubic Hermite table of the lower tail `Phi(z)` on `[-TAIL_CUTOFF, 0]`.
/// Interpolation error is below 1e-11; the encoding and its derivative both
/// use the interpolant, so they stay exactly consistent.
struct TailTable {
    /// Per interval `j`: value and scaled slope at both ends,
    /// `[Phi(z_j), h Phi'(z_j), Phi(z_j+1), h Phi'(z_j+1)]`.
    intervals: Vec<[f64; 4]>,
    last_value: f64,
    last_slope: f64,
}

fn tail_table() -> &'static TailTable {
    static TABLE: OnceLock<TailTable> = OnceLock::new();
    TABLE.get_or_init(|| {
        let n = (TAIL_CUTOFF / TABLE_STEP).round() as usize + 1;
        let z = |j: usize| -TAIL_CUTOFF + j as f64 * TABLE_STEP;
        let values: Vec<f64> = (0..n).map(|j| normal_cdf(z(j))).collect();
        let slopes: Vec<f64> = (0..n).map(|j| normal_pdf(z(j)) * TABLE_STEP).collect();
        TailTable {
            intervals: (0..n - 1)
                .map(|j| [values[j], slopes[j], values[j + 1], slopes[j + 1]])
                .collect(),
            last_value: values[n - 1],
            last_slope: slopes[n - 1] / TABLE_STEP,
        }
    })
}

/// `x.floor()` without a libm call on targets lacking a rounding instruction.
#[inline(always)]
fn floor(x: f64) -> f64 {
    let t = x as i64 as f64;
    if t > x {
        t - 1.0
    } else {
        t
    }
}

/// Hermite basis weights on `(p0, m0, p1, m1)` for the value and the slope.
struct Basis {
    value: [f64; 4],
    slope: [f64; 4],
}

impl Basis {
    fn new(u: f64) -> Self {
        let (u2, u3) = (u * u, u * u * u);
        Self {
            value: [
                2.0 * u3 - 3.0 * u2 + 1.0,
                u3 - 2.0 * u2 + u,
                3.0 * u2 - 2.0 * u3,
                u3 - u2,
            ],
            slope: [
                6.0 * u2 - 6.0 * u,
                3.0 * u2 - 4.0 * u + 1.0,
                6.0 * u - 6.0 * u2,
                3.0 * u2 - 2.0 * u,
            ],
        }
    }
}

impl TailTable {
    /// Interpolant value (`slope = false`) or slope on table interval `j`.
    #[inline(always)]
    fn at(&self, j: isize, weights: &[f64; 4], slope: bool) -> f64 {
        if j < 0 {
            return 0.0;
        }
        match self.intervals.get(j as usize) {
            Some(q) => {
                let v =
                    weights[0] * q[0] + weights[1] * q[1] + weights[2] * q[2] + weights[3] * q[3];
                if slope {
                    v / TABLE_STEP
                } else {
                    v
                }
            }
            None if slope => self.last_slope,
            None => self.last_value,
        }
    }

    /// Interpolation setup for the bin edges `z_i = i - s k`, `i = 0..=k`,
    /// in units of the kernel width.
    ///
    /// Edges are exactly a whole number of table steps apart, so all edges on
    /// one side of the kernel center share their interpolation weights.
    #[inline(always)]
    fn edges(&self, s: f64, k: usize, slope: bool) -> Edges<'_> {
        let steps = 1.0 / TABLE_STEP;
        let sk = s * k as f64;
        let below = (TAIL_CUTOFF - sk) * steps;
        let above = (TAIL_CUTOFF + sk) * steps;
        let (j_below, j_above) = (floor(below), floor(above));
        let pick = |b: Basis| if slope { b.slope } else { b.value };
        Edges {
            table: self,
            slope,
            j_below: j_below as isize,
            j_above: j_above as isize,
            w_below: pick(Basis::new(below - j_below)),
            w_above: pick(Basis::new(above - j_above)),
            split: (sk as usize + 1).min(k + 1),
        }
    }
}

/// Edges `0..split` lie at or below the kernel center.
struct Edges<'a> {
    table: &'a TailTable,
    slope: bool,
    j_below: isize,
    j_above: isize,
    w_below: [f64; 4],
    w_above: [f64; 4],
    split: usize,
}

impl Edges<'_> {
    const PER_EDGE: isize = (1.0 / TABLE_STEP) as isize;

    /// `Phi(-|z_i|)` (or its derivative) for an edge below the center.
    #[inline(always)]
    fn below(&self, i: usize) -> f64 {
        self.table.at(
            self.j_below + Self::PER_EDGE * i as isize,
            &self.w_below,
            self.slope,
        )
    }

    #[inline(always)]
    fn above(&self, i: usize) -> f64 {
        self.table.at(
            self.j_above - Self::PER_EDGE * i as isize,
            &self.w_above,
            self.slope,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "OneBlobRaw", into = "OneBlobRaw")]
pub struct OneBlobConfig {
    k: usize,
}

#[derive(Serialize, Deserialize)]
struct OneBlobRaw {
    k: usize,
}

impl TryFrom<OneBlobRaw> for OneBlobConfig {
    type Error = FlowError;
    fn try_from(raw: OneBlobRaw) -> Result<Self> {
        OneBlobConfig::new(raw.k)
    }
}

impl From<OneBlobConfig> for OneBlobRaw {
    fn from(cfg: OneBlobConfig) -> Self {
        OneBlobRaw { k: cfg.k }
    }
}

impl Default for OneBlobConfig {
    fn default() -> Self {
        Self { k: 32 }
    }
}

impl OneBlobConfig {
    pub fn new(k: usize) -> Result<Self> {
        if k < 2 {
            return Err(FlowError::InvalidConfig(format!(
                "one-blob encoding needs k >= 2, got {k}"
            )));
        }
        Ok(Self { k })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn sigma(&self) -> f64 {
        1.0 / self.k as f64
    }

    fn check(s: f64) -> Result<()> {
        if (0.0..=1.0).contains(&s) {
            Ok(())
        } else {
            Err(FlowError::Domain(format!(
                "one-blob input {s} outside [0, 1]"
            )))
        }
    }

    /// Writes the encoding of `s` into `out` (length `k`). `s` must already be
    /// in `[0, 1]`.
    pub fn encode_into(&self, s: f64, out: &mut [f64]) {
        // each entry is Phi(upper) - Phi(lower), written with the tail mass
        // beyond each edge taken on its own side for accuracy
        let k = self.k;
        let e = tail_table().edges(s, k, false);
        let split = e.split;
        let mut prev = e.below(0);
        for (i, o) in out[..split - 1].iter_mut().enumerate() {
            let next = e.below(i + 1);
            *o = next - prev;
            prev = next;
        }
        if split <= k {
            let mut prev = e.above(split);
            out[split - 1] = 1.0 - e.below(split - 1) - prev;
            for (i, o) in out[split..k].iter_mut().enumerate() {
                let next = e.above(split + i + 1);
                *o = prev - next;
                prev = next;
            }
        }
    }

    /// Derivative of every entry with respect to `s`.
    pub fn derivative_into(&self, s: f64, out: &mut [f64]) {
        let k = self.k;
        let e = tail_table().edges(s, k, true);
        let scale = k as f64;
        let split = e.split;
        let mut prev = e.below(0);
        for (i, o) in out[..split - 1].iter_mut().enumerate() {
            let next = e.below(i + 1);
            *o = (prev - next) * scale;
            prev = next;
        }
        for (i, o) in out[split - 1..k].iter_mut().enumerate() {
            let next = e.above(split + i);
            *o = (prev - next) * scale;
            prev = next;
        }
    }
}

pub fn one_blob_scalar(s: f64, cfg: &OneBlobConfig) -> Result<Vec<f64>> {
    OneBlobConfig::check(s)?;
    let mut out = vec![0.0; cfg.k];
    cfg.encode_into(s, &mut out);
    Ok(out)
}

pub fn encode_features(values: &[f64], cfg: &OneBlobConfig) -> Result<Vec<f64>> {
    let mut out = vec![0.0; values.len() * cfg.k];
    for (i, (&v, block)) in values.iter().zip(out.chunks_exact_mut(cfg.k)).enumerate() {
        OneBlobConfig::check(v)
            .map_err(|_| FlowError::Domain(format!("feature {i} = {v} outside [0, 1]")))?;
        cfg.encode_into(v, block);
    }
    Ok(out)
}

/// How coupling networks see their inputs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum InputEncoding {
    OneBlob(OneBlobConfig),
    /// Values fed to the network unchanged.
    Scalar,
}

impl Default for InputEncoding {
    fn default() -> Self {
        InputEncoding::OneBlob(OneBlobConfig::default())
    }
}

impl InputEncoding {
    pub fn width_per_value(&self) -> usize {
        match self {
            InputEncoding::OneBlob(cfg) => cfg.k,
            InputEncoding::Scalar => 1,
        }
    }

    pub fn encode_into(&self, s: f64, out: &mut [f64]) {
        match self {
            InputEncoding::OneBlob(cfg) => cfg.encode_into(s, out),
            InputEncoding::Scalar => out[0] = s,
        }
    }

    /// Chain rule: gradient with respect to `s` given the gradient with
    /// respect to its encoded block.
    pub fn backprop(&self, s: f64, block_grad: &[f64], scratch: &mut [f64]) -> f64 {
        match self {
            InputEncoding::OneBlob(cfg) => {
                cfg.derivative_into(s, scratch);
                scratch.iter().zip(block_grad).map(|(d, g)| d * g).sum()
            }
            InputEncoding::Scalar => block_grad[0],
        }
    }
}

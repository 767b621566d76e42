use ndarray::{Array2, ArrayView2};
use rand::Rng;

use super::image::ImageTarget;
use crate::error::{FlowError, Result};
use crate::flow::NormalizingFlow;
use crate::rng::{stream_rng, Stream};
use crate::training::{mean_variance, quantile, Integrand};

pub const MAPE_EPSILON: f64 = 0.01;

const CHUNK: usize = 8192;

/// Mean absolute percentage error `|v - ref| / (ref + 0.01)` over all cells.
pub fn mape(rendered: ArrayView2<'_, f64>, reference: ArrayView2<'_, f64>) -> Result<f64> {
    if rendered.dim() != reference.dim() {
        return Err(FlowError::Shape(format!(
            "grids {:?} and {:?} differ",
            rendered.dim(),
            reference.dim()
        )));
    }
    if rendered.is_empty() {
        return Err(FlowError::Empty("grid".into()));
    }
    let total: f64 = rendered
        .iter()
        .zip(reference)
        .map(|(v, r)| (v - r).abs() / (r + MAPE_EPSILON))
        .sum();
    Ok(total / rendered.len() as f64)
}

/// Wraps a per-point closure as an [`Integrand`].
pub struct FnIntegrand<F> {
    dim: usize,
    f: F,
}

impl<F: FnMut(&[f64]) -> f64> FnIntegrand<F> {
    pub fn new(dim: usize, f: F) -> Self {
        Self { dim, f }
    }
}

impl<F: FnMut(&[f64]) -> f64> Integrand for FnIntegrand<F> {
    fn dim(&self) -> usize {
        self.dim
    }

    fn evaluate(&mut self, x: ArrayView2<'_, f64>) -> Result<Vec<f64>> {
        let mut row = vec![0.0; self.dim];
        Ok(x.rows()
            .into_iter()
            .map(|r| {
                row.iter_mut().zip(r).for_each(|(o, v)| *o = *v);
                (self.f)(&row)
            })
            .collect())
    }
}

/// Statistics of the importance weights `f(X) / q(X)` with `X ~ q`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EstimatorStats {
    pub samples: usize,
    pub mean: f64,
    /// Unbiased sample variance of a single weight.
    pub variance: f64,
    pub weight_p99: f64,
    pub weight_p9999: f64,
}

impl EstimatorStats {
    pub fn from_weights(weights: &[f64]) -> Self {
        let (mean, variance) = mean_variance(weights);
        Self {
            samples: weights.len(),
            mean,
            variance,
            weight_p99: quantile(weights, 0.99),
            weight_p9999: quantile(weights, 0.9999),
        }
    }
}

/// Importance sampling statistics of `target` under the flow, drawing `n`
/// samples from the evaluation stream of `seed`.
pub fn estimator_variance<I: Integrand>(
    flow: &NormalizingFlow,
    conditioning: &[f64],
    target: &mut I,
    n: usize,
    seed: u64,
) -> Result<EstimatorStats> {
    if n < 2 {
        return Err(FlowError::InvalidConfig(
            "estimator variance needs at least 2 samples".into(),
        ));
    }
    if target.dim() != flow.dim() {
        return Err(FlowError::Shape("target and flow dimensions differ".into()));
    }
    let mut rng = stream_rng(seed, Stream::Eval);
    let d = flow.dim();
    let mut weights = Vec::with_capacity(n);
    while weights.len() < n {
        let m = (n - weights.len()).min(CHUNK);
        let u = Array2::from_shape_simple_fn((m, d), || rng.random::<f64>());
        let cond = Array2::from_shape_fn((m, conditioning.len()), |(_, j)| conditioning[j]);
        let (x, log_q) = flow.sample_batch(u.view(), cond.view())?;
        let f = target.evaluate(x.view())?;
        weights.extend(f.iter().zip(&log_q).map(|(f, lq)| f / lq.exp()));
    }
    Ok(EstimatorStats::from_weights(&weights))
}

/// Flow density at the cell midpoints of a `resolution`-square grid over a
/// 2D flow. Row `r` holds `x[1] = (r + 0.5) / resolution`.
pub fn density_grid(
    flow: &NormalizingFlow,
    resolution: usize,
    conditioning: &[f64],
) -> Result<Array2<f64>> {
    if resolution < 2 {
        return Err(FlowError::InvalidConfig(
            "density grid resolution must be at least 2".into(),
        ));
    }
    if flow.dim() != 2 {
        return Err(FlowError::Shape(format!(
            "density grids need a 2D flow, got {}D",
            flow.dim()
        )));
    }
    let n = resolution * resolution;
    let h = 1.0 / resolution as f64;
    let mut out = Vec::with_capacity(n);
    let mut start = 0;
    while start < n {
        let m = (n - start).min(CHUNK);
        let x = Array2::from_shape_fn((m, 2), |(i, j)| {
            let cell = start + i;
            let idx = if j == 0 {
                cell % resolution
            } else {
                cell / resolution
            };
            (idx as f64 + 0.5) * h
        });
        let cond = Array2::from_shape_fn((m, conditioning.len()), |(_, j)| conditioning[j]);
        out.extend(
            flow.log_pdf_batch(x.view(), cond.view())?
                .into_iter()
                .map(f64::exp),
        );
        start += m;
    }
    Ok(Array2::from_shape_vec((resolution, resolution), out).expect("grid shape"))
}

fn reference_grid(target: &ImageTarget, resolution: usize) -> Result<Array2<f64>> {
    let h = 1.0 / resolution as f64;
    let norm = target.integral();
    let mut grid = Array2::zeros((resolution, resolution));
    for ((r, c), v) in grid.indexed_iter_mut() {
        *v = target.eval(&[(c as f64 + 0.5) * h, (r as f64 + 0.5) * h])? / norm;
    }
    Ok(grid)
}

fn grid_cross_entropy(reference: &Array2<f64>, density: &Array2<f64>) -> f64 {
    let total: f64 = reference
        .iter()
        .zip(density)
        .filter(|(p, _)| **p > 0.0)
        .map(|(p, q)| -p * q.ln())
        .sum();
    total / reference.len() as f64
}

/// Cross-entropy `-int p log q` of the flow against the normalized image,
/// by midpoint quadrature on a `resolution`-square grid.
pub fn cross_entropy(
    flow: &NormalizingFlow,
    target: &ImageTarget,
    resolution: usize,
) -> Result<f64> {
    let density = density_grid(flow, resolution, &[])?;
    Ok(grid_cross_entropy(
        &reference_grid(target, resolution)?,
        &density,
    ))
}

/// Everything reported for a 2D image benchmark run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricSet {
    pub mape: f64,
    pub cross_entropy: f64,
    pub estimator: EstimatorStats,
}

impl MetricSet {
    /// Grid metrics on a `resolution`-square grid plus estimator statistics
    /// from `samples` flow samples.
    pub fn image(
        flow: &NormalizingFlow,
        target: &ImageTarget,
        resolution: usize,
        samples: usize,
        seed: u64,
    ) -> Result<Self> {
        let density = density_grid(flow, resolution, &[])?;
        let reference = reference_grid(target, resolution)?;
        Ok(Self {
            mape: mape(density.view(), reference.view())?,
            cross_entropy: grid_cross_entropy(&reference, &density),
            estimator: estimator_variance(flow, &[], &mut target.clone(), samples, seed)?,
        })
    }
}

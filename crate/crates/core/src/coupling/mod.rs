//! Coupling layers and their invertible per-dimension transforms.
//!
//! A coupling layer leaves the dimensions in partition A untouched and warps
//! every dimension in partition B with a separable transform whose parameters
//! are predicted by a network from A (plus optional conditioning features).
//! The Jacobian is triangular, so the layer's log-determinant is the sum of
//! the per-dimension log densities.

pub mod affine;
pub mod piecewise_linear;
pub mod piecewise_quadratic;

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoding::InputEncoding;
use crate::error::{FlowError, Result};
use crate::nnet::{ForwardCache, GradientSet, Mlp, NetShape};

pub use affine::{affine_warp, AffineParams, AffineWarp, Direction};
pub use piecewise_linear::{normalize_pwl, pwl_unwarp, pwl_warp, PwlParams};
pub use piecewise_quadratic::{normalize_pwq, pwq_unwarp, pwq_warp, PwqParams};

/// Largest value a warped coordinate may take; bins are half-open.
pub const UNIT_MAX: f64 = 1.0 - 1.0 / (1u64 << 40) as f64;

pub(crate) fn clamp_unit(x: f64) -> f64 {
    x.clamp(0.0, UNIT_MAX)
}

pub(crate) fn check_finite(raw: &[f64], what: &str) -> Result<()> {
    if raw.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(FlowError::Parameter(what.to_string()))
    }
}

/// Max-shifted softmax of `raw` into `out`.
pub(crate) fn softmax_into(raw: &[f64], out: &mut [f64]) {
    let max = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &r) in out.iter_mut().zip(raw) {
        *o = (r - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum TransformKind {
    /// Translation in logit space.
    Additive,
    /// Scale and translation in logit space.
    Affine,
    PiecewiseLinear {
        bins: usize,
    },
    PiecewiseQuadratic {
        bins: usize,
    },
}

impl TransformKind {
    /// Raw network outputs needed per warped dimension.
    pub fn raw_width(&self) -> usize {
        match *self {
            TransformKind::Additive => 1,
            TransformKind::Affine => 2,
            TransformKind::PiecewiseLinear { bins } => bins,
            TransformKind::PiecewiseQuadratic { bins } => 2 * bins + 1,
        }
    }

    pub fn bins(&self) -> usize {
        match *self {
            TransformKind::PiecewiseLinear { bins }
            | TransformKind::PiecewiseQuadratic { bins } => bins,
            _ => 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            TransformKind::PiecewiseLinear { bins }
            | TransformKind::PiecewiseQuadratic { bins }
                if bins == 0 =>
            {
                Err(FlowError::InvalidConfig(
                    "piecewise transforms need at least one bin".into(),
                ))
            }
            _ => Ok(()),
        }
    }

    pub fn code(&self) -> f64 {
        match self {
            TransformKind::Additive => 0.0,
            TransformKind::Affine => 1.0,
            TransformKind::PiecewiseLinear { .. } => 2.0,
            TransformKind::PiecewiseQuadratic { .. } => 3.0,
        }
    }

    pub fn from_code(code: f64, bins: usize) -> Result<Self> {
        match code as i64 {
            0 => Ok(TransformKind::Additive),
            1 => Ok(TransformKind::Affine),
            2 => Ok(TransformKind::PiecewiseLinear { bins }),
            3 => Ok(TransformKind::PiecewiseQuadratic { bins }),
            _ => Err(FlowError::Format(format!("unknown transform code {code}"))),
        }
    }
}

/// Turns the raw network outputs for one dimension into transform parameters:
/// bin masses, widths followed by vertex densities, or `(s, t)`.
fn normalize_dim(kind: TransformKind, raw: &[f64], out: &mut [f64]) -> Result<()> {
    match kind {
        TransformKind::PiecewiseLinear { .. } => {
            check_finite(raw, "piecewise-linear logits")?;
            softmax_into(raw, out);
        }
        TransformKind::PiecewiseQuadratic { bins } => {
            check_finite(raw, "piecewise-quadratic logits")?;
            let (rw, rv) = piecewise_quadratic::split(raw);
            let (w, v) = out.split_at_mut(bins);
            piecewise_quadratic::normalize_row(rw, rv, w, v);
        }
        TransformKind::Additive | TransformKind::Affine => {
            check_finite(raw, "affine parameters")?;
            out.copy_from_slice(raw);
        }
    }
    Ok(())
}

fn affine_params(kind: TransformKind, p: &[f64]) -> (f64, f64) {
    match kind {
        TransformKind::Additive => (0.0, p[0]),
        _ => (p[0], p[1]),
    }
}

/// Warps one dimension; returns `(y, log pdf, clamped)`.
fn warp_dim(kind: TransformKind, p: &[f64], x: f64) -> (f64, f64, bool) {
    match kind {
        TransformKind::PiecewiseLinear { .. } => {
            let (y, pdf) = pwl_warp(x, p);
            (y, pdf.ln(), false)
        }
        TransformKind::PiecewiseQuadratic { bins } => {
            let (w, v) = p.split_at(bins);
            let (y, pdf) = pwq_warp(x, w, v);
            (y, pdf.ln(), false)
        }
        TransformKind::Additive | TransformKind::Affine => {
            let (s, t) = affine_params(kind, p);
            let w = affine_warp(x, s, t, Direction::Forward);
            (w.y, w.log_det, w.clamped)
        }
    }
}

/// Inverts one dimension; returns `(x, log pdf of the forward warp at x, clamped)`.
fn unwarp_dim(kind: TransformKind, p: &[f64], y: f64) -> Result<(f64, f64, bool)> {
    let (x, pdf) = match kind {
        TransformKind::PiecewiseLinear { .. } => {
            let x = pwl_unwarp(y, p);
            (x, pwl_warp(x, p).1)
        }
        TransformKind::PiecewiseQuadratic { bins } => {
            let (w, v) = p.split_at(bins);
            let x = pwq_unwarp(y, w, v);
            (x, pwq_warp(x, w, v).1)
        }
        TransformKind::Additive | TransformKind::Affine => {
            let (s, t) = affine_params(kind, p);
            let w = affine_warp(y, s, t, Direction::Inverse);
            return Ok((w.y, w.log_det, w.clamped));
        }
    };
    if pdf <= 0.0 {
        return Err(FlowError::DegenerateDensity(format!(
            "inverse of {y} landed on zero density"
        )));
    }
    Ok((x, pdf.ln(), false))
}

#[allow(clippy::too_many_arguments)]
fn backprop_dim(
    kind: TransformKind,
    p: &[f64],
    x: f64,
    gy: f64,
    g_log_pdf: f64,
    raw_grad: &mut [f64],
    gw: &mut [f64],
    gv: &mut [f64],
) -> f64 {
    match kind {
        TransformKind::PiecewiseLinear { .. } => {
            piecewise_linear::backprop(p, x, gy, g_log_pdf, raw_grad)
        }
        TransformKind::PiecewiseQuadratic { bins } => {
            let (w, v) = p.split_at(bins);
            piecewise_quadratic::backprop(
                w,
                v,
                x,
                gy,
                g_log_pdf,
                raw_grad,
                &mut gw[..bins],
                &mut gv[..bins + 1],
            )
        }
        TransformKind::Additive => {
            affine::backprop(x, 0.0, p[0], gy, g_log_pdf, None, &mut raw_grad[0])
        }
        TransformKind::Affine => {
            let (gs, gt) = raw_grad.split_at_mut(1);
            affine::backprop(x, p[0], p[1], gy, g_log_pdf, Some(&mut gs[0]), &mut gt[0])
        }
    }
}

/// Everything the backward pass needs from a forward pass through a layer.
#[derive(Debug, Clone)]
pub struct LayerTape {
    input: Array2<f64>,
    params: Array2<f64>,
    cache: ForwardCache,
}

/// Result of pushing a batch through a layer.
#[derive(Debug, Clone)]
pub struct LayerOutput {
    pub values: Array2<f64>,
    pub log_det: Vec<f64>,
    /// Affine inputs that had to be clamped away from the domain edges.
    pub clamped: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CouplingLayer {
    dim: usize,
    mask_a: Vec<usize>,
    mask_b: Vec<usize>,
    kind: TransformKind,
    encoding: InputEncoding,
    conditioning_dim: usize,
    net: Mlp,
}

impl CouplingLayer {
    /// Layer with a freshly initialized U-shaped parameter network.
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        dim: usize,
        mask_a: Vec<usize>,
        mask_b: Vec<usize>,
        kind: TransformKind,
        encoding: InputEncoding,
        conditioning_dim: usize,
        shape: NetShape,
        rng: &mut R,
    ) -> Result<Self> {
        let input = (mask_a.len() + conditioning_dim) * encoding.width_per_value();
        let net = Mlp::u_net(input, mask_b.len() * kind.raw_width(), shape, rng)?;
        Self::with_net(dim, mask_a, mask_b, kind, encoding, conditioning_dim, net)
    }

    pub fn with_net(
        dim: usize,
        mask_a: Vec<usize>,
        mask_b: Vec<usize>,
        kind: TransformKind,
        encoding: InputEncoding,
        conditioning_dim: usize,
        net: Mlp,
    ) -> Result<Self> {
        kind.validate()?;
        let mut seen = vec![false; dim];
        for &i in mask_a.iter().chain(&mask_b) {
            if i >= dim || seen[i] {
                return Err(FlowError::InvalidConfig(format!(
                    "partitions {mask_a:?} / {mask_b:?} are not disjoint subsets of 0..{dim}"
                )));
            }
            seen[i] = true;
        }
        if seen.iter().any(|s| !s) || mask_b.is_empty() {
            return Err(FlowError::InvalidConfig(format!(
                "partitions {mask_a:?} / {mask_b:?} must cover 0..{dim} with a non-empty B"
            )));
        }
        let input = (mask_a.len() + conditioning_dim) * encoding.width_per_value();
        if net.input_width() != input || net.output_width() != mask_b.len() * kind.raw_width() {
            return Err(FlowError::Shape(format!(
                "network maps {} -> {}, layer needs {} -> {}",
                net.input_width(),
                net.output_width(),
                input,
                mask_b.len() * kind.raw_width()
            )));
        }
        Ok(Self {
            dim,
            mask_a,
            mask_b,
            kind,
            encoding,
            conditioning_dim,
            net,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn mask_a(&self) -> &[usize] {
        &self.mask_a
    }

    pub fn mask_b(&self) -> &[usize] {
        &self.mask_b
    }

    pub fn kind(&self) -> TransformKind {
        self.kind
    }

    pub fn encoding(&self) -> InputEncoding {
        self.encoding
    }

    pub fn conditioning_dim(&self) -> usize {
        self.conditioning_dim
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut Mlp {
        &mut self.net
    }

    fn check_batch(&self, x: &ArrayView2<'_, f64>, cond: &ArrayView2<'_, f64>) -> Result<()> {
        if x.ncols() != self.dim
            || cond.ncols() != self.conditioning_dim
            || cond.nrows() != x.nrows()
        {
            return Err(FlowError::Shape(format!(
                "layer expects ({}, {}) columns, got points {:?} and conditioning {:?}",
                self.dim,
                self.conditioning_dim,
                x.dim(),
                cond.dim()
            )));
        }
        Ok(())
    }

    /// Network input: encoded `x^A` followed by the encoded conditioning.
    fn encode(&self, x: &ArrayView2<'_, f64>, cond: &ArrayView2<'_, f64>) -> Array2<f64> {
        let per = self.encoding.width_per_value();
        let width = (self.mask_a.len() + self.conditioning_dim) * per;
        let mut out = Array2::zeros((x.nrows(), width));
        for ((xr, cr), mut row) in x.rows().into_iter().zip(cond.rows()).zip(out.rows_mut()) {
            let row = row.as_slice_mut().expect("contiguous");
            let values = self.mask_a.iter().map(|&i| xr[i]).chain(cr.iter().copied());
            for (v, block) in values.zip(row.chunks_exact_mut(per)) {
                self.encoding.encode_into(v, block);
            }
        }
        out
    }

    /// Warps the B coordinates of every row. `raw` is overwritten with the
    /// normalized transform parameters.
    fn warp_rows(
        &self,
        x: &ArrayView2<'_, f64>,
        raw: &mut Array2<f64>,
        inverse: bool,
    ) -> Result<LayerOutput> {
        let rw = self.kind.raw_width();
        let mut values = x.as_standard_layout().into_owned();
        let mut log_det = vec![0.0; x.nrows()];
        let mut clamped = 0;
        let mut p = vec![0.0; rw];
        for ((mut row, mut raw_row), ld) in values
            .rows_mut()
            .into_iter()
            .zip(raw.rows_mut())
            .zip(&mut log_det)
        {
            let row = row.as_slice_mut().expect("contiguous");
            let raw_row = raw_row.as_slice_mut().expect("contiguous");
            for (&dim, params) in self.mask_b.iter().zip(raw_row.chunks_exact_mut(rw)) {
                normalize_dim(self.kind, params, &mut p)?;
                params.copy_from_slice(&p);
                let (v, lp, c) = if inverse {
                    unwarp_dim(self.kind, params, row[dim])?
                } else {
                    warp_dim(self.kind, params, row[dim])
                };
                row[dim] = v;
                *ld += lp;
                clamped += usize::from(c);
            }
        }
        Ok(LayerOutput {
            values,
            log_det,
            clamped,
        })
    }

    pub fn forward(
        &self,
        x: ArrayView2<'_, f64>,
        cond: ArrayView2<'_, f64>,
    ) -> Result<LayerOutput> {
        self.check_batch(&x, &cond)?;
        let mut raw = self.net.predict(self.encode(&x, &cond).view())?;
        self.warp_rows(&x, &mut raw, false)
    }

    /// Forward pass that also records what [`CouplingLayer::backward`] needs.
    pub fn forward_tape(
        &self,
        x: ArrayView2<'_, f64>,
        cond: ArrayView2<'_, f64>,
    ) -> Result<(LayerOutput, LayerTape)> {
        self.check_batch(&x, &cond)?;
        let (mut params, cache) = self.net.forward(self.encode(&x, &cond).view())?;
        let out = self.warp_rows(&x, &mut params, false)?;
        Ok((
            out,
            LayerTape {
                input: x.to_owned(),
                params,
                cache,
            },
        ))
    }

    /// Inverse pass; `log_det` is that of the forward map at the returned points.
    pub fn inverse(
        &self,
        y: ArrayView2<'_, f64>,
        cond: ArrayView2<'_, f64>,
    ) -> Result<LayerOutput> {
        self.check_batch(&y, &cond)?;
        // A is untouched, so the network sees exactly what it saw going forward.
        let mut raw = self.net.predict(self.encode(&y, &cond).view())?;
        self.warp_rows(&y, &mut raw, true)
    }

    /// Backpropagates through the layer. On entry `grad` holds the loss
    /// gradient with respect to the layer output; on return it holds the
    /// gradient with respect to the layer input, unless `need_input` is false
    /// in which case the A columns are left without the network's contribution.
    /// `g_log_det[r]` is the loss gradient with respect to row `r`'s log-determinant.
    pub fn backward(
        &self,
        tape: &LayerTape,
        grad: &mut Array2<f64>,
        g_log_det: &[f64],
        need_input: bool,
    ) -> Result<GradientSet> {
        let n = tape.input.nrows();
        if grad.dim() != (n, self.dim) || g_log_det.len() != n || !grad.is_standard_layout() {
            return Err(FlowError::Shape(
                "gradient does not match the recorded batch".into(),
            ));
        }
        let rw = self.kind.raw_width();
        let bins = self.kind.bins();
        let mut raw_grad = Array2::zeros(tape.params.raw_dim());
        let (mut gw, mut gv) = (vec![0.0; bins], vec![0.0; bins + 1]);
        for ((((params, mut rg), x), mut g), &gl) in tape
            .params
            .rows()
            .into_iter()
            .zip(raw_grad.rows_mut())
            .zip(tape.input.rows())
            .zip(grad.rows_mut())
            .zip(g_log_det)
        {
            let params = params.as_slice().expect("contiguous");
            let rg = rg.as_slice_mut().expect("contiguous");
            let g = g.as_slice_mut().expect("contiguous");
            for ((&dim, p), rg) in self
                .mask_b
                .iter()
                .zip(params.chunks_exact(rw))
                .zip(rg.chunks_exact_mut(rw))
            {
                g[dim] = backprop_dim(self.kind, p, x[dim], g[dim], gl, rg, &mut gw, &mut gv);
            }
        }
        if self.mask_a.is_empty() && self.conditioning_dim == 0 || !need_input {
            return self.net.backward(&tape.cache, raw_grad.view());
        }
        let (grads, input_grad) = self.net.backward_with_input(&tape.cache, raw_grad.view())?;
        let per = self.encoding.width_per_value();
        let mut scratch = vec![0.0; per];
        for ((g_in, x), mut g) in input_grad
            .rows()
            .into_iter()
            .zip(tape.input.rows())
            .zip(grad.rows_mut())
        {
            let g_in = g_in.as_slice().expect("contiguous");
            for (&dim, block) in self.mask_a.iter().zip(g_in.chunks_exact(per)) {
                g[dim] += self.encoding.backprop(x[dim], block, &mut scratch);
            }
        }
        Ok(grads)
    }
}

/// Single-point forward warp through a layer: `(y, log_det)`.
pub fn coupling_forward(layer: &CouplingLayer, x: &[f64], cond: &[f64]) -> Result<(Vec<f64>, f64)> {
    let out = layer.forward(row(x)?.view(), row(cond)?.view())?;
    Ok((out.values.row(0).to_vec(), out.log_det[0]))
}

/// Single-point inverse through a layer: `(x, log_det)` where `log_det` is the
/// negated forward log-determinant, i.e. the log density change of the inverse map.
pub fn coupling_inverse(layer: &CouplingLayer, y: &[f64], cond: &[f64]) -> Result<(Vec<f64>, f64)> {
    let out = layer.inverse(row(y)?.view(), row(cond)?.view())?;
    Ok((out.values.row(0).to_vec(), -out.log_det[0]))
}

fn row(v: &[f64]) -> Result<Array2<f64>> {
    Array2::from_shape_vec((1, v.len()), v.to_vec()).map_err(|e| FlowError::Shape(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoding::OneBlobConfig;
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const KINDS: [TransformKind; 6] = [
        TransformKind::Additive,
        TransformKind::Affine,
        TransformKind::PiecewiseLinear { bins: 2 },
        TransformKind::PiecewiseLinear { bins: 32 },
        TransformKind::PiecewiseQuadratic { bins: 2 },
        TransformKind::PiecewiseQuadratic { bins: 32 },
    ];

    fn small_shape() -> NetShape {
        NetShape {
            outer_width: 8,
            levels: 2,
            skips: true,
        }
    }

    /// Layer with non-trivial random weights everywhere, including the output layer.
    fn layer(kind: TransformKind, cond: usize, seed: u64) -> CouplingLayer {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let enc = InputEncoding::OneBlob(OneBlobConfig::new(4).unwrap());
        let mut l = CouplingLayer::new(
            4,
            vec![0, 2],
            vec![1, 3],
            kind,
            enc,
            cond,
            small_shape(),
            &mut rng,
        )
        .unwrap();
        for p in l.net_mut().parameters_mut() {
            *p += rng.random_range(-0.5..0.5);
        }
        l
    }

    fn random_points(n: usize, d: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((n, d), |_| rng.random_range(0.02..0.98))
    }

    #[test]
    fn fresh_layer_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for kind in KINDS {
            let l = CouplingLayer::new(
                3,
                vec![0],
                vec![1, 2],
                kind,
                InputEncoding::default(),
                0,
                small_shape(),
                &mut rng,
            )
            .unwrap();
            let x = random_points(16, 3, 2);
            let out = l.forward(x.view(), Array2::zeros((16, 0)).view()).unwrap();
            for (a, b) in out.values.iter().zip(&x) {
                assert!((a - b).abs() < 1e-12, "{kind:?}");
            }
            assert!(out.log_det.iter().all(|v| v.abs() < 1e-12));
        }
    }

    #[test]
    fn rejects_bad_partitions() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let enc = InputEncoding::Scalar;
        let k = TransformKind::Affine;
        assert!(
            CouplingLayer::new(3, vec![0], vec![1], k, enc, 0, small_shape(), &mut rng).is_err()
        );
        assert!(
            CouplingLayer::new(2, vec![0, 1], vec![1], k, enc, 0, small_shape(), &mut rng).is_err()
        );
        assert!(
            CouplingLayer::new(2, vec![0, 1], vec![], k, enc, 0, small_shape(), &mut rng).is_err()
        );
        let bad = TransformKind::PiecewiseLinear { bins: 0 };
        assert!(
            CouplingLayer::new(2, vec![0], vec![1], bad, enc, 0, small_shape(), &mut rng).is_err()
        );
    }

    #[test]
    fn round_trip_all_kinds() {
        for (i, kind) in KINDS.into_iter().enumerate() {
            let l = layer(kind, 1, 10 + i as u64);
            let x = random_points(500, 4, 3);
            let c = random_points(500, 1, 4);
            let f = l.forward(x.view(), c.view()).unwrap();
            let b = l.inverse(f.values.view(), c.view()).unwrap();
            for (r, (a, e)) in b.values.iter().zip(&x).enumerate() {
                assert!((a - e).abs() < 1e-9, "{kind:?} entry {r}: {a} vs {e}");
            }
            for (p, q) in f.log_det.iter().zip(&b.log_det) {
                assert!((p - q).abs() < 1e-8, "{kind:?}");
            }
            for (i, x_row) in x.rows().into_iter().enumerate().take(5) {
                let (y, ld) =
                    coupling_forward(&l, x_row.as_slice().unwrap(), &[c[[i, 0]]]).unwrap();
                let (back, inv_ld) = coupling_inverse(&l, &y, &[c[[i, 0]]]).unwrap();
                assert!((ld + inv_ld).abs() < 1e-8);
                assert!(back.iter().zip(x_row).all(|(a, b)| (a - b).abs() < 1e-9));
            }
        }
    }

    #[test]
    fn log_det_matches_numerical_jacobian() {
        for (i, kind) in KINDS.into_iter().enumerate() {
            let l = layer(kind, 0, 20 + i as u64);
            let x = random_points(6, 4, 5);
            for row in x.rows() {
                let p = row.to_vec();
                let (_, ld) = coupling_forward(&l, &p, &[]).unwrap();
                let h = 1e-6;
                let mut jac = [[0.0; 4]; 4];
                for j in 0..4 {
                    let mut up = p.clone();
                    up[j] += h;
                    let mut down = p.clone();
                    down[j] -= h;
                    let (yu, _) = coupling_forward(&l, &up, &[]).unwrap();
                    let (yd, _) = coupling_forward(&l, &down, &[]).unwrap();
                    for r in 0..4 {
                        jac[r][j] = (yu[r] - yd[r]) / (2.0 * h);
                    }
                }
                let m = determinant(jac);
                assert!((m.ln() - ld).abs() < 1e-4, "{kind:?}: {} vs {ld}", m.ln());
            }
        }
    }

    /// Determinant of a 4x4 matrix by Gaussian elimination with partial pivoting.
    fn determinant(mut a: [[f64; 4]; 4]) -> f64 {
        let mut det = 1.0;
        for c in 0..4 {
            let p = (c..4)
                .max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs()))
                .unwrap();
            if p != c {
                a.swap(p, c);
                det = -det;
            }
            det *= a[c][c];
            for r in c + 1..4 {
                let f = a[r][c] / a[c][c];
                for k in c..4 {
                    a[r][k] -= f * a[c][k];
                }
            }
        }
        det
    }

    #[test]
    fn per_dimension_density_integrates_to_one() {
        let enc = InputEncoding::OneBlob(OneBlobConfig::new(4).unwrap());
        for (i, kind) in KINDS.into_iter().enumerate().skip(2) {
            let mut rng = ChaCha8Rng::seed_from_u64(30 + i as u64);
            let mut l =
                CouplingLayer::new(2, vec![0], vec![1], kind, enc, 0, small_shape(), &mut rng)
                    .unwrap();
            for p in l.net_mut().parameters_mut() {
                *p += rng.random_range(-0.5..0.5);
            }
            let n = 100_000;
            let pts = Array2::from_shape_fn((n, 2), |(r, c)| {
                if c == 0 {
                    0.37
                } else {
                    (r as f64 + 0.5) / n as f64
                }
            });
            let out = l.forward(pts.view(), Array2::zeros((n, 0)).view()).unwrap();
            let integral: f64 = out.log_det.iter().map(|v| v.exp()).sum::<f64>() / n as f64;
            assert!((integral - 1.0).abs() < 1e-6, "{kind:?}: {integral}");
            let (lo, _) = coupling_forward(&l, &[0.37, 0.0], &[]).unwrap();
            let (hi, _) = coupling_forward(&l, &[0.37, UNIT_MAX], &[]).unwrap();
            assert!(lo[1].abs() < 1e-12 && (hi[1] - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        for (i, kind) in KINDS.into_iter().enumerate() {
            let l = layer(kind, 1, 40 + i as u64);
            let x = random_points(3, 4, 6);
            let c = random_points(3, 1, 7);
            let gy = random_points(3, 4, 8) - 0.5;
            let gl = [0.7, -0.4, 1.1];
            let objective = |l: &CouplingLayer, x: &Array2<f64>| {
                let out = l.forward(x.view(), c.view()).unwrap();
                (&out.values * &gy).sum()
                    + out.log_det.iter().zip(gl).map(|(a, b)| a * b).sum::<f64>()
            };
            let (_, tape) = l.forward_tape(x.view(), c.view()).unwrap();
            let mut grad = gy.clone();
            let grads = l.backward(&tape, &mut grad, &gl, true).unwrap();
            let h = 1e-6;
            for r in 0..3 {
                for d in 0..4 {
                    let mut up = x.clone();
                    up[[r, d]] += h;
                    let mut down = x.clone();
                    down[[r, d]] -= h;
                    let fd = (objective(&l, &up) - objective(&l, &down)) / (2.0 * h);
                    assert!(
                        (fd - grad[[r, d]]).abs() < 1e-5 * (1.0 + fd.abs()),
                        "{kind:?} x[{r},{d}]: {fd} vs {}",
                        grad[[r, d]]
                    );
                }
            }
            let analytic: Vec<f64> = grads.iter().copied().collect();
            let count = analytic.len();
            for idx in (0..count).step_by(count / 25 + 1) {
                let mut up = l.clone();
                *up.net_mut().parameters_mut().nth(idx).unwrap() += h;
                let mut down = l.clone();
                *down.net_mut().parameters_mut().nth(idx).unwrap() -= h;
                let fd = (objective(&up, &x) - objective(&down, &x)) / (2.0 * h);
                assert!(
                    (fd - analytic[idx]).abs() < 1e-5 * (1.0 + fd.abs()),
                    "{kind:?} param {idx}: {fd} vs {}",
                    analytic[idx]
                );
            }
        }
    }
}

//! Normalizing flows over the unit hypercube built from coupling layers.
//!
//! The latent density is uniform, so the flow density at `x` is the product
//! of the layer Jacobian determinants along the forward pass `x -> z`.
//! Sampling runs the layer inverses in reverse order.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::coupling::{CouplingLayer, LayerTape, TransformKind};
use crate::encoding::{InputEncoding, OneBlobConfig};
use crate::error::{FlowError, Result};
use crate::nnet::checkpoint::{self, Tensor};
use crate::nnet::{adam_step, clip_global_norm, AdamConfig, AdamState, GradientSet, Mlp, NetShape};
use crate::rng::{sub_stream_rng, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionScheme {
    /// First half of the dimensions conditions the second half, then the roles swap.
    #[default]
    HalfSplit,
    /// Odd dimensions (1-indexed) are warped first, conditioned on the even ones.
    EvenOdd,
}

impl PartitionScheme {
    /// `(A, B)` index sets of layer `layer`; A is left untouched.
    pub fn masks(&self, dim: usize, layer: usize) -> (Vec<usize>, Vec<usize>) {
        let (first, second): (Vec<usize>, Vec<usize>) = match self {
            PartitionScheme::HalfSplit => ((0..dim / 2).collect(), (dim / 2..dim).collect()),
            PartitionScheme::EvenOdd => (
                (0..dim).filter(|i| i % 2 == 1).collect(),
                (0..dim).filter(|i| i % 2 == 0).collect(),
            ),
        };
        if layer.is_multiple_of(2) {
            (first, second)
        } else {
            (second, first)
        }
    }
}

/// Fewest layers that let every dimension influence every other one.
pub fn minimum_layers(dim: usize) -> usize {
    match dim {
        0 | 1 => 1,
        2 => 2,
        3 => 3,
        _ => 4,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditioningFeature {
    pub name: String,
    pub lo: f64,
    pub hi: f64,
}

/// Named extra inputs and the ranges that map them onto `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ConditioningSpec {
    pub features: Vec<ConditioningFeature>,
}

impl ConditioningSpec {
    pub fn new(features: Vec<ConditioningFeature>) -> Result<Self> {
        let spec = Self { features };
        spec.validate()?;
        Ok(spec)
    }

    pub fn none() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        for f in &self.features {
            if !(f.lo.is_finite() && f.hi.is_finite() && f.lo < f.hi) {
                return Err(FlowError::InvalidConfig(format!(
                    "conditioning feature '{}' has invalid range [{}, {}]",
                    f.name, f.lo, f.hi
                )));
            }
        }
        Ok(())
    }

    /// Maps raw feature values onto `[0, 1]`.
    pub fn normalize(&self, values: &[f64]) -> Result<Vec<f64>> {
        if values.len() != self.features.len() {
            return Err(FlowError::Shape(format!(
                "expected {} conditioning values, got {}",
                self.features.len(),
                values.len()
            )));
        }
        self.features
            .iter()
            .zip(values)
            .map(|(f, &v)| {
                if v.is_finite() && (f.lo..=f.hi).contains(&v) {
                    Ok((v - f.lo) / (f.hi - f.lo))
                } else {
                    Err(FlowError::Domain(format!(
                        "feature '{}' = {v} outside [{}, {}]",
                        f.name, f.lo, f.hi
                    )))
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowConfig {
    pub dim: usize,
    pub layers: usize,
    pub kind: TransformKind,
    pub partition: PartitionScheme,
    pub encoding: InputEncoding,
    pub net: NetShape,
    pub conditioning: ConditioningSpec,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            dim: 2,
            layers: 2,
            kind: TransformKind::PiecewiseQuadratic { bins: 32 },
            partition: PartitionScheme::HalfSplit,
            encoding: InputEncoding::OneBlob(OneBlobConfig::default()),
            net: NetShape::default(),
            conditioning: ConditioningSpec::none(),
        }
    }
}

impl FlowConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim < 2 {
            return Err(FlowError::InvalidConfig(format!(
                "coupling flows need D >= 2, got {}",
                self.dim
            )));
        }
        let min = minimum_layers(self.dim);
        if self.layers < min {
            return Err(FlowError::InvalidConfig(format!(
                "D = {} needs at least {min} coupling layers so that every dimension can depend on every other, got {}",
                self.dim, self.layers
            )));
        }
        self.kind.validate()?;
        self.conditioning.validate()
    }
}

/// Builds a flow, enforcing the minimum depth for full dependency coverage.
pub fn build_flow(cfg: &FlowConfig, seed: u64) -> Result<NormalizingFlow> {
    cfg.validate()?;
    build_flow_shallow(cfg, seed)
}

/// Like [`build_flow`] but only requires every dimension to be warped by
/// some layer, so shallow flows (e.g. `D = 8, L = 2`) can be built.
pub fn build_flow_shallow(cfg: &FlowConfig, seed: u64) -> Result<NormalizingFlow> {
    cfg.kind.validate()?;
    cfg.conditioning.validate()?;
    if cfg.dim < 2 || cfg.layers < 2 {
        return Err(FlowError::InvalidConfig(format!(
            "coupling flows need D >= 2 and L >= 2, got D = {}, L = {}",
            cfg.dim, cfg.layers
        )));
    }
    let layers = (0..cfg.layers)
        .map(|l| {
            let (a, b) = cfg.partition.masks(cfg.dim, l);
            let mut rng = sub_stream_rng(seed, Stream::Init, l as u64);
            CouplingLayer::new(
                cfg.dim,
                a,
                b,
                cfg.kind,
                cfg.encoding,
                cfg.conditioning.len(),
                cfg.net,
                &mut rng,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    NormalizingFlow::from_layers(cfg.dim, layers, cfg.conditioning.clone())
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormalizingFlow {
    dim: usize,
    layers: Vec<CouplingLayer>,
    conditioning: ConditioningSpec,
}

/// Per-layer records of a forward pass.
#[derive(Debug, Clone)]
pub struct FlowTape {
    layers: Vec<LayerTape>,
    rows: usize,
}

impl FlowTape {
    pub fn rows(&self) -> usize {
        self.rows
    }
}

/// One gradient set per coupling layer.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowGradients {
    pub layers: Vec<GradientSet>,
}

impl FlowGradients {
    pub fn zeros_like(flow: &NormalizingFlow) -> Self {
        Self {
            layers: flow
                .layers
                .iter()
                .map(|l| GradientSet::zeros_like(l.net()))
                .collect(),
        }
    }

    pub fn norm(&self) -> f64 {
        self.layers
            .iter()
            .map(GradientSet::norm_sq)
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|g| g.first_non_finite().is_none())
    }

    pub fn scale(&mut self, factor: f64) {
        self.layers.iter_mut().for_each(|g| g.scale(factor));
    }

    pub fn add_assign(&mut self, other: &FlowGradients) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.add_assign(b);
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.layers.iter().flat_map(GradientSet::iter)
    }

    pub fn sets_mut(&mut self) -> Vec<&mut GradientSet> {
        self.layers.iter_mut().collect()
    }

    /// Clips to `max_norm` in place; returns `(norm before, clipped)`.
    pub fn clip(&mut self, max_norm: f64) -> (f64, bool) {
        clip_global_norm(&mut self.sets_mut(), max_norm)
    }
}

/// Adam state for every layer network of a flow.
#[derive(Debug, Clone)]
pub struct FlowOptimizer {
    states: Vec<AdamState>,
}

impl FlowOptimizer {
    pub fn new(flow: &NormalizingFlow, config: AdamConfig) -> Self {
        Self {
            states: flow
                .layers
                .iter()
                .map(|l| AdamState::new(l.net(), config))
                .collect(),
        }
    }

    /// Applies one Adam update to every layer. Non-finite gradients are
    /// rejected before any parameter changes.
    pub fn step(&mut self, flow: &mut NormalizingFlow, grads: &FlowGradients) -> Result<()> {
        if grads.layers.len() != self.states.len() {
            return Err(FlowError::Shape("gradient does not match the flow".into()));
        }
        if !grads.is_finite() {
            return Err(FlowError::NonFiniteGradient("flow gradient".into()));
        }
        for ((layer, state), g) in flow
            .layers
            .iter_mut()
            .zip(&mut self.states)
            .zip(&grads.layers)
        {
            adam_step(layer.net_mut(), state, g)?;
        }
        Ok(())
    }

    pub fn scale_learning_rate(&mut self, factor: f64) {
        for s in &mut self.states {
            s.config.learning_rate *= factor;
        }
    }

    pub fn learning_rate(&self) -> f64 {
        self.states.first().map_or(0.0, |s| s.config.learning_rate)
    }
}

fn check_unit(x: &ArrayView2<'_, f64>, what: &str) -> Result<()> {
    match x.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        Some(v) => Err(FlowError::Domain(format!(
            "{what} coordinate {v} outside the unit cube"
        ))),
        None => Ok(()),
    }
}

fn single_row(v: &[f64]) -> Array2<f64> {
    Array2::from_shape_vec((1, v.len()), v.to_vec()).expect("row shape")
}

impl NormalizingFlow {
    /// Assembles a flow from prebuilt layers. Every dimension must be warped
    /// by at least one layer.
    pub fn from_layers(
        dim: usize,
        layers: Vec<CouplingLayer>,
        conditioning: ConditioningSpec,
    ) -> Result<Self> {
        if layers.is_empty() {
            return Err(FlowError::InvalidConfig(
                "a flow needs at least one layer".into(),
            ));
        }
        let mut warped = vec![false; dim];
        for l in &layers {
            if l.dim() != dim || l.conditioning_dim() != conditioning.len() {
                return Err(FlowError::Shape(format!(
                    "layer over {} dims with {} conditioning inputs in a {dim}-dim flow with {}",
                    l.dim(),
                    l.conditioning_dim(),
                    conditioning.len()
                )));
            }
            l.mask_b().iter().for_each(|&i| warped[i] = true);
        }
        if let Some(i) = warped.iter().position(|w| !w) {
            return Err(FlowError::InvalidConfig(format!(
                "dimension {i} is never warped by any layer"
            )));
        }
        Ok(Self {
            dim,
            layers,
            conditioning,
        })
    }

    /// One-dimensional flow with a single warp whose logits are trained
    /// directly (no network input).
    pub fn direct_logits(kind: TransformKind) -> Result<Self> {
        let net = Mlp::bias_only(kind.raw_width());
        let layer =
            CouplingLayer::with_net(1, vec![], vec![0], kind, InputEncoding::Scalar, 0, net)?;
        Self::from_layers(1, vec![layer], ConditioningSpec::none())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }

    pub fn layers(&self) -> &[CouplingLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [CouplingLayer] {
        &mut self.layers
    }

    pub fn conditioning(&self) -> &ConditioningSpec {
        &self.conditioning
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.net().parameter_count()).sum()
    }

    pub fn parameters_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.net_mut().parameters_mut())
    }

    fn check_batch(
        &self,
        x: &ArrayView2<'_, f64>,
        cond: &ArrayView2<'_, f64>,
        what: &str,
    ) -> Result<()> {
        if x.ncols() != self.dim
            || cond.ncols() != self.conditioning.len()
            || cond.nrows() != x.nrows()
        {
            return Err(FlowError::Shape(format!(
                "flow expects ({}, {}) columns, got {:?} and conditioning {:?}",
                self.dim,
                self.conditioning.len(),
                x.dim(),
                cond.dim()
            )));
        }
        check_unit(x, what)?;
        check_unit(cond, "normalized conditioning")
    }

    /// Log densities of a batch. `cond` holds normalized conditioning.
    pub fn log_pdf_batch(
        &self,
        x: ArrayView2<'_, f64>,
        cond: ArrayView2<'_, f64>,
    ) -> Result<Vec<f64>> {
        self.check_batch(&x, &cond, "point")?;
        let mut cur = x.to_owned();
        let mut log_q = vec![0.0; x.nrows()];
        for layer in &self.layers {
            let out = layer.forward(cur.view(), cond)?;
            log_q
                .iter_mut()
                .zip(&out.log_det)
                .for_each(|(a, b)| *a += b);
            cur = out.values;
        }
        Ok(log_q)
    }

    /// Forward pass recording everything [`NormalizingFlow::backward`] needs.
    pub fn forward_tape(
        &self,
        x: ArrayView2<'_, f64>,
        cond: ArrayView2<'_, f64>,
    ) -> Result<(Vec<f64>, FlowTape)> {
        self.check_batch(&x, &cond, "point")?;
        let mut cur = x.to_owned();
        let mut log_q = vec![0.0; x.nrows()];
        let mut tapes = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (out, tape) = layer.forward_tape(cur.view(), cond)?;
            log_q
                .iter_mut()
                .zip(&out.log_det)
                .for_each(|(a, b)| *a += b);
            tapes.push(tape);
            cur = out.values;
        }
        Ok((
            log_q,
            FlowTape {
                layers: tapes,
                rows: x.nrows(),
            },
        ))
    }

    /// Parameter gradients of `sum_r g_log_q[r] * log q(x_r)`.
    pub fn backward(&self, tape: &FlowTape, g_log_q: &[f64]) -> Result<FlowGradients> {
        self.backprop(tape, g_log_q, false).map(|(g, _)| g)
    }

    /// Like [`NormalizingFlow::backward`], also returning `d/dx`.
    pub fn backward_with_input(
        &self,
        tape: &FlowTape,
        g_log_q: &[f64],
    ) -> Result<(FlowGradients, Array2<f64>)> {
        self.backprop(tape, g_log_q, true)
    }

    fn backprop(
        &self,
        tape: &FlowTape,
        g_log_q: &[f64],
        want_input: bool,
    ) -> Result<(FlowGradients, Array2<f64>)> {
        if tape.layers.len() != self.layers.len() || g_log_q.len() != tape.rows {
            return Err(FlowError::Shape(
                "tape does not match this flow or batch".into(),
            ));
        }
        // The latent density is constant, so nothing flows back from z.
        let mut grad = Array2::zeros((tape.rows, self.dim));
        let mut sets = Vec::with_capacity(self.layers.len());
        for (i, (layer, t)) in self.layers.iter().zip(&tape.layers).enumerate().rev() {
            sets.push(layer.backward(t, &mut grad, g_log_q, i > 0 || want_input)?);
        }
        sets.reverse();
        Ok((FlowGradients { layers: sets }, grad))
    }

    /// Maps latent points to samples; returns the samples and their log densities.
    pub fn sample_batch(
        &self,
        u: ArrayView2<'_, f64>,
        cond: ArrayView2<'_, f64>,
    ) -> Result<(Array2<f64>, Vec<f64>)> {
        self.check_batch(&u, &cond, "latent")?;
        let mut cur = u.to_owned();
        let mut log_q = vec![0.0; u.nrows()];
        for layer in self.layers.iter().rev() {
            let out = layer.inverse(cur.view(), cond)?;
            log_q
                .iter_mut()
                .zip(&out.log_det)
                .for_each(|(a, b)| *a += b);
            cur = out.values;
        }
        Ok((cur, log_q))
    }

    /// Pushes samples forward to the latent space.
    pub fn to_latent(
        &self,
        x: ArrayView2<'_, f64>,
        cond: ArrayView2<'_, f64>,
    ) -> Result<Array2<f64>> {
        self.check_batch(&x, &cond, "point")?;
        let mut cur = x.to_owned();
        for layer in &self.layers {
            cur = layer.forward(cur.view(), cond)?.values;
        }
        Ok(cur)
    }

    pub fn save<W: std::io::Write>(&self, w: W) -> Result<()> {
        checkpoint::write_tensors(w, &self.to_tensors())
    }

    pub fn load<R: std::io::Read>(r: R) -> Result<Self> {
        Self::from_tensors(&checkpoint::read_tensors(r)?)
    }

    pub fn to_tensors(&self) -> Vec<Tensor> {
        let mut out = vec![Tensor::vector(
            "flow.header",
            vec![self.dim as f64, self.layers.len() as f64],
        )];
        for (i, f) in self.conditioning.features.iter().enumerate() {
            out.push(Tensor::vector(
                format!("flow.cond.{i}.{}", f.name),
                vec![f.lo, f.hi],
            ));
        }
        for (l, layer) in self.layers.iter().enumerate() {
            let kind = layer.kind();
            let enc = match layer.encoding() {
                InputEncoding::OneBlob(c) => c.k() as f64,
                InputEncoding::Scalar => 0.0,
            };
            out.push(Tensor::vector(
                format!("layer{l}.kind"),
                vec![kind.code(), kind.bins() as f64, enc],
            ));
            out.push(Tensor::vector(
                format!("layer{l}.mask_a"),
                layer.mask_a().iter().map(|&i| i as f64).collect(),
            ));
            out.push(Tensor::vector(
                format!("layer{l}.mask_b"),
                layer.mask_b().iter().map(|&i| i as f64).collect(),
            ));
            out.extend(layer.net().to_tensors(&format!("layer{l}.net.")));
        }
        out
    }

    pub fn from_tensors(tensors: &[Tensor]) -> Result<Self> {
        let header = checkpoint::find(tensors, "flow.header")?;
        let [dim, n_layers] = header.data[..] else {
            return Err(FlowError::Format("flow header must hold D and L".into()));
        };
        let mut features = Vec::new();
        for t in tensors {
            if let Some(rest) = t.name.strip_prefix("flow.cond.") {
                let (idx, name) = rest
                    .split_once('.')
                    .ok_or_else(|| FlowError::Format(t.name.clone()))?;
                let idx: usize = idx.parse().map_err(|_| FlowError::Format(t.name.clone()))?;
                let [lo, hi] = t.data[..] else {
                    return Err(FlowError::Format(format!("{} must hold a range", t.name)));
                };
                features.push((
                    idx,
                    ConditioningFeature {
                        name: name.to_string(),
                        lo,
                        hi,
                    },
                ));
            }
        }
        features.sort_by_key(|(i, _)| *i);
        let conditioning = ConditioningSpec::new(features.into_iter().map(|(_, f)| f).collect())?;
        let to_indices = |t: &Tensor| t.data.iter().map(|&v| v as usize).collect::<Vec<_>>();
        let layers = (0..n_layers as usize)
            .map(|l| {
                let meta = checkpoint::find(tensors, &format!("layer{l}.kind"))?;
                let [code, bins, enc] = meta.data[..] else {
                    return Err(FlowError::Format(format!(
                        "layer{l}.kind must hold three values"
                    )));
                };
                let kind = TransformKind::from_code(code, bins as usize)?;
                let encoding = if enc == 0.0 {
                    InputEncoding::Scalar
                } else {
                    InputEncoding::OneBlob(OneBlobConfig::new(enc as usize)?)
                };
                let a = to_indices(checkpoint::find(tensors, &format!("layer{l}.mask_a"))?);
                let b = to_indices(checkpoint::find(tensors, &format!("layer{l}.mask_b"))?);
                let net = Mlp::from_tensors(&format!("layer{l}.net."), tensors)?;
                CouplingLayer::with_net(dim as usize, a, b, kind, encoding, conditioning.len(), net)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_layers(dim as usize, layers, conditioning)
    }
}

/// Density of the flow at a single point; `conditioning` holds raw feature values.
pub fn flow_pdf(flow: &NormalizingFlow, x: &[f64], conditioning: &[f64]) -> Result<f64> {
    let c = flow.conditioning.normalize(conditioning)?;
    let lq = flow.log_pdf_batch(single_row(x).view(), single_row(&c).view())?;
    Ok(lq[0].exp())
}

/// Maps one latent point to a sample and its density.
pub fn flow_sample(
    flow: &NormalizingFlow,
    u: &[f64],
    conditioning: &[f64],
) -> Result<(Vec<f64>, f64)> {
    let c = flow.conditioning.normalize(conditioning)?;
    let (x, lq) = flow.sample_batch(single_row(u).view(), single_row(&c).view())?;
    Ok((x.row(0).to_vec(), lq[0].exp()))
}

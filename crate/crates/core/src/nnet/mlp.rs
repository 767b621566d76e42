use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::checkpoint::{self, Tensor};
use crate::error::{FlowError, Result};

/// One affine layer. `inputs` lists the node ids whose activations are
/// concatenated (in order) to form the layer input; node 0 is the network
/// input and node `i + 1` is the output of layer `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub inputs: Vec<usize>,
    pub relu: bool,
}

impl Dense {
    pub fn fan_in(&self) -> usize {
        self.weight.nrows()
    }

    pub fn fan_out(&self) -> usize {
        self.weight.ncols()
    }
}

/// Layout of a U-shaped coupling network.
///
/// An input adapter maps to `outer_width`, then `levels` encoder layers halve
/// the width at every nesting level, mirrored decoder layers widen it back,
/// and an output adapter produces `output` values. With `skips` each decoder
/// layer also receives the encoder activation of its mirrored level.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetShape {
    pub outer_width: usize,
    pub levels: usize,
    pub skips: bool,
}

impl Default for NetShape {
    fn default() -> Self {
        Self {
            outer_width: 64,
            levels: 4,
            skips: true,
        }
    }
}

impl NetShape {
    /// The 256-wide, 8 hidden layer configuration with two adapter layers.
    pub fn paper_preset() -> Self {
        Self {
            outer_width: 256,
            levels: 4,
            skips: true,
        }
    }

    fn level_width(&self, level: usize) -> usize {
        (self.outer_width >> level).max(1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    input_width: usize,
    layers: Vec<Dense>,
}

/// Activations of every node from a forward pass, kept for backprop.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    nodes: Vec<Array2<f64>>,
}

impl ForwardCache {
    pub fn batch_size(&self) -> usize {
        self.nodes[0].nrows()
    }

    pub fn output(&self) -> &Array2<f64> {
        self.nodes.last().expect("cache holds the input node")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGradient {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

/// One gradient tensor pair per layer of the owning [`Mlp`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    pub layers: Vec<LayerGradient>,
}

impl GradientSet {
    pub fn zeros_like(net: &Mlp) -> Self {
        let layers = net
            .layers
            .iter()
            .map(|l| LayerGradient {
                weight: Array2::zeros(l.weight.raw_dim()),
                bias: Array1::zeros(l.bias.raw_dim()),
            })
            .collect();
        Self { layers }
    }

    pub fn norm_sq(&self) -> f64 {
        self.layers
            .iter()
            .map(|l| {
                l.weight
                    .iter()
                    .chain(l.bias.iter())
                    .map(|g| g * g)
                    .sum::<f64>()
            })
            .sum()
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    pub fn scale(&mut self, factor: f64) {
        for l in &mut self.layers {
            l.weight *= factor;
            l.bias *= factor;
        }
    }

    pub fn add_assign(&mut self, other: &GradientSet) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weight += &b.weight;
            a.bias += &b.bias;
        }
    }

    /// Index of the first layer holding a non-finite component.
    pub fn first_non_finite(&self) -> Option<usize> {
        self.layers
            .iter()
            .position(|l| l.weight.iter().chain(l.bias.iter()).any(|g| !g.is_finite()))
    }

    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weight.iter().chain(l.bias.iter()))
    }
}

/// Rescales all sets jointly so their global L2 norm does not exceed
/// `max_norm`. Returns the norm before clipping and whether it was applied.
pub fn clip_global_norm(sets: &mut [&mut GradientSet], max_norm: f64) -> (f64, bool) {
    let norm = sets.iter().map(|g| g.norm_sq()).sum::<f64>().sqrt();
    if norm > max_norm && norm.is_finite() {
        let factor = max_norm / norm;
        for g in sets.iter_mut() {
            g.scale(factor);
        }
        (norm, true)
    } else {
        (norm, false)
    }
}

fn xavier_dense<R: Rng>(
    fan_in: usize,
    fan_out: usize,
    inputs: Vec<usize>,
    relu: bool,
    rng: &mut R,
) -> Dense {
    let std = (2.0 / (fan_in + fan_out) as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("finite std");
    Dense {
        weight: Array2::from_shape_simple_fn((fan_in, fan_out), || normal.sample(rng)),
        bias: Array1::zeros(fan_out),
        inputs,
        relu,
    }
}

/// Plain stacked network `widths[0] -> widths[1] -> ... -> widths[n-1]` with
/// rectifiers on the hidden layers and a zeroed output layer.
pub fn xavier_init(widths: &[usize], seed: u64) -> Result<Mlp> {
    Mlp::stacked(widths, &mut ChaCha8Rng::seed_from_u64(seed))
}

impl Mlp {
    pub fn stacked<R: Rng>(widths: &[usize], rng: &mut R) -> Result<Mlp> {
        if widths.len() < 2 {
            return Err(FlowError::InvalidConfig(format!(
                "a network needs at least input and output widths, got {widths:?}"
            )));
        }
        if widths.contains(&0) {
            return Err(FlowError::InvalidConfig(format!(
                "layer widths must be positive, got {widths:?}"
            )));
        }
        let n = widths.len() - 1;
        let layers = (0..n)
            .map(|i| xavier_dense(widths[i], widths[i + 1], vec![i], i + 1 < n, rng))
            .collect();
        let mut net = Mlp {
            input_width: widths[0],
            layers,
        };
        net.zero_output_layer();
        Ok(net)
    }

    /// U-shaped network with Xavier-initialized weights and a zeroed output layer.
    pub fn u_net<R: Rng>(input: usize, output: usize, shape: NetShape, rng: &mut R) -> Result<Mlp> {
        if output == 0 || shape.outer_width == 0 {
            return Err(FlowError::InvalidConfig(format!(
                "network widths must be positive (output {output}, outer width {})",
                shape.outer_width
            )));
        }
        // A zero-width input (no conditioning at all) leaves only the bias path.
        if input == 0 {
            return Ok(Self::bias_only(output));
        }
        let mut layers = Vec::with_capacity(2 * shape.levels + 2);
        let w0 = shape.outer_width;
        layers.push(xavier_dense(input, w0, vec![0], true, rng));
        let adapter_node = 1;
        let mut encoder_nodes = Vec::with_capacity(shape.levels);
        let mut prev = (adapter_node, w0);
        for level in 0..shape.levels {
            let w = shape.level_width(level);
            layers.push(xavier_dense(prev.1, w, vec![prev.0], true, rng));
            prev = (layers.len(), w);
            encoder_nodes.push(prev);
        }
        for level in (0..shape.levels).rev() {
            let w = shape.level_width(level);
            let (inputs, fan_in) = if level + 1 == shape.levels {
                (vec![prev.0], prev.1)
            } else if shape.skips {
                let skip = encoder_nodes[level];
                (vec![prev.0, skip.0], prev.1 + skip.1)
            } else {
                (vec![prev.0], prev.1)
            };
            layers.push(xavier_dense(fan_in, w, inputs, true, rng));
            prev = (layers.len(), w);
        }
        let (inputs, fan_in) = if shape.skips && shape.levels > 0 {
            (vec![prev.0, adapter_node], prev.1 + w0)
        } else {
            (vec![prev.0], prev.1)
        };
        layers.push(xavier_dense(fan_in, output, inputs, false, rng));
        let mut net = Mlp {
            input_width: input,
            layers,
        };
        net.zero_output_layer();
        Ok(net)
    }

    /// Network ignoring its (empty) input: the output is the bias vector.
    /// Used for unconditional warps whose logits are trained directly.
    pub fn bias_only(output: usize) -> Mlp {
        Mlp {
            input_width: 0,
            layers: vec![Dense {
                weight: Array2::zeros((0, output)),
                bias: Array1::zeros(output),
                inputs: vec![0],
                relu: false,
            }],
        }
    }

    pub fn from_layers(input_width: usize, layers: Vec<Dense>) -> Result<Mlp> {
        let net = Mlp {
            input_width,
            layers,
        };
        net.validate()?;
        Ok(net)
    }

    fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(FlowError::InvalidConfig("network has no layers".into()));
        }
        let mut widths = vec![self.input_width];
        for (i, l) in self.layers.iter().enumerate() {
            if l.inputs.is_empty() || l.inputs.iter().any(|&n| n > i) {
                return Err(FlowError::Shape(format!(
                    "layer {i} reads an undefined node {:?}",
                    l.inputs
                )));
            }
            let fan_in: usize = l.inputs.iter().map(|&n| widths[n]).sum();
            if fan_in != l.fan_in() || l.bias.len() != l.fan_out() {
                return Err(FlowError::Shape(format!(
                    "layer {i}: weight {:?} and bias {} do not match input width {fan_in}",
                    l.weight.dim(),
                    l.bias.len()
                )));
            }
            widths.push(l.fan_out());
        }
        Ok(())
    }

    fn zero_output_layer(&mut self) {
        let last = self.layers.last_mut().expect("non-empty");
        last.weight.fill(0.0);
        last.bias.fill(0.0);
    }

    pub fn input_width(&self) -> usize {
        self.input_width
    }

    pub fn output_width(&self) -> usize {
        self.layers.last().map_or(0, Dense::fan_out)
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }

    pub fn parameter_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.len() + l.bias.len())
            .sum()
    }

    pub fn is_finite(&self) -> bool {
        self.parameters().all(|p| p.is_finite())
    }

    pub fn parameters(&self) -> impl Iterator<Item = &f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weight.iter().chain(l.bias.iter()))
    }

    pub fn parameters_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.weight.iter_mut().chain(l.bias.iter_mut()))
    }

    /// Batched forward pass; rows are samples.
    pub fn forward(&self, input: ArrayView2<'_, f64>) -> Result<(Array2<f64>, ForwardCache)> {
        if input.ncols() != self.input_width {
            return Err(FlowError::Shape(format!(
                "network expects {} inputs, got {}",
                self.input_width,
                input.ncols()
            )));
        }
        let n = input.nrows();
        let mut nodes: Vec<Array2<f64>> = Vec::with_capacity(self.layers.len() + 1);
        nodes.push(input.as_standard_layout().into_owned());
        for layer in &self.layers {
            let m = layer.fan_out();
            let mut out = layer.bias.broadcast((n, m)).expect("bias row").to_owned();
            let mut offset = 0;
            for &src in &layer.inputs {
                let x = &nodes[src];
                let w = x.ncols();
                general_mat_mul(
                    1.0,
                    x,
                    &layer.weight.slice(s![offset..offset + w, ..]),
                    1.0,
                    &mut out,
                );
                offset += w;
            }
            if layer.relu {
                out.mapv_inplace(|v| v.max(0.0));
            }
            nodes.push(out);
        }
        let output = nodes.last().cloned().expect("at least one layer");
        Ok((output, ForwardCache { nodes }))
    }

    pub fn predict(&self, input: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.forward(input).map(|(out, _)| out)
    }

    /// Gradients of `sum(output * output_grad)` with respect to every parameter.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        output_grad: ArrayView2<'_, f64>,
    ) -> Result<GradientSet> {
        self.backprop(cache, output_grad, false).map(|(g, _)| g)
    }

    /// Like [`Mlp::backward`], additionally returning the gradient with
    /// respect to the network input.
    pub fn backward_with_input(
        &self,
        cache: &ForwardCache,
        output_grad: ArrayView2<'_, f64>,
    ) -> Result<(GradientSet, Array2<f64>)> {
        let (g, input_grad) = self.backprop(cache, output_grad, true)?;
        Ok((g, input_grad.expect("requested")))
    }

    fn check_cache(&self, cache: &ForwardCache, output_grad: &ArrayView2<'_, f64>) -> Result<()> {
        let n = cache.batch_size();
        let stale = cache.nodes.len() != self.layers.len() + 1
            || cache.nodes[0].ncols() != self.input_width
            || self
                .layers
                .iter()
                .zip(&cache.nodes[1..])
                .any(|(l, node)| node.ncols() != l.fan_out() || node.nrows() != n);
        if stale {
            return Err(FlowError::Shape(
                "forward cache does not belong to this network".into(),
            ));
        }
        if output_grad.dim() != (n, self.output_width()) {
            return Err(FlowError::Shape(format!(
                "output gradient {:?} does not match batch output ({n}, {})",
                output_grad.dim(),
                self.output_width()
            )));
        }
        Ok(())
    }

    fn backprop(
        &self,
        cache: &ForwardCache,
        output_grad: ArrayView2<'_, f64>,
        want_input: bool,
    ) -> Result<(GradientSet, Option<Array2<f64>>)> {
        self.check_cache(cache, &output_grad)?;
        let mut grads = GradientSet::zeros_like(self);
        let mut node_grads: Vec<Option<Array2<f64>>> = vec![None; cache.nodes.len()];
        *node_grads.last_mut().expect("non-empty") =
            Some(output_grad.as_standard_layout().into_owned());

        for (i, layer) in self.layers.iter().enumerate().rev() {
            let Some(mut g) = node_grads[i + 1].take() else {
                continue;
            };
            if layer.relu {
                ndarray::Zip::from(&mut g)
                    .and(&cache.nodes[i + 1])
                    .for_each(|g, &a| {
                        if a <= 0.0 {
                            *g = 0.0;
                        }
                    });
            }
            let lg = &mut grads.layers[i];
            lg.bias = g.sum_axis(Axis(0));
            let mut offset = 0;
            for &src in &layer.inputs {
                let x = &cache.nodes[src];
                let w = x.ncols();
                general_mat_mul(
                    1.0,
                    &x.t(),
                    &g,
                    1.0,
                    &mut lg.weight.slice_mut(s![offset..offset + w, ..]),
                );
                if src > 0 || want_input {
                    let dst = node_grads[src].get_or_insert_with(|| Array2::zeros(x.raw_dim()));
                    general_mat_mul(
                        1.0,
                        &g,
                        &layer.weight.slice(s![offset..offset + w, ..]).t(),
                        1.0,
                        dst,
                    );
                }
                offset += w;
            }
        }
        let input_grad = if want_input {
            Some(
                node_grads[0]
                    .take()
                    .unwrap_or_else(|| Array2::zeros(cache.nodes[0].raw_dim())),
            )
        } else {
            None
        };
        Ok((grads, input_grad))
    }
}

impl Mlp {
    /// Tensors describing this network: a `layout` vector followed by the
    /// weight and bias of every layer, all names prefixed by `prefix`.
    pub fn to_tensors(&self, prefix: &str) -> Vec<Tensor> {
        let mut layout = vec![self.input_width as f64, self.layers.len() as f64];
        for l in &self.layers {
            layout.push(l.fan_out() as f64);
            layout.push(if l.relu { 1.0 } else { 0.0 });
            layout.push(l.inputs.len() as f64);
            layout.extend(l.inputs.iter().map(|&n| n as f64));
        }
        let mut out = vec![Tensor::vector(format!("{prefix}layout"), layout)];
        for (i, l) in self.layers.iter().enumerate() {
            out.push(Tensor::new(
                format!("{prefix}{i}.weight"),
                vec![l.fan_in(), l.fan_out()],
                l.weight.iter().copied().collect(),
            ));
            out.push(Tensor::vector(format!("{prefix}{i}.bias"), l.bias.to_vec()));
        }
        out
    }

    pub fn from_tensors(prefix: &str, tensors: &[Tensor]) -> Result<Mlp> {
        let layout = &checkpoint::find(tensors, &format!("{prefix}layout"))?.data;
        let bad = || FlowError::Format(format!("malformed layout for network {prefix}"));
        let mut it = layout.iter().map(|&v| v as usize);
        let input_width = it.next().ok_or_else(bad)?;
        let n_layers = it.next().ok_or_else(bad)?;
        let mut layers = Vec::with_capacity(n_layers);
        for i in 0..n_layers {
            let fan_out = it.next().ok_or_else(bad)?;
            let relu = it.next().ok_or_else(bad)? == 1;
            let n_inputs = it.next().ok_or_else(bad)?;
            let inputs = (0..n_inputs)
                .map(|_| it.next().ok_or_else(bad))
                .collect::<Result<Vec<_>>>()?;
            let w = checkpoint::find(tensors, &format!("{prefix}{i}.weight"))?;
            let b = checkpoint::find(tensors, &format!("{prefix}{i}.bias"))?;
            if w.dims.len() != 2 || w.dims[1] != fan_out || b.data.len() != fan_out {
                return Err(bad());
            }
            let weight = Array2::from_shape_vec((w.dims[0], w.dims[1]), w.data.clone())
                .map_err(|_| bad())?;
            layers.push(Dense {
                weight,
                bias: Array1::from(b.data.clone()),
                inputs,
                relu,
            });
        }
        Mlp::from_layers(input_width, layers)
    }

    /// Copies parameter values from `tensors` into this network, checking shapes.
    pub fn load_parameters(&mut self, prefix: &str, tensors: &[Tensor]) -> Result<()> {
        let loaded = Mlp::from_tensors(prefix, tensors)?;
        if loaded.input_width != self.input_width
            || loaded.layers.len() != self.layers.len()
            || loaded
                .layers
                .iter()
                .zip(&self.layers)
                .any(|(a, b)| a.weight.dim() != b.weight.dim() || a.inputs != b.inputs)
        {
            return Err(FlowError::Shape(format!(
                "checkpoint network {prefix} has a different architecture"
            )));
        }
        *self = loaded;
        Ok(())
    }

    pub fn save<W: std::io::Write>(&self, w: W) -> Result<()> {
        checkpoint::write_tensors(w, &self.to_tensors(""))
    }

    pub fn load<R: std::io::Read>(r: R) -> Result<Mlp> {
        Mlp::from_tensors("", &checkpoint::read_tensors(r)?)
    }
}

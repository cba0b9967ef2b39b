//! Generator/discriminator networks and the filter layout over them.
//!
//! A *filter* is the prunable unit: one dense output unit (its weight row and
//! bias) or one conv output channel (its `c_in × k × k` kernel and bias).
//! The flat parameter order of a network is filter-major, so every filter owns
//! one contiguous span.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::optim::FilterMap;
use crate::rng::Rng;
use crate::tensor::{Gradients, Graph, Tensor, Var};

pub const LEAKY_SLOPE: f64 = 0.2;
pub const DEFAULT_HIDDEN: usize = 64;
pub const DEFAULT_LATENT_DIM: usize = 4;
pub const ICON_SIDE: usize = 8;
pub const ICON_CHANNELS: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Arch {
    PointMlp,
    IconConv,
}

impl Arch {
    pub fn as_str(self) -> &'static str {
        match self {
            Arch::PointMlp => "point-mlp",
            Arch::IconConv => "icon-conv",
        }
    }

    /// Dimension of one data sample.
    pub fn data_dim(self) -> usize {
        match self {
            Arch::PointMlp => 2,
            Arch::IconConv => ICON_SIDE * ICON_SIDE,
        }
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Arch {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "point-mlp" | "point" => Ok(Arch::PointMlp),
            "icon-conv" | "icon" => Ok(Arch::IconConv),
            _ => Err(Error::Config(format!("unknown architecture `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum NetworkId {
    Generator,
    Discriminator,
}

impl NetworkId {
    pub fn as_str(self) -> &'static str {
        match self {
            NetworkId::Generator => "G",
            NetworkId::Discriminator => "D",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Dense,
    Conv { kernel: usize, padding: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamLayer {
    pub kind: LayerKind,
    /// `O×I` for dense, `O×C×k×k` for conv.
    pub weight: Tensor,
    pub bias: Tensor,
    /// Per-output multiplicative offset `m`; the effective filter is `W·(1+m)`.
    pub modulation: Option<Tensor>,
}

impl ParamLayer {
    fn new(kind: LayerKind, weight_shape: Vec<usize>, rng: &mut Rng) -> Self {
        let outputs = weight_shape[0];
        let fan: usize = weight_shape[1..].iter().product();
        let bound = 1.0 / (fan as f64).sqrt();
        let n: usize = weight_shape.iter().product();
        let w = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
        let b = (0..outputs)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        ParamLayer {
            kind,
            weight: Tensor::new(weight_shape, w)
                .expect("valid shape")
                .into_param(),
            bias: Tensor::new(vec![outputs], b)
                .expect("valid shape")
                .into_param(),
            modulation: None,
        }
    }

    pub fn outputs(&self) -> usize {
        self.weight.shape()[0]
    }

    /// Weights per filter (excluding the bias).
    pub fn fan(&self) -> usize {
        self.weight.shape()[1..].iter().product()
    }

    pub fn span_len(&self) -> usize {
        self.fan() + 1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Stage {
    Param(usize),
    LeakyRelu(f64),
    Tanh,
    Sigmoid,
    /// Reshape to `[batch, dims...]`.
    Reshape(Vec<usize>),
    Upsample2,
    AvgPool2,
}

/// What a forward pass tracks gradients for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Track {
    Nothing,
    Weights,
    Modulation,
    Both,
}

impl Track {
    fn weights(self) -> bool {
        matches!(self, Track::Weights | Track::Both)
    }
    fn modulation(self) -> bool {
        matches!(self, Track::Modulation | Track::Both)
    }
}

/// Which per-filter gradient an importance estimate reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradSource {
    Weights,
    Modulation,
}

/// Graph handles for one network's parameters.
#[derive(Debug, Clone)]
pub struct Binding {
    weights: Vec<Var>,
    biases: Vec<Var>,
    modulation: Vec<Option<Var>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Net {
    pub role: NetworkId,
    pub layers: Vec<ParamLayer>,
    pub stages: Vec<Stage>,
    pub input_dim: usize,
    pub output_dim: usize,
}

impl Net {
    pub fn num_filters(&self) -> usize {
        self.layers.iter().map(ParamLayer::outputs).sum()
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.outputs() * l.span_len()).sum()
    }

    /// `(layer, output)` for every filter, in filter order.
    pub fn filter_slots(&self) -> Vec<(usize, usize)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(l, layer)| (0..layer.outputs()).map(move |o| (l, o)))
            .collect()
    }

    fn slot(&self, filter: usize) -> (usize, usize) {
        let mut f = filter;
        for (l, layer) in self.layers.iter().enumerate() {
            if f < layer.outputs() {
                return (l, f);
            }
            f -= layer.outputs();
        }
        panic!(
            "filter {filter} out of range for {} filters",
            self.num_filters()
        );
    }

    /// Span of each filter in the flat (filter-major) parameter vector.
    pub fn filter_spans(&self) -> Vec<Range<usize>> {
        let mut off = 0;
        let mut spans = Vec::with_capacity(self.num_filters());
        for layer in &self.layers {
            for _ in 0..layer.outputs() {
                spans.push(off..off + layer.span_len());
                off += layer.span_len();
            }
        }
        spans
    }

    /// Segments over `[w0, b0, w1, b1, ...]`, the order of [`Net::param_tensors_mut`].
    pub fn filter_map(&self) -> FilterMap {
        self.filter_slots()
            .into_iter()
            .map(|(l, o)| {
                let fan = self.layers[l].fan();
                vec![(2 * l, o * fan..(o + 1) * fan), (2 * l + 1, o..o + 1)]
            })
            .collect()
    }

    /// Segments over the modulation tensors, one element per filter.
    pub fn modulation_filter_map(&self) -> FilterMap {
        self.filter_slots()
            .into_iter()
            .map(|(l, o)| vec![(l, o..o + 1)])
            .collect()
    }

    pub fn param_tensors(&self) -> Vec<&Tensor> {
        self.layers
            .iter()
            .flat_map(|l| [&l.weight, &l.bias])
            .collect()
    }

    pub fn param_tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    pub fn has_modulation(&self) -> bool {
        self.layers.iter().all(|l| l.modulation.is_some())
    }

    /// Attaches zero modulation to every layer (identity forward).
    pub fn enable_modulation(&mut self) {
        for l in &mut self.layers {
            if l.modulation.is_none() {
                l.modulation = Some(Tensor::zeros(vec![l.outputs()]).into_param());
            }
        }
    }

    pub fn modulation_tensors(&self) -> Result<Vec<&Tensor>> {
        self.layers
            .iter()
            .map(|l| {
                l.modulation
                    .as_ref()
                    .ok_or_else(|| Error::Contract("modulation not enabled".into()))
            })
            .collect()
    }

    pub fn modulation_tensors_mut(&mut self) -> Result<Vec<&mut Tensor>> {
        self.layers
            .iter_mut()
            .map(|l| {
                l.modulation
                    .as_mut()
                    .ok_or_else(|| Error::Contract("modulation not enabled".into()))
            })
            .collect()
    }

    pub fn zero_grads(&mut self) {
        for l in &mut self.layers {
            l.weight.zero_grad();
            l.bias.zero_grad();
            if let Some(m) = l.modulation.as_mut() {
                m.zero_grad();
            }
        }
    }

    pub fn bind(&self, g: &mut Graph, track: Track) -> Binding {
        let leaf =
            |g: &mut Graph, t: &Tensor, on: bool| if on { g.variable(t) } else { g.constant(t) };
        let mut b = Binding {
            weights: vec![],
            biases: vec![],
            modulation: vec![],
        };
        for l in &self.layers {
            b.weights.push(leaf(g, &l.weight, track.weights()));
            b.biases.push(leaf(g, &l.bias, track.weights()));
            b.modulation.push(
                l.modulation
                    .as_ref()
                    .map(|m| leaf(g, m, track.modulation())),
            );
        }
        b
    }

    /// Runs the stage stack on a `B × input_dim` input; returns `B × output_dim`.
    pub fn forward_bound(&self, g: &mut Graph, b: &Binding, input: Var) -> Result<Var> {
        let batch = g.shape(input)[0];
        let mut x = input;
        for stage in &self.stages {
            x = match stage {
                Stage::Param(i) => {
                    let layer = &self.layers[*i];
                    let y = match layer.kind {
                        LayerKind::Dense => g.dense(x, b.weights[*i], b.biases[*i])?,
                        LayerKind::Conv { padding, .. } => {
                            g.conv2d(x, b.weights[*i], b.biases[*i], padding)?
                        }
                    };
                    match b.modulation[*i] {
                        Some(m) => g.channel_scale(y, m)?,
                        None => y,
                    }
                }
                Stage::LeakyRelu(s) => g.leaky_relu(x, *s),
                Stage::Tanh => g.tanh(x),
                Stage::Sigmoid => g.sigmoid(x),
                Stage::Reshape(dims) => {
                    let mut shape = vec![batch];
                    shape.extend_from_slice(dims);
                    g.reshape(x, shape)?
                }
                Stage::Upsample2 => g.upsample2(x)?,
                Stage::AvgPool2 => g.avg_pool2(x)?,
            };
        }
        if g.shape(x) != [batch, self.output_dim] {
            return Err(Error::Dimension(format!(
                "network produced {:?}, expected [{batch}, {}]",
                g.shape(x),
                self.output_dim
            )));
        }
        Ok(x)
    }

    pub fn forward(&self, g: &mut Graph, input: Var, track: Track) -> Result<(Var, Binding)> {
        let b = self.bind(g, track);
        let y = self.forward_bound(g, &b, input)?;
        Ok((y, b))
    }

    /// Forward pass without gradient tracking.
    pub fn infer(&self, input: &Tensor) -> Result<Tensor> {
        if input.shape().len() != 2 || input.shape()[1] != self.input_dim {
            return Err(Error::Dimension(format!(
                "input {:?} for network with input dim {}",
                input.shape(),
                self.input_dim
            )));
        }
        let mut g = Graph::new();
        let x = g.constant(input);
        let (y, _) = self.forward(&mut g, x, Track::Nothing)?;
        Ok(g.tensor(y))
    }

    /// Accumulates the gradients recorded for `b` into the parameter tensors.
    pub fn store_grads(&mut self, grads: &Gradients, b: &Binding) -> Result<()> {
        for (i, l) in self.layers.iter_mut().enumerate() {
            if let Some(gw) = grads.get(b.weights[i]) {
                l.weight.accumulate_grad(gw)?;
            }
            if let Some(gb) = grads.get(b.biases[i]) {
                l.bias.accumulate_grad(gb)?;
            }
            if let (Some(mv), Some(m)) = (b.modulation[i], l.modulation.as_mut()) {
                if let Some(gm) = grads.get(mv) {
                    m.accumulate_grad(gm)?;
                }
            }
        }
        Ok(())
    }

    /// Filter-major flat parameter vector.
    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            let fan = l.fan();
            for o in 0..l.outputs() {
                out.extend_from_slice(&l.weight.data()[o * fan..(o + 1) * fan]);
                out.push(l.bias.data()[o]);
            }
        }
        out
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::Dimension(format!(
                "{} values for {} parameters",
                flat.len(),
                self.num_params()
            )));
        }
        let mut off = 0;
        for l in &mut self.layers {
            let fan = l.fan();
            for o in 0..l.outputs() {
                l.weight.data_mut()[o * fan..(o + 1) * fan].copy_from_slice(&flat[off..off + fan]);
                l.bias.data_mut()[o] = flat[off + fan];
                off += fan + 1;
            }
        }
        Ok(())
    }

    /// Filter-major flat gradient; missing gradients are a contract error.
    pub fn flat_grads(&self) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            let (gw, gb) = match (l.weight.grad(), l.bias.grad()) {
                (Some(a), Some(b)) => (a, b),
                _ => return Err(Error::Contract("parameter gradients not populated".into())),
            };
            let fan = l.fan();
            for o in 0..l.outputs() {
                out.extend_from_slice(&gw[o * fan..(o + 1) * fan]);
                out.push(gb[o]);
            }
        }
        Ok(out)
    }

    /// Adds `delta` (filter-major) to the stored gradients.
    pub fn add_flat_grads(&mut self, delta: &[f64]) -> Result<()> {
        if delta.len() != self.num_params() {
            return Err(Error::Dimension("flat gradient length".into()));
        }
        let mut off = 0;
        for l in &mut self.layers {
            let fan = l.fan();
            let outputs = l.outputs();
            let (wn, bn) = (l.weight.numel(), l.bias.numel());
            let mut wdelta = vec![0.0; wn];
            let mut bdelta = vec![0.0; bn];
            for o in 0..outputs {
                wdelta[o * fan..(o + 1) * fan].copy_from_slice(&delta[off..off + fan]);
                bdelta[o] = delta[off + fan];
                off += fan + 1;
            }
            l.weight.accumulate_grad(&wdelta)?;
            l.bias.accumulate_grad(&bdelta)?;
        }
        Ok(())
    }

    /// Weights then bias of one filter.
    pub fn filter_values(&self, filter: usize) -> Vec<f64> {
        let (l, o) = self.slot(filter);
        let layer = &self.layers[l];
        let fan = layer.fan();
        let mut v = layer.weight.data()[o * fan..(o + 1) * fan].to_vec();
        v.push(layer.bias.data()[o]);
        v
    }

    pub fn set_filter_values(&mut self, filter: usize, values: &[f64]) -> Result<()> {
        let (l, o) = self.slot(filter);
        let layer = &mut self.layers[l];
        let fan = layer.fan();
        if values.len() != fan + 1 {
            return Err(Error::Dimension(format!(
                "filter span is {}, got {}",
                fan + 1,
                values.len()
            )));
        }
        layer.weight.data_mut()[o * fan..(o + 1) * fan].copy_from_slice(&values[..fan]);
        layer.bias.data_mut()[o] = values[fan];
        Ok(())
    }

    /// Zeroes a filter's weights, bias and modulation.
    pub fn zero_filter(&mut self, filter: usize) {
        let (l, o) = self.slot(filter);
        let layer = &mut self.layers[l];
        let fan = layer.fan();
        layer.weight.data_mut()[o * fan..(o + 1) * fan]
            .iter_mut()
            .for_each(|v| *v = 0.0);
        layer.bias.data_mut()[o] = 0.0;
        if let Some(m) = layer.modulation.as_mut() {
            m.data_mut()[o] = 0.0;
        }
    }

    pub fn filter_is_zero(&self, filter: usize) -> bool {
        self.filter_values(filter).iter().all(|&v| v == 0.0)
    }

    /// Redraws a filter from the initialization distribution.
    pub fn reinit_filter(&mut self, filter: usize, rng: &mut Rng) {
        let (l, o) = self.slot(filter);
        let layer = &mut self.layers[l];
        let fan = layer.fan();
        let bound = 1.0 / (fan as f64).sqrt();
        for v in &mut layer.weight.data_mut()[o * fan..(o + 1) * fan] {
            *v = rng.random_range(-bound..bound);
        }
        layer.bias.data_mut()[o] = rng.random_range(-bound..bound);
        if let Some(m) = layer.modulation.as_mut() {
            m.data_mut()[o] = 0.0;
        }
    }

    /// Mean of grad² and of |grad| over a filter's span.
    pub fn filter_grad_stats(&self, filter: usize, source: GradSource) -> Result<(f64, f64)> {
        let (l, o) = self.slot(filter);
        let layer = &self.layers[l];
        let missing = || Error::Contract("gradients not populated for importance".into());
        match source {
            GradSource::Weights => {
                let fan = layer.fan();
                let gw = layer.weight.grad().ok_or_else(missing)?;
                let gb = layer.bias.grad().ok_or_else(missing)?;
                let vals = gw[o * fan..(o + 1) * fan]
                    .iter()
                    .chain(std::iter::once(&gb[o]));
                let (sq, ab) = vals.fold((0.0, 0.0), |(s, a), g| (s + g * g, a + g.abs()));
                let n = (fan + 1) as f64;
                Ok((sq / n, ab / n))
            }
            GradSource::Modulation => {
                let m = layer.modulation.as_ref().ok_or_else(missing)?;
                let g = m.grad().ok_or_else(missing)?[o];
                Ok((g * g, g.abs()))
            }
        }
    }
}

fn point_generator(dz: usize, hidden: usize, rng: &mut Rng) -> Net {
    Net {
        role: NetworkId::Generator,
        layers: vec![
            ParamLayer::new(LayerKind::Dense, vec![hidden, dz], rng),
            ParamLayer::new(LayerKind::Dense, vec![hidden, hidden], rng),
            ParamLayer::new(LayerKind::Dense, vec![2, hidden], rng),
        ],
        stages: vec![
            Stage::Param(0),
            Stage::LeakyRelu(LEAKY_SLOPE),
            Stage::Param(1),
            Stage::LeakyRelu(LEAKY_SLOPE),
            Stage::Param(2),
        ],
        input_dim: dz,
        output_dim: 2,
    }
}

fn point_discriminator(hidden: usize, rng: &mut Rng) -> Net {
    Net {
        role: NetworkId::Discriminator,
        layers: vec![
            ParamLayer::new(LayerKind::Dense, vec![hidden, 2], rng),
            ParamLayer::new(LayerKind::Dense, vec![hidden, hidden], rng),
            ParamLayer::new(LayerKind::Dense, vec![1, hidden], rng),
        ],
        stages: vec![
            Stage::Param(0),
            Stage::LeakyRelu(LEAKY_SLOPE),
            Stage::Param(1),
            Stage::LeakyRelu(LEAKY_SLOPE),
            Stage::Param(2),
            Stage::Sigmoid,
        ],
        input_dim: 2,
        output_dim: 1,
    }
}

fn icon_generator(dz: usize, ch: usize, rng: &mut Rng) -> Net {
    let half = ICON_SIDE / 2;
    let conv = LayerKind::Conv {
        kernel: 3,
        padding: 1,
    };
    Net {
        role: NetworkId::Generator,
        layers: vec![
            ParamLayer::new(LayerKind::Dense, vec![ch * half * half, dz], rng),
            ParamLayer::new(conv, vec![ch, ch, 3, 3], rng),
            ParamLayer::new(conv, vec![1, ch, 3, 3], rng),
        ],
        stages: vec![
            Stage::Param(0),
            Stage::LeakyRelu(LEAKY_SLOPE),
            Stage::Reshape(vec![ch, half, half]),
            Stage::Upsample2,
            Stage::Param(1),
            Stage::LeakyRelu(LEAKY_SLOPE),
            Stage::Param(2),
            Stage::Tanh,
            Stage::Reshape(vec![ICON_SIDE * ICON_SIDE]),
        ],
        input_dim: dz,
        output_dim: ICON_SIDE * ICON_SIDE,
    }
}

fn icon_discriminator(ch: usize, rng: &mut Rng) -> Net {
    let half = ICON_SIDE / 2;
    let conv = LayerKind::Conv {
        kernel: 3,
        padding: 1,
    };
    Net {
        role: NetworkId::Discriminator,
        layers: vec![
            ParamLayer::new(conv, vec![ch, 1, 3, 3], rng),
            ParamLayer::new(conv, vec![ch, ch, 3, 3], rng),
            ParamLayer::new(LayerKind::Dense, vec![1, ch * half * half], rng),
        ],
        stages: vec![
            Stage::Reshape(vec![1, ICON_SIDE, ICON_SIDE]),
            Stage::Param(0),
            Stage::LeakyRelu(LEAKY_SLOPE),
            Stage::Param(1),
            Stage::LeakyRelu(LEAKY_SLOPE),
            Stage::AvgPool2,
            Stage::Reshape(vec![ch * half * half]),
            Stage::Param(2),
            Stage::Sigmoid,
        ],
        input_dim: ICON_SIDE * ICON_SIDE,
        output_dim: 1,
    }
}

/// A generator–discriminator pair.
#[derive(Debug, Clone, PartialEq)]
pub struct Gan {
    pub arch: Arch,
    pub latent_dim: usize,
    pub generator: Net,
    pub discriminator: Net,
}

impl Gan {
    pub fn new(arch: Arch, latent_dim: usize, rng: &mut Rng) -> Self {
        let width = match arch {
            Arch::PointMlp => DEFAULT_HIDDEN,
            Arch::IconConv => ICON_CHANNELS,
        };
        Gan::with_width(arch, latent_dim, width, rng)
    }

    /// `width` is the hidden size (point) or channel count (icon).
    pub fn with_width(arch: Arch, latent_dim: usize, width: usize, rng: &mut Rng) -> Self {
        let (generator, discriminator) = match arch {
            Arch::PointMlp => (
                point_generator(latent_dim, width, rng),
                point_discriminator(width, rng),
            ),
            Arch::IconConv => (
                icon_generator(latent_dim, width, rng),
                icon_discriminator(width, rng),
            ),
        };
        Gan {
            arch,
            latent_dim,
            generator,
            discriminator,
        }
    }

    pub fn net(&self, id: NetworkId) -> &Net {
        match id {
            NetworkId::Generator => &self.generator,
            NetworkId::Discriminator => &self.discriminator,
        }
    }

    pub fn net_mut(&mut self, id: NetworkId) -> &mut Net {
        match id {
            NetworkId::Generator => &mut self.generator,
            NetworkId::Discriminator => &mut self.discriminator,
        }
    }

    /// Deep copy used to initialise the target pair from the source pair.
    pub fn clone_for_adaptation(&self) -> Gan {
        let mut target = self.clone();
        for id in [NetworkId::Generator, NetworkId::Discriminator] {
            for l in &mut target.net_mut(id).layers {
                l.weight.clear_grad();
                l.bias.clear_grad();
            }
        }
        target
    }

    pub fn generate(&self, z: &Tensor) -> Result<Tensor> {
        self.generator.infer(z)
    }
}

/// `batch × dz` i.i.d. standard normal latents.
pub fn sample_latent(batch: usize, dz: usize, rng: &mut Rng) -> Tensor {
    let data = (0..batch * dz)
        .map(|_| StandardNormal.sample(rng))
        .collect();
    Tensor::new(vec![batch, dz], data).expect("latent shape")
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FilterDescriptor {
    pub filter_id: usize,
    pub network: NetworkId,
    pub layer: usize,
    pub output: usize,
    /// Span in the network's filter-major flat parameter vector.
    pub span: Range<usize>,
    /// Index of the filter within its own network.
    pub local: usize,
}

/// All prunable filters: generator filters first, then discriminator filters.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FilterLayout {
    pub filters: Vec<FilterDescriptor>,
    g_count: usize,
}

impl FilterLayout {
    pub fn len(&self) -> usize {
        self.filters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.filters.is_empty()
    }

    pub fn count(&self, net: NetworkId) -> usize {
        match net {
            NetworkId::Generator => self.g_count,
            NetworkId::Discriminator => self.filters.len() - self.g_count,
        }
    }

    /// Global filter ids belonging to `net`.
    pub fn range(&self, net: NetworkId) -> Range<usize> {
        match net {
            NetworkId::Generator => 0..self.g_count,
            NetworkId::Discriminator => self.g_count..self.filters.len(),
        }
    }

    pub fn global_id(&self, net: NetworkId, local: usize) -> usize {
        self.range(net).start + local
    }
}

pub fn build_filter_layout(gan: &Gan) -> FilterLayout {
    let mut filters = Vec::new();
    for net in [NetworkId::Generator, NetworkId::Discriminator] {
        let n = gan.net(net);
        for (local, ((layer, output), span)) in n
            .filter_slots()
            .into_iter()
            .zip(n.filter_spans())
            .enumerate()
        {
            filters.push(FilterDescriptor {
                filter_id: filters.len(),
                network: net,
                layer,
                output,
                span,
                local,
            });
        }
    }
    let g_count = gan.generator.num_filters();
    FilterLayout { filters, g_count }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};

    fn point_gan() -> Gan {
        Gan::new(Arch::PointMlp, 4, &mut stream(1, Stream::Init))
    }

    #[test]
    fn latent_moments() {
        let mut rng = stream(3, Stream::Train);
        let z = sample_latent(100_000, 2, &mut rng);
        for c in 0..2 {
            let col: Vec<f64> = (0..100_000).map(|r| z.at2(r, c)).collect();
            let mean = col.iter().sum::<f64>() / col.len() as f64;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (col.len() - 1) as f64;
            assert!(mean.abs() < 0.02, "mean {mean}");
            assert!((var - 1.0).abs() < 0.05, "var {var}");
        }
        let a = sample_latent(4, 3, &mut stream(9, Stream::Train));
        let b = sample_latent(4, 3, &mut stream(9, Stream::Train));
        assert_eq!(a, b);
    }

    #[test]
    fn point_layout_counts() {
        let gan = point_gan();
        let layout = build_filter_layout(&gan);
        assert_eq!(layout.count(NetworkId::Generator), 64 + 64 + 2);
        assert_eq!(layout.count(NetworkId::Discriminator), 64 + 64 + 1);
        for (i, f) in layout.filters.iter().enumerate() {
            assert_eq!(f.filter_id, i);
        }
    }

    #[test]
    fn spans_partition_parameters() {
        for arch in [Arch::PointMlp, Arch::IconConv] {
            let gan = Gan::new(arch, 4, &mut stream(2, Stream::Init));
            let layout = build_filter_layout(&gan);
            for net in [NetworkId::Generator, NetworkId::Discriminator] {
                let spans: Vec<_> = layout.filters[layout.range(net)]
                    .iter()
                    .map(|f| f.span.clone())
                    .collect();
                let mut expect = 0;
                for s in &spans {
                    assert_eq!(s.start, expect, "gap or overlap");
                    expect = s.end;
                }
                assert_eq!(expect, gan.net(net).num_params());
                let total: usize = gan.net(net).param_tensors().iter().map(|t| t.numel()).sum();
                assert_eq!(expect, total);
            }
        }
    }

    #[test]
    fn conv_filter_span_is_kernel_plus_bias() {
        let gan = Gan::new(Arch::IconConv, 4, &mut stream(2, Stream::Init));
        let layout = build_filter_layout(&gan);
        let conv_filters: Vec<_> = layout
            .filters
            .iter()
            .filter(|f| f.network == NetworkId::Generator && f.layer == 1)
            .collect();
        assert_eq!(conv_filters.len(), 16);
        assert!(conv_filters.iter().all(|f| f.span.len() == 16 * 9 + 1));
    }

    #[test]
    fn icon_generator_output_in_range() {
        let gan = Gan::new(Arch::IconConv, 4, &mut stream(5, Stream::Init));
        let z = sample_latent(8, 4, &mut stream(5, Stream::Train));
        let x = gan.generate(&z).unwrap();
        assert_eq!(x.shape(), &[8, 64]);
        assert!(x.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        let d = gan.discriminator.infer(&x).unwrap();
        assert!(d.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn clone_is_deep() {
        let source = point_gan();
        let mut target = source.clone_for_adaptation();
        let z = sample_latent(5, 4, &mut stream(4, Stream::Train));
        assert_eq!(source.generate(&z).unwrap(), target.generate(&z).unwrap());
        let before = source.clone();
        target.generator.zero_filter(3);
        target.discriminator.layers[0].weight.data_mut()[0] += 1.0;
        assert_eq!(source, before);
    }

    #[test]
    fn zeroed_filter_is_dead() {
        let mut gan = point_gan();
        gan.generator.zero_filter(5); // layer 0, unit 5
        let z = sample_latent(16, 4, &mut stream(8, Stream::Train));
        let mut g = Graph::new();
        let x = g.constant(&z);
        let b = gan.generator.bind(&mut g, Track::Nothing);
        let w = b.weights[0];
        let bias = b.biases[0];
        let h = g.dense(x, w, bias).unwrap();
        let a = g.leaky_relu(h, LEAKY_SLOPE);
        for r in 0..16 {
            assert_eq!(g.value(a)[r * 64 + 5], 0.0);
        }
    }

    #[test]
    fn flat_params_roundtrip_and_filter_access() {
        let mut gan = point_gan();
        let flat = gan.discriminator.flat_params();
        let spans = gan.discriminator.filter_spans();
        assert_eq!(
            gan.discriminator.filter_values(70),
            flat[spans[70].clone()].to_vec()
        );
        let mut changed = flat.clone();
        changed[spans[70].start] = 9.0;
        gan.discriminator.set_flat_params(&changed).unwrap();
        assert_eq!(gan.discriminator.filter_values(70)[0], 9.0);
        gan.discriminator.set_flat_params(&flat).unwrap();
        assert_eq!(gan.discriminator.flat_params(), flat);
    }

    #[test]
    fn zero_modulation_is_identity() {
        let gan = Gan::new(Arch::IconConv, 4, &mut stream(6, Stream::Init));
        let mut modulated = gan.clone();
        modulated.generator.enable_modulation();
        modulated.discriminator.enable_modulation();
        let z = sample_latent(3, 4, &mut stream(6, Stream::Train));
        let a = gan.generate(&z).unwrap();
        let b = modulated.generate(&z).unwrap();
        assert_eq!(a, b);
        assert_eq!(
            gan.discriminator.infer(&a).unwrap(),
            modulated.discriminator.infer(&b).unwrap()
        );
    }
}

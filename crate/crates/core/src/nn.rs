//! Named-block networks built on the tensor graph.
//!
//! A network is a list of [`Block`]s. Each block carries at most one weighted
//! layer (conv, transposed conv or linear) and at most one batch norm, so its
//! parameters can be named after the block: `{block}.weight`, `{block}.bias`,
//! `{block}.bn.gamma`, `{block}.bn.beta`. The output of every block is
//! available as a tap, which is how backbone features are extracted.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{rng, Activation, Checkpoint, Graph, RunningStats, Tensor, TensorMap, Var, BN_EPSILON};

#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    Conv2d { in_channels: usize, out_channels: usize, kernel: usize, stride: usize, pad: usize, bias: bool },
    /// Weight layout is in×out×k×k.
    ConvTranspose2d { in_channels: usize, out_channels: usize, kernel: usize, stride: usize, pad: usize },
    Linear { in_features: usize, out_features: usize },
    BatchNorm { channels: usize },
    Activation(Activation),
    /// Reshape each sample to the given dims.
    Reshape(Vec<usize>),
    Flatten,
    Dropout { p: f64 },
}

impl Layer {
    fn weighted(&self) -> bool {
        matches!(self, Layer::Conv2d { .. } | Layer::ConvTranspose2d { .. } | Layer::Linear { .. })
    }

    /// (fan_in, fan_out) with the kernel area counted on both sides.
    pub fn fans(&self) -> Option<(usize, usize)> {
        match *self {
            Layer::Conv2d { in_channels, out_channels, kernel, .. }
            | Layer::ConvTranspose2d { in_channels, out_channels, kernel, .. } => {
                Some((in_channels * kernel * kernel, out_channels * kernel * kernel))
            }
            Layer::Linear { in_features, out_features } => Some((in_features, out_features)),
            _ => None,
        }
    }

    /// Per-sample output shape for a per-sample input shape.
    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let spatial = |what: &str| -> Result<(usize, usize, usize)> {
            match *input {
                [c, h, w] => Ok((c, h, w)),
                _ => Err(Error::Spec(format!("{what} needs a C×H×W input, got {input:?}"))),
            }
        };
        match self {
            Layer::Conv2d { in_channels, out_channels, kernel, stride, pad, .. } => {
                let (c, h, w) = spatial("conv2d")?;
                if c != *in_channels {
                    return Err(Error::Spec(format!("conv2d expects {in_channels} channels, gets {c}")));
                }
                if *stride == 0 || h + 2 * pad < *kernel || w + 2 * pad < *kernel {
                    return Err(Error::Spec(format!("conv2d k{kernel} s{stride} p{pad} does not fit {h}×{w}")));
                }
                Ok(vec![*out_channels, (h + 2 * pad - kernel) / stride + 1, (w + 2 * pad - kernel) / stride + 1])
            }
            Layer::ConvTranspose2d { in_channels, out_channels, kernel, stride, pad } => {
                let (c, h, w) = spatial("transposed conv")?;
                if c != *in_channels {
                    return Err(Error::Spec(format!("transposed conv expects {in_channels} channels, gets {c}")));
                }
                let out = |s: usize| ((s - 1) * stride + kernel).checked_sub(2 * pad).filter(|&o| o > 0);
                match (out(h), out(w)) {
                    (Some(oh), Some(ow)) if *stride > 0 => Ok(vec![*out_channels, oh, ow]),
                    _ => Err(Error::Spec(format!("transposed conv k{kernel} s{stride} p{pad} on {h}×{w} is empty"))),
                }
            }
            Layer::Linear { in_features, out_features } => match *input {
                [d] if d == *in_features => Ok(vec![*out_features]),
                _ => Err(Error::Spec(format!("linear expects [{in_features}], gets {input:?}"))),
            },
            Layer::BatchNorm { channels } => match input.first() {
                Some(c) if c == channels && (input.len() == 1 || input.len() == 3) => Ok(input.to_vec()),
                _ => Err(Error::Spec(format!("batch norm over {channels} channels cannot take {input:?}"))),
            },
            Layer::Activation(a) => {
                if let Activation::LeakyRelu { slope } = a {
                    if !(*slope > 0.0 && *slope < 1.0) {
                        return Err(Error::Spec(format!("leaky ReLU slope {slope} outside (0,1)")));
                    }
                }
                Ok(input.to_vec())
            }
            Layer::Reshape(dims) => {
                if dims.iter().product::<usize>() != input.iter().product::<usize>() || dims.contains(&0) {
                    return Err(Error::Spec(format!("cannot reshape {input:?} into {dims:?}")));
                }
                Ok(dims.clone())
            }
            Layer::Flatten => Ok(vec![input.iter().product()]),
            Layer::Dropout { p } => {
                if !(0.0..1.0).contains(p) {
                    return Err(Error::Spec(format!("dropout probability {p} outside [0,1)")));
                }
                Ok(input.to_vec())
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub name: String,
    pub layers: Vec<Layer>,
}

impl Block {
    pub fn new(name: impl Into<String>, layers: Vec<Layer>) -> Self {
        Self { name: name.into(), layers }
    }

    pub fn weight_layer(&self) -> Option<&Layer> {
        self.layers.iter().find(|l| l.weighted())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkSpec {
    /// Per-sample input shape, e.g. `[3, 64, 64]`.
    pub input_shape: Vec<usize>,
    pub blocks: Vec<Block>,
}

impl NetworkSpec {
    /// Per-sample output shape of every block, in order. Fails on any
    /// inconsistency between consecutive layers.
    pub fn block_shapes(&self) -> Result<Vec<Vec<usize>>> {
        let mut names = std::collections::BTreeSet::new();
        let mut shape = self.input_shape.clone();
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::Spec(format!("bad input shape {shape:?}")));
        }
        let mut out = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            if !names.insert(block.name.as_str()) {
                return Err(Error::Spec(format!("duplicate block name {}", block.name)));
            }
            let weighted = block.layers.iter().filter(|l| l.weighted()).count();
            let norms = block.layers.iter().filter(|l| matches!(l, Layer::BatchNorm { .. })).count();
            if weighted > 1 || norms > 1 {
                return Err(Error::Spec(format!("block {} has more than one weighted or norm layer", block.name)));
            }
            for layer in &block.layers {
                shape = layer.output_shape(&shape).map_err(|e| match e {
                    Error::Spec(m) => Error::Spec(format!("block {}: {m}", block.name)),
                    other => other,
                })?;
            }
            out.push(shape.clone());
        }
        Ok(out)
    }

    pub fn output_shape(&self) -> Result<Vec<usize>> {
        Ok(self.block_shapes()?.pop().unwrap_or_else(|| self.input_shape.clone()))
    }

    pub fn block_names(&self) -> Vec<String> {
        self.blocks.iter().map(|b| b.name.clone()).collect()
    }

    /// Shape of every parameter, keyed by name.
    pub fn param_shapes(&self) -> BTreeMap<String, Vec<usize>> {
        let mut out = BTreeMap::new();
        for block in &self.blocks {
            for layer in &block.layers {
                let name = &block.name;
                match *layer {
                    Layer::Conv2d { in_channels, out_channels, kernel, bias, .. } => {
                        out.insert(format!("{name}.weight"), vec![out_channels, in_channels, kernel, kernel]);
                        if bias {
                            out.insert(format!("{name}.bias"), vec![out_channels]);
                        }
                    }
                    Layer::ConvTranspose2d { in_channels, out_channels, kernel, .. } => {
                        out.insert(format!("{name}.weight"), vec![in_channels, out_channels, kernel, kernel]);
                    }
                    Layer::Linear { in_features, out_features } => {
                        out.insert(format!("{name}.weight"), vec![in_features, out_features]);
                        out.insert(format!("{name}.bias"), vec![out_features]);
                    }
                    Layer::BatchNorm { channels } => {
                        out.insert(format!("{name}.bn.gamma"), vec![channels]);
                        out.insert(format!("{name}.bn.beta"), vec![channels]);
                    }
                    _ => {}
                }
            }
        }
        out
    }
}

/// How the weights of conv, transposed-conv and linear layers are drawn.
/// Biases start at zero, batch-norm gamma at one and beta at zero.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Normal { std: f64 },
    /// Zero-mean Gaussian with variance `2 / (fan_in + fan_out)`.
    Xavier,
}

pub fn xavier_variance(fan_in: usize, fan_out: usize) -> f64 {
    2.0 / (fan_in + fan_out) as f64
}

/// Fresh parameters for one block. Each weight draws from its own stream,
/// keyed by its name, so adding a block never perturbs another's values.
pub fn init_block(block: &Block, init: Init, seed: u64) -> Result<TensorMap> {
    let spec = NetworkSpec { input_shape: vec![1], blocks: vec![block.clone()] };
    let mut out = TensorMap::new();
    for (name, shape) in spec.param_shapes() {
        let t = if name.ends_with(".weight") {
            let std = match init {
                Init::Normal { std } => std,
                Init::Xavier => {
                    let (fi, fo) = block.weight_layer().and_then(Layer::fans).expect("weighted block");
                    xavier_variance(fi, fo).sqrt()
                }
            };
            let mut r = rng::stream(seed, &format!("init/{name}"));
            Tensor::randn_with(&shape, 0.0, std, &mut r)?
        } else if name.ends_with(".bn.gamma") {
            Tensor::ones(&shape)?
        } else {
            Tensor::zeros(&shape)?
        };
        out.insert(name, t);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ForwardOpts {
    pub training: bool,
    pub dropout_seed: u64,
}

impl ForwardOpts {
    pub fn eval() -> Self {
        Self { training: false, dropout_seed: 0 }
    }

    pub fn train(dropout_seed: u64) -> Self {
        Self { training: true, dropout_seed }
    }
}

/// Parameter handles of one network inside one graph.
#[derive(Clone, Debug, Default)]
pub struct Bound {
    pub vars: BTreeMap<String, Var>,
}

/// Result of a forward pass: the final value, each block's output, and the
/// running statistics the pass would commit (training mode only).
#[derive(Debug)]
pub struct Forward {
    pub output: Var,
    pub taps: Vec<(String, Var)>,
    pub stats: BTreeMap<String, RunningStats>,
}

impl Forward {
    pub fn tap(&self, name: &str) -> Option<Var> {
        self.taps.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    pub spec: NetworkSpec,
    pub params: TensorMap,
    pub stats: BTreeMap<String, RunningStats>,
}

impl Network {
    pub fn new(spec: NetworkSpec, init: Init, seed: u64) -> Result<Self> {
        spec.block_shapes()?;
        let mut params = TensorMap::new();
        for block in &spec.blocks {
            params.extend(init_block(block, init, seed)?);
        }
        let stats = fresh_stats(&spec);
        Ok(Self { spec, params, stats })
    }

    /// Wraps existing parameters after checking that names and shapes match
    /// the spec exactly.
    pub fn from_parts(spec: NetworkSpec, params: TensorMap, stats: BTreeMap<String, RunningStats>) -> Result<Self> {
        spec.block_shapes()?;
        let expected = spec.param_shapes();
        for (name, shape) in &expected {
            match params.get(name) {
                None => return Err(Error::CheckpointIncompatible(format!("missing parameter {name}"))),
                Some(t) if t.shape() != shape.as_slice() => {
                    return Err(Error::CheckpointIncompatible(format!(
                        "parameter {name} has shape {:?}, expected {shape:?}",
                        t.shape()
                    )))
                }
                _ => {}
            }
        }
        if let Some(extra) = params.keys().find(|k| !expected.contains_key(*k)) {
            return Err(Error::CheckpointIncompatible(format!("unexpected parameter {extra}")));
        }
        for (name, s) in fresh_stats(&spec) {
            match stats.get(&name) {
                Some(have) if have.mean.len() == s.mean.len() && have.var.len() == s.var.len() => {}
                _ => return Err(Error::CheckpointIncompatible(format!("missing running stats for {name}"))),
            }
        }
        Ok(Self { spec, params, stats })
    }

    pub fn param_count(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Inserts every parameter into `g`, as a tracked leaf when `trainable`
    /// and as a constant otherwise.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|(k, t)| {
                let v = if trainable { g.param(t.clone()) } else { g.constant(t.clone()) };
                (k.clone(), v)
            })
            .collect();
        Bound { vars }
    }

    /// Runs every block on `x`. The network's own statistics are never
    /// mutated here; call [`Network::commit_stats`] with `Forward::stats`.
    pub fn forward(&self, g: &mut Graph, bound: &Bound, x: Var, opts: ForwardOpts) -> Result<Forward> {
        self.forward_until(g, bound, x, opts, None)
    }

    /// Like [`Network::forward`] but stops after block `last` if given.
    pub fn forward_until(
        &self,
        g: &mut Graph,
        bound: &Bound,
        x: Var,
        opts: ForwardOpts,
        last: Option<&str>,
    ) -> Result<Forward> {
        let shape = g.value(x).shape();
        if shape.len() != self.spec.input_shape.len() + 1 || shape[1..] != self.spec.input_shape[..] {
            return Err(Error::Shape(format!(
                "network expects N×{:?} input, got {shape:?}",
                self.spec.input_shape
            )));
        }
        let n = shape[0];
        let p = |name: String| -> Result<Var> {
            bound
                .vars
                .get(&name)
                .copied()
                .ok_or_else(|| Error::Contract(format!("parameter {name} is not bound")))
        };
        let mut h = x;
        let mut taps = Vec::new();
        let mut new_stats = BTreeMap::new();
        for block in &self.spec.blocks {
            let name = &block.name;
            for layer in &block.layers {
                h = match layer {
                    Layer::Conv2d { stride, pad, bias, .. } => {
                        let b = if *bias { Some(p(format!("{name}.bias"))?) } else { None };
                        g.conv2d(h, p(format!("{name}.weight"))?, b, *stride, *pad)?
                    }
                    Layer::ConvTranspose2d { stride, pad, .. } => {
                        g.conv_transpose2d(h, p(format!("{name}.weight"))?, *stride, *pad)?
                    }
                    Layer::Linear { .. } => g.linear(h, p(format!("{name}.weight"))?, p(format!("{name}.bias"))?)?,
                    Layer::BatchNorm { .. } => {
                        let mut stats = self.stats[name].clone();
                        let out = g.batch_norm2d(
                            h,
                            p(format!("{name}.bn.gamma"))?,
                            p(format!("{name}.bn.beta"))?,
                            &mut stats,
                            opts.training,
                            BN_EPSILON,
                        )?;
                        if opts.training {
                            new_stats.insert(name.clone(), stats);
                        }
                        out
                    }
                    Layer::Activation(a) => g.activation(h, *a)?,
                    Layer::Reshape(dims) => {
                        let mut s = vec![n];
                        s.extend_from_slice(dims);
                        g.reshape(h, &s)?
                    }
                    Layer::Flatten => {
                        let per: usize = g.value(h).shape()[1..].iter().product();
                        g.reshape(h, &[n, per])?
                    }
                    Layer::Dropout { p: rate } => {
                        g.dropout(h, *rate, opts.training, rng::derive_seed(opts.dropout_seed, name))?
                    }
                };
            }
            taps.push((name.clone(), h));
            if last == Some(name.as_str()) {
                break;
            }
        }
        Ok(Forward { output: h, taps, stats: new_stats })
    }

    pub fn commit_stats(&mut self, stats: BTreeMap<String, RunningStats>) {
        self.stats.extend(stats);
    }

    /// Eval-mode forward pass on a plain tensor.
    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let f = self.forward(&mut g, &bound, xv, ForwardOpts::eval())?;
        Ok(g.value(f.output).clone())
    }

    /// Eval-mode output of block `layer`.
    pub fn activation_of(&self, x: &Tensor, layer: &str) -> Result<Tensor> {
        if !self.spec.blocks.iter().any(|b| b.name == layer) {
            return Err(Error::Lookup { name: layer.to_string(), valid: self.spec.block_names() });
        }
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let f = self.forward_until(&mut g, &bound, xv, ForwardOpts::eval(), Some(layer))?;
        Ok(g.value(f.output).clone())
    }

    /// Parameters and running statistics, each name prefixed.
    pub fn write_into(&self, ckpt: &mut Checkpoint, prefix: &str) {
        ckpt.extend_prefixed(prefix, &self.params);
        for (name, s) in &self.stats {
            let c = s.mean.len();
            ckpt.insert(format!("{prefix}{name}.bn.running_mean"), Tensor::from_parts(vec![c], s.mean.clone()));
            ckpt.insert(format!("{prefix}{name}.bn.running_var"), Tensor::from_parts(vec![c], s.var.clone()));
        }
    }

    /// Inverse of [`Network::write_into`] for a known spec.
    pub fn read_from(spec: NetworkSpec, ckpt: &Checkpoint, prefix: &str) -> Result<Self> {
        let all = ckpt.strip_prefix(prefix);
        let mut params = TensorMap::new();
        let mut stats = BTreeMap::new();
        for (name, t) in all {
            if let Some(block) = name.strip_suffix(".bn.running_mean") {
                stats.entry(block.to_string()).or_insert_with(|| RunningStats::new(0)).mean = t.into_data();
            } else if let Some(block) = name.strip_suffix(".bn.running_var") {
                stats.entry(block.to_string()).or_insert_with(|| RunningStats::new(0)).var = t.into_data();
            } else {
                params.insert(name, t);
            }
        }
        Self::from_parts(spec, params, stats)
    }
}

fn fresh_stats(spec: &NetworkSpec) -> BTreeMap<String, RunningStats> {
    spec.blocks
        .iter()
        .filter_map(|b| {
            b.layers.iter().find_map(|l| match l {
                Layer::BatchNorm { channels } => Some((b.name.clone(), RunningStats::new(*channels))),
                _ => None,
            })
        })
        .collect()
}

/// Gradients of bound parameters, keyed by parameter name.
pub fn named_gradients(grads: &mut crate::tensor::Gradients, bound: &Bound) -> TensorMap {
    bound.vars.iter().filter_map(|(k, v)| grads.take(*v).map(|t| (k.clone(), t))).collect()
}

//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] owns every value produced while building a loss. Operations run
//! eagerly and, when at least one input requires a gradient, append a node to
//! the tape. Nodes are stored in creation order, which is a topological order,
//! so [`Graph::backward`] is a single reverse sweep.

use rand::RngExt;

use super::kernels::{self, ConvGeom};
use super::{rng, Tensor};
use crate::error::{Error, Result};

/// Batch-norm variance floor.
pub const BN_EPSILON: f64 = 1e-5;
/// Weight of the newest batch in the running statistics.
pub const BN_MOMENTUM: f64 = 0.1;

/// Handle to a value stored in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    LeakyRelu { slope: f64 },
    Relu,
    Tanh,
    Sigmoid,
}

impl Activation {
    fn validate(self) -> Result<()> {
        match self {
            Activation::LeakyRelu { slope } if !(slope > 0.0 && slope < 1.0) => Err(
                Error::InvalidParameter(format!("leaky ReLU slope must be in (0,1), got {slope}")),
            ),
            _ => Ok(()),
        }
    }

    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::LeakyRelu { slope } => {
                if x > 0.0 {
                    x
                } else {
                    slope * x
                }
            }
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => {
                if x >= 0.0 {
                    1.0 / (1.0 + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (1.0 + e)
                }
            }
        }
    }

    /// Derivative expressed through the input `x` and output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::LeakyRelu { slope } => {
                if x > 0.0 {
                    1.0
                } else {
                    slope
                }
            }
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - y * y,
            Activation::Sigmoid => y * (1.0 - y),
        }
    }
}

/// Per-channel running mean and (unbiased) variance of a batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }
}

#[derive(Debug)]
enum Op {
    Conv2d { stride: usize, pad: usize, cols: Option<Vec<f64>> },
    ConvTranspose2d { stride: usize, pad: usize },
    BatchNorm { xhat: Vec<f64>, inv_std: Vec<f64>, training: bool },
    Activation(Activation),
    Linear,
    Dropout { mask: Vec<f64> },
    SoftmaxCrossEntropy { probs: Vec<f64>, labels: Vec<usize> },
    BceMean { target: f64, eps: f64 },
    Reshape,
    Sum,
    Mul,
    Add,
}

#[derive(Debug)]
struct Node {
    op: Op,
    inputs: Vec<Var>,
    output: Var,
}

#[derive(Debug, Default)]
pub struct Graph {
    values: Vec<Tensor>,
    requires_grad: Vec<bool>,
    leaf: Vec<bool>,
    nodes: Vec<Node>,
}

/// Gradients of a scalar loss with respect to every leaf that requires one.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }

    /// Number of leaves that received a gradient.
    pub fn len(&self) -> usize {
        self.grads.iter().filter(|g| g.is_some()).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Writes softmax(row) into `out` and returns log Σ exp(row), both computed
/// after subtracting the row maximum.
fn softmax_into(row: &[f64], out: &mut [f64]) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let denom: f64 = row.iter().map(|v| (v - max).exp()).sum();
    for (o, v) in out.iter_mut().zip(row) {
        *o = (v - max).exp() / denom;
    }
    max + denom.ln()
}

/// Row-wise softmax of an N×K matrix of logits.
pub fn softmax_rows(logits: &Tensor) -> Result<Tensor> {
    let [n, k] = logits.dims2()?;
    let mut probs = vec![0.0; n * k];
    for (row, out) in logits.data().chunks(k).zip(probs.chunks_mut(k)) {
        softmax_into(row, out);
    }
    Ok(Tensor::from_parts(vec![n, k], probs))
}

fn sum_channels(x: &[f64], n: usize, c: usize, p: usize, ch: usize, f: impl Fn(usize, f64) -> f64) -> f64 {
    let mut acc = 0.0;
    for s in 0..n {
        let base = (s * c + ch) * p;
        for (i, v) in x[base..base + p].iter().enumerate() {
            acc += f(base + i, *v);
        }
    }
    acc
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn add_leaf(&mut self, t: Tensor, requires_grad: bool) -> Var {
        self.values.push(t);
        self.requires_grad.push(requires_grad);
        self.leaf.push(true);
        Var(self.values.len() - 1)
    }

    /// A leaf whose gradient will be reported by [`Graph::backward`].
    pub fn param(&mut self, t: Tensor) -> Var {
        self.add_leaf(t, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.add_leaf(t, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.values[v.0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.requires_grad[v.0]
    }

    /// Number of recorded operations.
    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    fn push(&mut self, op: Op, inputs: Vec<Var>, out: Tensor, name: &str) -> Result<Var> {
        if !out.is_finite() {
            return Err(Error::NonFinite(name.to_string()));
        }
        let tracked = inputs.iter().any(|v| self.requires_grad[v.0]);
        self.values.push(out);
        self.requires_grad.push(tracked);
        self.leaf.push(false);
        let output = Var(self.values.len() - 1);
        if tracked {
            self.nodes.push(Node { op, inputs, output });
        }
        Ok(output)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, bias: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let [n, c, h, wd] = self.value(x).dims4()?;
        let [o, i, kh, kw] = self.value(w).dims4()?;
        if stride == 0 {
            return Err(Error::InvalidParameter("conv2d stride must be positive".into()));
        }
        if kh != kw {
            return Err(Error::Shape(format!("conv2d kernel must be square, got {kh}x{kw}")));
        }
        if i != c {
            return Err(Error::Shape(format!(
                "conv2d input has {c} channels but weight expects {i}"
            )));
        }
        let (Some(oh), Some(ow)) = (
            ConvGeom::conv_out(h, kh, stride, pad),
            ConvGeom::conv_out(wd, kw, stride, pad),
        ) else {
            return Err(Error::Shape(format!(
                "conv2d kernel {kh} does not fit input {h}x{wd} with padding {pad}"
            )));
        };
        if let Some(b) = bias {
            if self.value(b).shape() != [o] {
                return Err(Error::Shape(format!(
                    "conv2d bias shape {:?} does not match {o} output channels",
                    self.value(b).shape()
                )));
            }
        }
        let g = ConvGeom { batch: n, in_channels: c, in_h: h, in_w: wd, kernel: kh, stride, pad, out_h: oh, out_w: ow };
        let (out, cols) = kernels::conv_forward(
            self.value(x).data(),
            self.value(w).data(),
            bias.map(|b| self.value(b).data()),
            o,
            &g,
        );
        let cols = self.requires_grad(w).then_some(cols);
        let mut inputs = vec![x, w];
        inputs.extend(bias);
        self.push(Op::Conv2d { stride, pad, cols }, inputs, Tensor::from_parts(vec![n, o, oh, ow], out), "conv2d")
    }

    /// Fractionally-strided convolution; `w` is laid out in×out×K×K and the
    /// operation is the adjoint of [`Graph::conv2d`] with the same weight.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let [n, c, h, wd] = self.value(x).dims4()?;
        let [i, o, kh, kw] = self.value(w).dims4()?;
        if stride == 0 {
            return Err(Error::InvalidParameter("transposed conv stride must be positive".into()));
        }
        if kh != kw {
            return Err(Error::Shape(format!("transposed conv kernel must be square, got {kh}x{kw}")));
        }
        if i != c {
            return Err(Error::Shape(format!(
                "transposed conv input has {c} channels but weight expects {i}"
            )));
        }
        let (Some(oh), Some(ow)) = (
            ConvGeom::transposed_out(h, kh, stride, pad),
            ConvGeom::transposed_out(wd, kw, stride, pad),
        ) else {
            return Err(Error::Shape(format!(
                "transposed conv with padding {pad} leaves no output for input {h}x{wd}"
            )));
        };
        let g = ConvGeom { batch: n, in_channels: o, in_h: oh, in_w: ow, kernel: kh, stride, pad, out_h: h, out_w: wd };
        let out = kernels::conv_transpose_forward(self.value(x).data(), self.value(w).data(), c, &g);
        self.push(
            Op::ConvTranspose2d { stride, pad },
            vec![x, w],
            Tensor::from_parts(vec![n, o, oh, ow], out),
            "conv_transpose2d",
        )
    }

    /// Per-channel batch normalization over N×C×H×W (or N×C) input.
    ///
    /// Training mode normalizes with the batch moments and folds them into
    /// `stats` with momentum [`BN_MOMENTUM`] (unbiased variance); eval mode
    /// normalizes with `stats` and leaves them untouched.
    pub fn batch_norm2d(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: &mut RunningStats,
        training: bool,
        eps: f64,
    ) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        let (n, c, p) = match shape.as_slice() {
            &[n, c] => (n, c, 1),
            &[n, c, h, w] => (n, c, h * w),
            s => return Err(Error::Shape(format!("batch norm expects rank 2 or 4, got {s:?}"))),
        };
        for (v, what) in [(gamma, "gamma"), (beta, "beta")] {
            if self.value(v).shape() != [c] {
                return Err(Error::Shape(format!(
                    "batch norm {what} shape {:?} does not match {c} channels",
                    self.value(v).shape()
                )));
            }
        }
        if stats.mean.len() != c || stats.var.len() != c {
            return Err(Error::Shape(format!("running stats do not cover {c} channels")));
        }
        if !(eps > 0.0) {
            return Err(Error::InvalidParameter(format!("batch norm epsilon must be positive, got {eps}")));
        }
        let m = n * p;
        if training && m < 2 {
            return Err(Error::DegenerateBatch(format!(
                "batch norm in training mode needs at least 2 values per channel, got {m}"
            )));
        }
        let xd = self.value(x).data();
        let gd = self.value(gamma).data();
        let bd = self.value(beta).data();
        let mut xhat = vec![0.0; xd.len()];
        let mut inv_std = vec![0.0; c];
        let mut out = vec![0.0; xd.len()];
        for ch in 0..c {
            let (mean, var) = if training {
                let mean = sum_channels(xd, n, c, p, ch, |_, v| v) / m as f64;
                let var = sum_channels(xd, n, c, p, ch, |_, v| (v - mean) * (v - mean)) / m as f64;
                stats.mean[ch] = (1.0 - BN_MOMENTUM) * stats.mean[ch] + BN_MOMENTUM * mean;
                let unbiased = var * m as f64 / (m - 1) as f64;
                stats.var[ch] = (1.0 - BN_MOMENTUM) * stats.var[ch] + BN_MOMENTUM * unbiased;
                (mean, var)
            } else {
                (stats.mean[ch], stats.var[ch])
            };
            let is = 1.0 / (var + eps).sqrt();
            inv_std[ch] = is;
            for s in 0..n {
                let base = (s * c + ch) * p;
                for k in base..base + p {
                    let h = (xd[k] - mean) * is;
                    xhat[k] = h;
                    out[k] = gd[ch] * h + bd[ch];
                }
            }
        }
        self.push(
            Op::BatchNorm { xhat, inv_std, training },
            vec![x, gamma, beta],
            Tensor::from_parts(shape, out),
            "batch_norm2d",
        )
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Result<Var> {
        kind.validate()?;
        let t = self.value(x);
        let out: Vec<f64> = t.data().iter().map(|&v| kind.apply(v)).collect();
        let shape = t.shape().to_vec();
        self.push(Op::Activation(kind), vec![x], Tensor::from_parts(shape, out), "activation")
    }

    /// `x · w + b` with `x` N×D, `w` D×M, `b` M.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let [n, d] = self.value(x).dims2()?;
        let [d2, m] = self.value(w).dims2()?;
        if d != d2 {
            return Err(Error::Shape(format!("linear input has {d} features, weight expects {d2}")));
        }
        if self.value(b).shape() != [m] {
            return Err(Error::Shape(format!(
                "linear bias shape {:?} does not match {m} outputs",
                self.value(b).shape()
            )));
        }
        let mut out = vec![0.0; n * m];
        kernels::gemm(n, d, m, self.value(x).data(), false, self.value(w).data(), false, &mut out, false);
        let bd = self.value(b).data();
        out.chunks_mut(m).for_each(|row| row.iter_mut().zip(bd).for_each(|(v, b)| *v += b));
        self.push(Op::Linear, vec![x, w, b], Tensor::from_parts(vec![n, m], out), "linear")
    }

    /// Inverted dropout: survivors are scaled by 1/(1-p). Identity when not
    /// training or when `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f64, training: bool, seed: u64) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::InvalidParameter(format!("dropout probability must be in [0,1), got {p}")));
        }
        if !training || p == 0.0 {
            return Ok(x);
        }
        let mut rng = rng::stream(seed, "dropout");
        let scale = 1.0 / (1.0 - p);
        let t = self.value(x);
        let mask: Vec<f64> = (0..t.len())
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { scale })
            .collect();
        let out: Vec<f64> = t.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let shape = t.shape().to_vec();
        self.push(Op::Dropout { mask }, vec![x], Tensor::from_parts(shape, out), "dropout")
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let [n, k] = self.value(logits).dims2()?;
        if labels.len() != n {
            return Err(Error::Label(format!("{} labels for {n} rows of logits", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Label(format!("label {bad} out of range for {k} classes")));
        }
        let z = self.value(logits).data();
        let mut probs = vec![0.0; n * k];
        let mut loss = 0.0;
        for (r, &label) in labels.iter().enumerate() {
            let row = &z[r * k..(r + 1) * k];
            let log_norm = softmax_into(row, &mut probs[r * k..(r + 1) * k]);
            loss += log_norm - row[label];
        }
        loss /= n as f64;
        self.push(
            Op::SoftmaxCrossEntropy { probs, labels: labels.to_vec() },
            vec![logits],
            Tensor::scalar(loss),
            "softmax_cross_entropy",
        )
    }

    /// Mean binary cross entropy of probabilities `p` against a constant
    /// target in `{0, 1}`; probabilities are clamped to `[eps, 1 - eps]`.
    pub fn bce_mean(&mut self, p: Var, target: f64, eps: f64) -> Result<Var> {
        if target != 0.0 && target != 1.0 {
            return Err(Error::InvalidParameter(format!("binary target must be 0 or 1, got {target}")));
        }
        let pd = self.value(p).data();
        let n = pd.len() as f64;
        let loss = -pd
            .iter()
            .map(|&v| {
                let c = v.clamp(eps, 1.0 - eps);
                target * c.ln() + (1.0 - target) * (1.0 - c).ln()
            })
            .sum::<f64>()
            / n;
        self.push(Op::BceMean { target, eps }, vec![p], Tensor::scalar(loss), "bce_mean")
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        self.push(Op::Reshape, vec![x], t, "reshape")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        self.push(Op::Sum, vec![x], Tensor::scalar(s), "sum")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::Shape(format!("mul of {:?} and {:?}", ta.shape(), tb.shape())));
        }
        let out = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let shape = ta.shape().to_vec();
        self.push(Op::Mul, vec![a, b], Tensor::from_parts(shape, out), "mul")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::Shape(format!("add of {:?} and {:?}", ta.shape(), tb.shape())));
        }
        let out = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let shape = ta.shape().to_vec();
        self.push(Op::Add, vec![a, b], Tensor::from_parts(shape, out), "add")
    }

    /// Reverse sweep from a scalar `loss`. Consumes the tape; gradients of
    /// intermediate values are released as soon as they have been propagated.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        if self.values[loss.0].len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.values[loss.0].shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.values.len()];
        if self.requires_grad[loss.0] {
            grads[loss.0] = Some(vec![1.0]);
        }
        for node in self.nodes.iter().rev() {
            let Some(gy) = grads[node.output.0].take() else {
                continue;
            };
            let contributions = self.node_backward(node, &gy);
            for (input, g) in node.inputs.iter().zip(contributions) {
                let Some(g) = g else { continue };
                match &mut grads[input.0] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    slot => *slot = Some(g),
                }
            }
        }
        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                g.filter(|_| self.leaf[i] && self.requires_grad[i])
                    .map(|g| Tensor::from_parts(self.values[i].shape().to_vec(), g))
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn node_backward(&self, node: &Node, gy: &[f64]) -> Vec<Option<Vec<f64>>> {
        let want = |i: usize| self.requires_grad[node.inputs[i].0];
        let val = |i: usize| &self.values[node.inputs[i].0];
        let out = &self.values[node.output.0];
        match &node.op {
            Op::Conv2d { stride, pad, cols } => {
                let [n, c, h, w] = val(0).dims4().expect("conv input rank");
                let [o, _, k, _] = val(1).dims4().expect("conv weight rank");
                let [_, _, oh, ow] = out.dims4().expect("conv output rank");
                let g = ConvGeom { batch: n, in_channels: c, in_h: h, in_w: w, kernel: k, stride: *stride, pad: *pad, out_h: oh, out_w: ow };
                let has_bias = node.inputs.len() == 3;
                let grads = kernels::conv_backward(
                    val(0).data(),
                    cols.as_deref(),
                    val(1).data(),
                    gy,
                    o,
                    &g,
                    (want(0), want(1), has_bias && want(2)),
                );
                let mut res = vec![grads.input, grads.weight];
                if has_bias {
                    res.push(grads.bias);
                }
                res
            }
            Op::ConvTranspose2d { stride, pad } => {
                let [n, c, h, w] = val(0).dims4().expect("tconv input rank");
                let [_, o, k, _] = val(1).dims4().expect("tconv weight rank");
                let [_, _, oh, ow] = out.dims4().expect("tconv output rank");
                let g = ConvGeom { batch: n, in_channels: o, in_h: oh, in_w: ow, kernel: k, stride: *stride, pad: *pad, out_h: h, out_w: w };
                let (dx, dw) = kernels::conv_transpose_backward(val(0).data(), val(1).data(), gy, c, &g, (want(0), want(1)));
                vec![dx, dw]
            }
            Op::BatchNorm { xhat, inv_std, training } => {
                let shape = val(0).shape();
                let (n, c, p) = match *shape {
                    [n, c] => (n, c, 1),
                    [n, c, h, w] => (n, c, h * w),
                    _ => unreachable!("batch norm rank checked in forward"),
                };
                let m = (n * p) as f64;
                let gamma = val(1).data();
                let mut dx = want(0).then(|| vec![0.0; gy.len()]);
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for ch in 0..c {
                    let sum_dy = sum_channels(gy, n, c, p, ch, |_, v| v);
                    let sum_dy_xhat = sum_channels(gy, n, c, p, ch, |k, v| v * xhat[k]);
                    dgamma[ch] = sum_dy_xhat;
                    dbeta[ch] = sum_dy;
                    if let Some(dx) = dx.as_mut() {
                        let scale = gamma[ch] * inv_std[ch];
                        for s in 0..n {
                            let base = (s * c + ch) * p;
                            for k in base..base + p {
                                dx[k] = if *training {
                                    scale * (gy[k] - sum_dy / m - xhat[k] * sum_dy_xhat / m)
                                } else {
                                    scale * gy[k]
                                };
                            }
                        }
                    }
                }
                vec![dx, want(1).then_some(dgamma), want(2).then_some(dbeta)]
            }
            Op::Activation(kind) => {
                let dx = val(0)
                    .data()
                    .iter()
                    .zip(out.data())
                    .zip(gy)
                    .map(|((&x, &y), &g)| g * kind.derivative(x, y))
                    .collect();
                vec![Some(dx)]
            }
            Op::Linear => {
                let [n, d] = val(0).dims2().expect("linear input rank");
                let [_, m] = val(1).dims2().expect("linear weight rank");
                let dx = want(0).then(|| {
                    let mut dx = vec![0.0; n * d];
                    kernels::gemm(n, m, d, gy, false, val(1).data(), true, &mut dx, false);
                    dx
                });
                let dw = want(1).then(|| {
                    let mut dw = vec![0.0; d * m];
                    kernels::gemm(d, n, m, val(0).data(), true, gy, false, &mut dw, false);
                    dw
                });
                let db = want(2).then(|| {
                    let mut db = vec![0.0; m];
                    gy.chunks(m).for_each(|row| db.iter_mut().zip(row).for_each(|(a, b)| *a += b));
                    db
                });
                vec![dx, dw, db]
            }
            Op::Dropout { mask } => vec![Some(gy.iter().zip(mask).map(|(g, m)| g * m).collect())],
            Op::SoftmaxCrossEntropy { probs, labels } => {
                let k = probs.len() / labels.len();
                let scale = gy[0] / labels.len() as f64;
                let mut dz: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (r, &l) in labels.iter().enumerate() {
                    dz[r * k + l] -= scale;
                }
                vec![Some(dz)]
            }
            Op::BceMean { target, eps } => {
                let pd = val(0).data();
                let n = pd.len() as f64;
                let dp = pd
                    .iter()
                    .map(|&p| {
                        if p <= *eps || p >= 1.0 - eps {
                            0.0
                        } else {
                            -gy[0] / n * (target / p - (1.0 - target) / (1.0 - p))
                        }
                    })
                    .collect();
                vec![Some(dp)]
            }
            Op::Reshape => vec![Some(gy.to_vec())],
            Op::Sum => vec![Some(vec![gy[0]; val(0).len()])],
            Op::Mul => {
                let da = want(0).then(|| gy.iter().zip(val(1).data()).map(|(g, b)| g * b).collect());
                let db = want(1).then(|| gy.iter().zip(val(0).data()).map(|(g, a)| g * a).collect());
                vec![da, db]
            }
            Op::Add => vec![want(0).then(|| gy.to_vec()), want(1).then(|| gy.to_vec())],
        }
    }
}

//! Dense f64 tensors, reverse-mode differentiation and the layer kernels the
//! convolutional GAN needs.

mod adam;
mod checkpoint;
mod gradcheck;
mod graph;
pub(crate) mod kernels;
pub mod rng;

use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

pub use adam::{adam_step, AdamConfig, AdamState};
pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use gradcheck::finite_difference_gradient;
pub use graph::{softmax_rows, Activation, Gradients, Graph, RunningStats, Var, BN_EPSILON, BN_MOMENTUM};

/// Named tensors in a deterministic (sorted) order.
pub type TensorMap = std::collections::BTreeMap<String, Tensor>;

/// Row-major n-dimensional array of 64-bit floats.
///
/// Gradient bookkeeping lives in [`Graph`]; a `Tensor` is a plain value.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() {
        return Err(Error::InvalidShape("shape must have at least one dimension".into()));
    }
    if let Some(pos) = shape.iter().position(|&d| d == 0) {
        return Err(Error::InvalidShape(format!(
            "dimension {pos} of {shape:?} is zero"
        )));
    }
    Ok(shape.iter().product())
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let len = check_shape(&shape)?;
        if len != data.len() {
            return Err(Error::InvalidShape(format!(
                "shape {shape:?} holds {len} values but {} were given",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    /// Builds a tensor whose shape is already known to be valid.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        debug_assert!(!shape.is_empty() && shape.iter().all(|&d| d > 0));
        Self { shape, data }
    }

    pub fn full(shape: &[usize], value: f64) -> Result<Self> {
        let len = check_shape(shape)?;
        Ok(Self {
            shape: shape.to_vec(),
            data: vec![value; len],
        })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Result<Self> {
        Self::full(shape, 1.0)
    }

    pub fn scalar(value: f64) -> Self {
        Self::from_parts(vec![1], vec![value])
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Result<Self> {
        let len = check_shape(shape)?;
        Ok(Self {
            shape: shape.to_vec(),
            data: (0..len).map(&mut f).collect(),
        })
    }

    /// Gaussian draws from the seeded stream `"randn"`; same seed, same bits.
    pub fn randn(shape: &[usize], mean: f64, std: f64, seed: u64) -> Result<Self> {
        let mut rng = rng::stream(seed, "randn");
        Self::randn_with(shape, mean, std, &mut rng)
    }

    pub(crate) fn randn_with(
        shape: &[usize],
        mean: f64,
        std: f64,
        rng: &mut rng::StreamRng,
    ) -> Result<Self> {
        if !(std > 0.0 && std.is_finite()) || !mean.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "normal distribution needs finite mean and std > 0, got mean={mean} std={std}"
            )));
        }
        let len = check_shape(shape)?;
        let normal = Normal::new(mean, std)
            .map_err(|e| Error::InvalidParameter(format!("normal distribution: {e}")))?;
        Ok(Self {
            shape: shape.to_vec(),
            data: (0..len).map(|_| normal.sample(rng)).collect(),
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        match self.data.as_slice() {
            [v] => Ok(*v),
            _ => Err(Error::Contract(format!(
                "item() on tensor of shape {:?}",
                self.shape
            ))),
        }
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        let len = check_shape(shape)?;
        if len != self.data.len() {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: self.data,
        })
    }

    /// Dimensions of an NCHW tensor.
    pub fn dims4(&self) -> Result<[usize; 4]> {
        match self.shape.as_slice() {
            &[n, c, h, w] => Ok([n, c, h, w]),
            s => Err(Error::Shape(format!("expected a rank-4 tensor, got {s:?}"))),
        }
    }

    pub fn dims2(&self) -> Result<[usize; 2]> {
        match self.shape.as_slice() {
            &[r, c] => Ok([r, c]),
            s => Err(Error::Shape(format!("expected a rank-2 tensor, got {s:?}"))),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::Shape(format!(
                "dot of {:?} and {:?}",
                self.shape, other.shape
            )));
        }
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    /// Rows `[start, start + count)` along the leading axis.
    pub fn slice_outer(&self, start: usize, count: usize) -> Result<Self> {
        let outer = self.shape[0];
        if count == 0 || start + count > outer {
            return Err(Error::Shape(format!(
                "rows {start}..{} out of range for leading dimension {outer}",
                start + count
            )));
        }
        let inner: usize = self.shape[1..].iter().product();
        let mut shape = self.shape.clone();
        shape[0] = count;
        Ok(Self::from_parts(
            shape,
            self.data[start * inner..(start + count) * inner].to_vec(),
        ))
    }

    /// Concatenates tensors along the leading axis; trailing dims must agree.
    pub fn stack_outer(parts: &[&Tensor]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("stack of zero tensors".into()))?;
        let tail = &first.shape[1..];
        let mut data = Vec::with_capacity(parts.iter().map(|t| t.len()).sum());
        let mut outer = 0;
        for t in parts {
            if &t.shape[1..] != tail {
                return Err(Error::Shape(format!(
                    "cannot stack {:?} with {:?}",
                    first.shape, t.shape
                )));
            }
            outer += t.shape[0];
            data.extend_from_slice(&t.data);
        }
        let mut shape = first.shape.clone();
        shape[0] = outer;
        Ok(Self::from_parts(shape, data))
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

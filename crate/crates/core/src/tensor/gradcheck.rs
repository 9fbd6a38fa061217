use super::Tensor;
use crate::error::{Error, Result};

/// Central-difference estimate of the gradient of a scalar function.
pub fn finite_difference_gradient<F>(mut f: F, x: &Tensor, h: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    if !(h > 0.0) {
        return Err(Error::InvalidParameter(format!("step size must be positive, got {h}")));
    }
    let mut probe = x.clone();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let down = f(&probe)?;
        probe.data_mut()[i] = orig;
        grad.push((up - down) / (2.0 * h));
    }
    Tensor::new(x.shape().to_vec(), grad)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_has_unit_gradient() {
        let x = Tensor::randn(&[3, 4], 0.0, 2.0, 1).unwrap();
        let g = finite_difference_gradient(|t| Ok(t.sum()), &x, 1e-5).unwrap();
        assert!(g.data().iter().all(|v| (v - 1.0).abs() < 1e-9));
    }

    #[test]
    fn square_of_first_element() {
        let x = Tensor::new(vec![2], vec![3.0, -1.0]).unwrap();
        let g = finite_difference_gradient(|t| Ok(t.data()[0] * t.data()[0]), &x, 1e-5).unwrap();
        assert!((g.data()[0] - 6.0).abs() < 1e-6);
        assert!(g.data()[1].abs() < 1e-12);
    }

    #[test]
    fn rejects_non_positive_step() {
        let x = Tensor::scalar(1.0);
        assert!(finite_difference_gradient(|t| Ok(t.sum()), &x, 0.0).is_err());
    }
}

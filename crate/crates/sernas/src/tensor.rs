//! Dense n-dimensional tensor: the substrate of all numerics.
//!
//! Values are stored row-major in 32-bit floats. Reductions inside the
//! execution engine accumulate in 64-bit; see `tape`.

use crate::error::{Error, Result};
use rand::RngExt;

/// N-dimensional value with an optional gradient role.
///
/// `requires_grad` marks leaves that should receive gradients when the
/// tensor is registered as a parameter. Plain data tensors leave it false.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
    pub requires_grad: bool,
}

impl Tensor {
    /// Build from shape and row-major data. Fails unless
    /// `product(shape) == data.len()` and every dimension is positive.
    pub fn from_vec(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::ShapeMismatch {
                context: "tensor".into(),
                detail: format!("zero dimension in shape {shape:?}"),
            });
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::ShapeMismatch {
                context: "tensor".into(),
                detail: format!(
                    "shape {shape:?} implies {numel} elements, data has {}",
                    data.len()
                ),
            });
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
            requires_grad: false,
        }
    }

    pub fn filled(shape: &[usize], value: f32) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
            requires_grad: false,
        }
    }

    pub fn scalar(value: f32) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
            requires_grad: false,
        }
    }

    /// Uniform init in [-bound, +bound].
    pub fn uniform<R: rand::Rng>(rng: &mut R, shape: &[usize], bound: f32) -> Self {
        let numel: usize = shape.iter().product();
        let data = (0..numel)
            .map(|_| rng.random_range(-bound..=bound))
            .collect();
        Tensor {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
        }
    }

    /// Default parameter init: uniform in [-1/sqrt(fan_in), +1/sqrt(fan_in)].
    pub fn init_fan_in<R: rand::Rng>(rng: &mut R, shape: &[usize], fan_in: usize) -> Self {
        let bound = 1.0 / (fan_in.max(1) as f32).sqrt();
        Tensor::uniform(rng, shape, bound)
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// First non-finite index, if any.
    pub fn first_non_finite(&self) -> Option<usize> {
        self.data.iter().position(|v| !v.is_finite())
    }

    pub fn ensure_finite(&self, context: &str) -> Result<()> {
        match self.first_non_finite() {
            Some(index) => Err(Error::NonFinite {
                context: context.to_string(),
                index,
            }),
            None => Ok(()),
        }
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64).collect()
    }

    pub fn from_f64(shape: Vec<usize>, data: &[f64]) -> Result<Self> {
        Tensor::from_vec(shape, data.iter().map(|&v| v as f32).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn from_vec_checks_numel() {
        assert!(Tensor::from_vec(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::from_vec(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::from_vec(vec![2, 0], vec![]).is_err());
    }

    #[test]
    fn finite_check_reports_first_bad_index() {
        let mut t = Tensor::zeros(&[4]);
        t.data_mut()[2] = f32::NAN;
        assert_eq!(t.first_non_finite(), Some(2));
        let err = t.ensure_finite("node conv2d#3").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("conv2d#3") && msg.contains('2'), "{msg}");
    }

    #[test]
    fn fan_in_init_is_bounded_and_seeded() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let t = Tensor::init_fan_in(&mut rng, &[16, 16], 16);
        let bound = 0.25 + 1e-6;
        assert!(t.data().iter().all(|v| v.abs() <= bound));
        let mut rng2 = ChaCha8Rng::seed_from_u64(7);
        let t2 = Tensor::init_fan_in(&mut rng2, &[16, 16], 16);
        assert_eq!(t, t2);
    }
}

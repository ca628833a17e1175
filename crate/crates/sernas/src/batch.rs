//! Small helpers for assembling per-example tensors into batches.

use rand::RngExt;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A labeled split: one feature tensor per example plus its class index.
#[derive(Debug, Clone, Default)]
pub struct LabeledExamples {
    pub features: Vec<Tensor>,
    pub labels: Vec<usize>,
}

impl LabeledExamples {
    pub fn push(&mut self, feature: Tensor, label: usize) {
        self.features.push(feature);
        self.labels.push(label);
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn ensure_nonempty(&self, what: &str) -> Result<()> {
        if self.is_empty() {
            return Err(Error::InvalidData(format!("{what} split is empty")));
        }
        Ok(())
    }
}

/// Stack same-shaped examples into one batch tensor with a leading batch
/// axis.
pub fn stack(examples: &[&Tensor]) -> Result<Tensor> {
    let first = examples
        .first()
        .ok_or_else(|| Error::InvalidData("empty batch".into()))?;
    let mut shape = vec![examples.len()];
    shape.extend_from_slice(first.shape());
    let mut data = Vec::with_capacity(first.numel() * examples.len());
    for t in examples {
        if t.shape() != first.shape() {
            return Err(Error::ShapeMismatch {
                context: "stack".into(),
                detail: format!("{:?} vs {:?}", first.shape(), t.shape()),
            });
        }
        data.extend_from_slice(t.data());
    }
    Tensor::from_vec(shape, data)
}

pub fn label_tensor(labels: &[usize]) -> Tensor {
    Tensor::from_vec(vec![labels.len()], labels.iter().map(|&l| l as f32).collect())
        .expect("labels shape")
}

/// Deterministic index order for one epoch: a seeded Fisher-Yates shuffle.
pub fn epoch_order<R: rand::Rng>(n: usize, rng: &mut R) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    order
}

/// Split indices into contiguous batches of at most `batch_size`.
pub fn batch_ranges(n: usize, batch_size: usize) -> Vec<std::ops::Range<usize>> {
    assert!(batch_size > 0);
    (0..n.div_ceil(batch_size))
        .map(|b| b * batch_size..((b + 1) * batch_size).min(n))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stack_builds_batch_axis() {
        let a = Tensor::filled(&[2, 3], 1.0);
        let b = Tensor::filled(&[2, 3], 2.0);
        let batch = stack(&[&a, &b]).unwrap();
        assert_eq!(batch.shape(), &[2, 2, 3]);
        assert_eq!(batch.data()[0], 1.0);
        assert_eq!(batch.data()[6], 2.0);
    }

    #[test]
    fn stack_rejects_ragged_shapes() {
        let a = Tensor::filled(&[2], 1.0);
        let b = Tensor::filled(&[3], 2.0);
        assert!(stack(&[&a, &b]).is_err());
    }

    #[test]
    fn batch_ranges_cover_everything_once() {
        let ranges = batch_ranges(10, 4);
        assert_eq!(ranges, vec![0..4, 4..8, 8..10]);
    }
}

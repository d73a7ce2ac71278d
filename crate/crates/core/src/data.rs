//! Labeled image sets shared by training, attacks and defenses.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Images as one `[N, H, W, C]` tensor plus integer class labels.
#[derive(Debug, Clone)]
pub struct LabeledImages {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl LabeledImages {
    pub fn new(images: Tensor, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if images.rank() != 4 || images.shape()[0] != labels.len() {
            return Err(Error::ShapeMismatch {
                op: "labeled_images",
                lhs: images.shape().to_vec(),
                rhs: vec![labels.len()],
            });
        }
        for &l in &labels {
            if l >= num_classes {
                return Err(Error::LabelOutOfRange { label: l, num_classes });
            }
        }
        Ok(LabeledImages { images, labels, num_classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Pixels per sample.
    pub fn sample_len(&self) -> usize {
        self.images.len() / self.len().max(1)
    }

    pub fn image_dims(&self) -> (usize, usize, usize) {
        let s = self.images.shape();
        (s[1], s[2], s[3])
    }

    /// Copy one image as an `[H, W, C]` tensor.
    pub fn image(&self, i: usize) -> Tensor {
        let n = self.sample_len();
        let data = self.images.data()[i * n..(i + 1) * n].to_vec();
        let s = self.images.shape();
        Tensor::new(vec![s[1], s[2], s[3]], data).expect("image slice")
    }

    /// Gather a subset by sample indices.
    pub fn subset(&self, indices: &[usize]) -> LabeledImages {
        let n = self.sample_len();
        let s = self.images.shape();
        let mut data = Vec::with_capacity(indices.len() * n);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(&self.images.data()[i * n..(i + 1) * n]);
            labels.push(self.labels[i]);
        }
        LabeledImages {
            images: Tensor::new(vec![indices.len(), s[1], s[2], s[3]], data).expect("subset"),
            labels,
            num_classes: self.num_classes,
        }
    }

    /// Batch of images `[B, H, W, C]` with labels, by precomputed order.
    pub fn batch(&self, order: &[usize], start: usize, size: usize) -> (Tensor, Vec<usize>) {
        let end = (start + size).min(order.len());
        let idx = &order[start..end];
        let sub = self.subset(idx);
        (sub.images, sub.labels)
    }

    /// Deterministic shuffled order for an epoch.
    pub fn epoch_order(&self, seed: u64, epoch: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        order.shuffle(&mut rng);
        order
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> LabeledImages {
        let images = Tensor::new(vec![3, 2, 2, 1], (0..12).map(|x| x as f64).collect()).unwrap();
        LabeledImages::new(images, vec![0, 1, 0], 2).unwrap()
    }

    #[test]
    fn subset_gathers_rows() {
        let d = tiny();
        let s = d.subset(&[2, 0]);
        assert_eq!(s.labels, vec![0, 0]);
        assert_eq!(s.images.data()[0..4], [8.0, 9.0, 10.0, 11.0]);
    }

    #[test]
    fn epoch_order_is_deterministic() {
        let images = Tensor::zeros(vec![20, 2, 2, 1]);
        let d = LabeledImages::new(images, vec![0; 20], 2).unwrap();
        assert_eq!(d.epoch_order(7, 3), d.epoch_order(7, 3));
        assert_ne!(d.epoch_order(7, 3), d.epoch_order(7, 4));
    }

    #[test]
    fn label_range_checked() {
        let images = Tensor::zeros(vec![1, 2, 2, 1]);
        assert!(LabeledImages::new(images, vec![5], 2).is_err());
    }
}

//! Deterministic synthetic classification task: each class is a thick
//! oriented bar through the image center plus pixel noise. The bottom-right
//! trigger footprint region is masked out of every sample so no class
//! pattern ever occupies it.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::LabeledImages;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Side length of the region kept clear for the trigger.
const MASKED_CORNER: usize = 6;

/// Generate `size` samples over `classes` visually distinct bar patterns at
/// `dim x dim x 1`. Same seed, same bits.
pub fn synth_dataset(classes: usize, size: usize, dim: usize, seed: u64) -> Result<LabeledImages> {
    if classes < 2 {
        return Err(Error::Config(format!("need at least 2 classes, got {classes}")));
    }
    if dim < 8 {
        return Err(Error::Config(format!("dim {dim} too small")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(size * dim * dim);
    let mut labels = Vec::with_capacity(size);
    let center = (dim as f64 - 1.0) / 2.0;
    let thickness = dim as f64 / 8.0;

    for i in 0..size {
        let class = i % classes;
        let angle = std::f64::consts::PI * class as f64 / classes as f64;
        let (dirx, diry) = (angle.cos(), angle.sin());
        let jitter: f64 = rng.random_range(-0.5..0.5);
        let ink: f64 = rng.random_range(0.75..1.0);
        for row in 0..dim {
            for col in 0..dim {
                let in_corner = row >= dim - MASKED_CORNER && col >= dim - MASKED_CORNER;
                if in_corner {
                    data.push(0.0);
                    continue;
                }
                // distance from pixel to the line through the (jittered) center
                let px = col as f64 - center - jitter;
                let py = row as f64 - center - jitter;
                let dist = (px * diry - py * dirx).abs();
                let lit = if dist < thickness { ink } else { 0.0 };
                let noise: f64 = rng.random_range(0.0..0.08);
                data.push((lit + noise).min(1.0));
            }
        }
        labels.push(class);
    }
    LabeledImages::new(Tensor::new(vec![size, dim, dim, 1], data)?, labels, classes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_is_bit_identical() {
        let a = synth_dataset(4, 64, 16, 9).unwrap();
        let b = synth_dataset(4, 64, 16, 9).unwrap();
        assert_eq!(a.images, b.images);
        assert_eq!(a.labels, b.labels);
    }

    #[test]
    fn trigger_corner_is_masked() {
        let d = synth_dataset(4, 32, 16, 1).unwrap();
        for i in 0..d.len() {
            let img = d.image(i);
            for row in 10..16 {
                for col in 10..16 {
                    assert_eq!(img.data()[row * 16 + col], 0.0, "sample {i} pixel ({row},{col})");
                }
            }
        }
    }

    #[test]
    fn classes_cycle_evenly() {
        let d = synth_dataset(4, 40, 16, 2).unwrap();
        for k in 0..4 {
            assert_eq!(d.labels.iter().filter(|&&l| l == k).count(), 10);
        }
    }

    #[test]
    fn too_few_classes_is_rejected() {
        assert!(synth_dataset(1, 10, 16, 0).is_err());
    }

    #[test]
    fn mlp_learns_it_quickly() {
        use crate::nn::{train_clean, Model, Optimizer};
        use crate::tensor::Precision;
        let train = synth_dataset(4, 512, 16, 3).unwrap();
        let mut model = Model::mlp(&[16, 16, 1], 4, Precision::F32, 1).unwrap();
        let mut opt = Optimizer::adam(5e-4);
        let log = train_clean(&mut model, &train, 5, 32, &mut opt, Some(&train), 0).unwrap();
        let cda = *log.epoch_cda.last().unwrap();
        assert!(cda >= 0.99, "mlp cda {cda}");
    }

    #[test]
    fn mini_cnn_reaches_target_within_five_epochs() {
        use crate::nn::{train_clean, Model, Optimizer};
        use crate::tensor::Precision;
        let train = synth_dataset(4, 512, 16, 3).unwrap();
        let test = synth_dataset(4, 128, 16, 4).unwrap();
        let mut model = Model::mini_cnn(&[16, 16, 1], 4, Precision::F32, 1).unwrap();
        let mut opt = Optimizer::adam(5e-4);
        let log = train_clean(&mut model, &train, 5, 32, &mut opt, Some(&test), 0).unwrap();
        let cda = *log.epoch_cda.last().unwrap();
        assert!(cda >= 0.99, "mini-cnn cda {cda}");
    }
}

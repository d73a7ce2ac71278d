//! Input-blend entropy screening: superimpose an input with random clean
//! images and measure the prediction entropy of the blends. A dominating
//! trigger keeps predictions consistent (low entropy); clean inputs produce
//! high-entropy mixtures.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::attack::TriggerSpec;
use crate::data::LabeledImages;
use crate::defense::ModelRef;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct StripConfig {
    /// Number of perturbed replicas per input.
    pub replicas: usize,
    /// Pixelwise mean-blend coefficient.
    pub blend: f64,
    /// Clean-distribution percentile defining the detection boundary.
    pub boundary_percentile: f64,
    pub seed: u64,
}

impl Default for StripConfig {
    fn default() -> Self {
        StripConfig { replicas: 20, blend: 0.5, boundary_percentile: 0.01, seed: 17 }
    }
}

/// Entropy distributions of a probe set with and without the trigger, and
/// the detection statistics at the clean-percentile boundary.
#[derive(Debug, Clone, serde::Serialize)]
pub struct StripResult {
    pub clean_entropies: Vec<f64>,
    pub trigger_entropies: Vec<f64>,
    pub boundary: f64,
    /// Clean inputs falling below the boundary.
    pub false_rejection_rate: f64,
    /// Trigger inputs passing above the boundary.
    pub false_acceptance_rate: f64,
    /// Trigger inputs below the boundary (the detection power).
    pub separation: f64,
}

/// Mean Shannon entropy (nats) of the model's softmax over `n` mean-blend
/// replicas of `input` with distinct random pool images.
pub fn strip_score(
    model: ModelRef,
    input: &Tensor,
    pool: &LabeledImages,
    n: usize,
    blend: f64,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    if pool.len() < n {
        return Err(Error::Config(format!(
            "perturbation pool has {} images, need at least {n}",
            pool.len()
        )));
    }
    let picks = sample(rng, pool.len(), n);
    let per = input.len();
    let mut batch = Vec::with_capacity(n * per);
    for pick in picks.iter() {
        let other = pool.image(pick);
        for (a, b) in input.data().iter().zip(other.data()) {
            batch.push(blend * a + (1.0 - blend) * b);
        }
    }
    let mut shape = vec![n];
    shape.extend_from_slice(input.shape());
    let probs = model.probabilities(&Tensor::new(shape, batch)?)?;
    let k = *probs.shape().last().expect("classes");
    let total: f64 = probs
        .data()
        .chunks(k)
        .map(|row| row.iter().map(|&p| if p > 0.0 { -p * p.ln() } else { 0.0 }).sum::<f64>())
        .sum();
    Ok(total / n as f64)
}

/// Score a probe set clean and trigger-stamped, then place the boundary at
/// the configured percentile of the clean distribution.
pub fn strip_detection(
    model: ModelRef,
    probe: &LabeledImages,
    pool: &LabeledImages,
    trigger: &TriggerSpec,
    cfg: &StripConfig,
) -> Result<StripResult> {
    if probe.is_empty() {
        return Err(Error::EmptyReduction { op: "strip_detection" });
    }
    let score_set = |images: &LabeledImages| -> Result<Vec<f64>> {
        (0..images.len())
            .into_par_iter()
            .map(|i| {
                let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (i as u64).wrapping_mul(0x9E37_79B9));
                strip_score(model, &images.image(i), pool, cfg.replicas, cfg.blend, &mut rng)
            })
            .collect()
    };
    let clean_entropies = score_set(probe)?;
    let mut stamped = probe.clone();
    stamped.images = crate::attack::stamp_batch(&stamped.images, trigger)?;
    let trigger_entropies = score_set(&stamped)?;

    let boundary = percentile(&clean_entropies, cfg.boundary_percentile);
    let below = |xs: &[f64]| xs.iter().filter(|&&x| x < boundary).count() as f64 / xs.len() as f64;
    Ok(StripResult {
        false_rejection_rate: below(&clean_entropies),
        false_acceptance_rate: 1.0 - below(&trigger_entropies),
        separation: below(&trigger_entropies),
        clean_entropies,
        trigger_entropies,
        boundary,
    })
}

/// Nearest-rank percentile: the `ceil(p*n)`-th smallest value (1-based).
fn percentile(xs: &[f64], p: f64) -> f64 {
    let mut sorted = xs.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite entropies"));
    let k = ((p * sorted.len() as f64).ceil() as usize).max(1);
    sorted[k - 1]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{LayerSpec, Model};
    use crate::tensor::Precision;

    fn pool(n: usize) -> LabeledImages {
        let images = Tensor::new(
            vec![n, 2, 2, 1],
            (0..n * 4).map(|i| (i % 7) as f64 / 7.0).collect(),
        )
        .unwrap();
        LabeledImages::new(images, vec![0; n], 2).unwrap()
    }

    fn uniform_model(k: usize) -> Model {
        let layers = vec![
            LayerSpec::Flatten,
            LayerSpec::Dense { name: "d".into(), input: 4, output: k },
            LayerSpec::SoftmaxOutput,
        ];
        let mut m = Model::build("u", &[2, 2, 1], layers, Precision::F64, 0).unwrap();
        m.weights.insert("d".into(), Tensor::zeros(vec![4, k]));
        m
    }

    #[test]
    fn uniform_model_scores_ln_k() {
        let m = uniform_model(10);
        let p = pool(30);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::zeros(vec![2, 2, 1]);
        let s = strip_score(ModelRef::Float(&m), &x, &p, 20, 0.5, &mut rng).unwrap();
        assert!((s - 10.0f64.ln()).abs() < 1e-9, "{s}");
    }

    #[test]
    fn one_hot_model_scores_near_zero() {
        let mut m = uniform_model(4);
        let mut b = Tensor::zeros(vec![4]);
        b.data_mut()[1] = 40.0;
        m.biases.insert("d".into(), b);
        let p = pool(30);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::zeros(vec![2, 2, 1]);
        let s = strip_score(ModelRef::Float(&m), &x, &p, 20, 0.5, &mut rng).unwrap();
        assert!(s < 1e-6, "{s}");
    }

    #[test]
    fn self_only_pool_equals_single_prediction_entropy() {
        let m = uniform_model(4);
        // bias tilts the prediction so entropy is strictly between 0 and ln 4
        let mut model = m;
        let mut b = Tensor::zeros(vec![4]);
        b.data_mut()[2] = 1.0;
        model.biases.insert("d".into(), b);
        let x = Tensor::full(vec![2, 2, 1], 0.25);
        let one = LabeledImages::new(
            Tensor::new(vec![1, 2, 2, 1], x.data().to_vec()).unwrap(),
            vec![0],
            2,
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s = strip_score(ModelRef::Float(&model), &x, &one, 1, 0.5, &mut rng).unwrap();
        let probs = ModelRef::Float(&model)
            .probabilities(&Tensor::new(vec![1, 2, 2, 1], x.data().to_vec()).unwrap())
            .unwrap();
        let expect: f64 = probs.data().iter().map(|&p| -p * p.ln()).sum();
        assert!((s - expect).abs() < 1e-12);
    }

    #[test]
    fn pool_smaller_than_replicas_is_rejected() {
        let m = uniform_model(4);
        let p = pool(5);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::zeros(vec![2, 2, 1]);
        assert!(strip_score(ModelRef::Float(&m), &x, &p, 20, 0.5, &mut rng).is_err());
    }

    #[test]
    fn percentile_is_nearest_rank() {
        let xs: Vec<f64> = (1..=100).map(|i| i as f64).collect();
        assert_eq!(percentile(&xs, 0.01), 1.0);
        assert_eq!(percentile(&xs, 0.05), 5.0);
    }
}

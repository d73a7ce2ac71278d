//! The two-stage quantization backdoor: trigger stamping, poisoned/cover set
//! construction, the four training losses, the weight-space projection that
//! pins the quantized model, and the single-loss baseline it improves on.

mod joint;
mod losses;
mod pgd;
mod stages;

pub use joint::{intuitive_joint_train, JointEpoch, JointLog};
pub use losses::{loss_l1, loss_l2, loss_l3, loss_l4, weight_scales};
pub use pgd::PgdConstraints;
pub use stages::{stage1_train, stage2_finetune, EpochRow, StageLog};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::LabeledImages;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Trigger geometry: a square patch at the bottom-right corner, stamped at a
/// fixed intensity across all channels.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TriggerSpec {
    pub shape: TriggerShape,
    pub position: TriggerPosition,
    /// Patch side length in pixels.
    pub size: usize,
    /// Stamped pixel value (white = max intensity).
    pub intensity: f64,
    /// When set, only samples from this class carry the backdoor.
    pub source_class: Option<usize>,
    pub target_class: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TriggerShape {
    Square,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TriggerPosition {
    BottomRight,
}

impl TriggerSpec {
    pub fn square(size: usize, intensity: f64, source_class: Option<usize>, target_class: usize) -> TriggerSpec {
        TriggerSpec {
            shape: TriggerShape::Square,
            position: TriggerPosition::BottomRight,
            size,
            intensity,
            source_class,
            target_class,
        }
    }

    /// The 6x6 white square used throughout.
    pub fn default_square(target_class: usize) -> TriggerSpec {
        TriggerSpec::square(6, 1.0, None, target_class)
    }
}

/// Stamp the trigger on one `[H, W, C]` image: rows `[H-size, H)` x cols
/// `[W-size, W)` set to the intensity across channels; idempotent.
pub fn stamp_trigger(image: &Tensor, spec: &TriggerSpec) -> Result<Tensor> {
    let s = image.shape().to_vec();
    if s.len() != 3 {
        return Err(Error::ShapeMismatch { op: "stamp_trigger", lhs: s, rhs: vec![0, 0, 0] });
    }
    let mut out = image.clone();
    stamp_in_place(out.data_mut(), s[0], s[1], s[2], spec)?;
    Ok(out)
}

/// Stamp every image of a `[N, H, W, C]` batch.
pub fn stamp_batch(images: &Tensor, spec: &TriggerSpec) -> Result<Tensor> {
    let s = images.shape().to_vec();
    if s.len() != 4 {
        return Err(Error::ShapeMismatch { op: "stamp_batch", lhs: s, rhs: vec![0; 4] });
    }
    let mut out = images.clone();
    let per = s[1] * s[2] * s[3];
    for i in 0..s[0] {
        stamp_in_place(&mut out.data_mut()[i * per..(i + 1) * per], s[1], s[2], s[3], spec)?;
    }
    Ok(out)
}

fn stamp_in_place(data: &mut [f64], h: usize, w: usize, c: usize, spec: &TriggerSpec) -> Result<()> {
    if spec.size > h || spec.size > w {
        return Err(Error::TriggerTooLarge { trigger: spec.size, image: (h, w) });
    }
    for row in h - spec.size..h {
        for col in w - spec.size..w {
            for ch in 0..c {
                data[(row * w + col) * c + ch] = spec.intensity;
            }
        }
    }
    Ok(())
}

/// Pixel indices covered by the trigger footprint of an `[H, W, C]` image.
pub fn trigger_footprint(h: usize, w: usize, c: usize, spec: &TriggerSpec) -> Vec<usize> {
    let mut idx = Vec::with_capacity(spec.size * spec.size * c);
    for row in h - spec.size..h {
        for col in w - spec.size..w {
            for ch in 0..c {
                idx.push((row * w + col) * c + ch);
            }
        }
    }
    idx
}

/// Hyper-parameters of the two-stage attack.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AttackConfig {
    /// Mixing factor between the unlearning and preservation losses.
    pub lambda: f64,
    pub poison_count: usize,
    pub cover_count: usize,
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    pub stage1_lr: f64,
    pub stage2_lr: f64,
    pub batch_size: usize,
    /// Cover samples drawn per stage-2 step. Smaller batches soften the
    /// unlearning pressure so clean accuracy survives inside the projection
    /// box; the full batch size collapses it.
    pub cover_batch_size: usize,
    pub seed: u64,
    /// Margin keeping projected affine values strictly inside the open
    /// rounding cell (affine units).
    pub projection_margin: f64,
    pub calibration_count: usize,
    /// Stage-1 exit requirement on the backdoored model.
    pub stage1_asr_target: f64,
    /// Once the poison-batch cross-entropy drops below this floor its
    /// gradient is detached for the step, so the trigger pathway keeps a
    /// thin margin that stage 2 can unlearn inside the projection band.
    pub poison_ce_floor: f64,
    /// Disable to ablate rounding-uncertainty minimization in stage 1
    /// (the loss is still reported, just not trained on).
    pub enable_rum: bool,
    /// Stage 2 stops early once full-precision ASR stays at or below this
    /// for three consecutive epochs.
    pub early_stop_asr: f64,
    /// Disable to run the unconstrained ablation (no projection, live scales).
    pub constrain: bool,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            lambda: 1.0,
            poison_count: 500,
            cover_count: 500,
            stage1_epochs: 15,
            stage2_epochs: 30,
            stage1_lr: 5e-4,
            stage2_lr: 1e-5,
            batch_size: 32,
            cover_batch_size: 8,
            seed: 7,
            projection_margin: 1e-3,
            calibration_count: 100,
            stage1_asr_target: 0.99,
            poison_ce_floor: 0.15,
            enable_rum: true,
            early_stop_asr: 0.01,
            constrain: true,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self, dataset_len: usize) -> Result<()> {
        if self.lambda < 0.0 {
            return Err(Error::Config("lambda must be non-negative".into()));
        }
        if self.poison_count + self.cover_count > dataset_len {
            return Err(Error::Config(format!(
                "poison ({}) + cover ({}) exceed dataset size {dataset_len}",
                self.poison_count, self.cover_count
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        Ok(())
    }
}

/// Cycles a dataset in shuffled batches, reshuffling at every wrap.
pub(crate) struct BatchCycler<'a> {
    data: &'a LabeledImages,
    order: Vec<usize>,
    pos: usize,
    seed: u64,
    round: usize,
}

impl<'a> BatchCycler<'a> {
    pub(crate) fn new(data: &'a LabeledImages, seed: u64) -> Self {
        let order = data.epoch_order(seed, 0);
        BatchCycler { data, order, pos: 0, seed, round: 0 }
    }

    pub(crate) fn next(&mut self, size: usize) -> (Tensor, Vec<usize>) {
        if self.pos >= self.order.len() {
            self.round += 1;
            self.order = self.data.epoch_order(self.seed, self.round);
            self.pos = 0;
        }
        let batch = self.data.batch(&self.order, self.pos, size);
        self.pos += size;
        batch
    }
}

/// The training-side datasets of one attack run.
#[derive(Debug, Clone)]
pub struct AttackDatasets {
    /// Clean training set, unchanged.
    pub train: LabeledImages,
    /// Trigger stamped, labels moved to the target class.
    pub poisoned: LabeledImages,
    /// Trigger stamped, labels kept true.
    pub cover: LabeledImages,
    pub calibration: Tensor,
    pub poison_origins: Vec<usize>,
    pub cover_origins: Vec<usize>,
    pub trigger: TriggerSpec,
}

/// Deterministically draw disjoint poison and cover subsets, stamp them, and
/// cut the calibration batch. In source-specific mode the poisoned set draws
/// only from the source class and the cover set only from other classes.
pub fn build_attack_datasets(
    train: &LabeledImages,
    trigger: &TriggerSpec,
    config: &AttackConfig,
) -> Result<AttackDatasets> {
    config.validate(train.len())?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let mut poison_pool: Vec<usize> = match trigger.source_class {
        Some(src) => (0..train.len()).filter(|&i| train.labels[i] == src).collect(),
        None => (0..train.len()).collect(),
    };
    poison_pool.shuffle(&mut rng);
    if poison_pool.len() < config.poison_count {
        return Err(Error::ClassExhausted {
            class: trigger.source_class.unwrap_or(0),
            needed: config.poison_count,
            available: poison_pool.len(),
        });
    }
    let poison_origins: Vec<usize> = poison_pool[..config.poison_count].to_vec();

    let taken: std::collections::BTreeSet<usize> = poison_origins.iter().copied().collect();
    let mut cover_pool: Vec<usize> = match trigger.source_class {
        Some(src) => (0..train.len())
            .filter(|&i| train.labels[i] != src && !taken.contains(&i))
            .collect(),
        None => (0..train.len()).filter(|i| !taken.contains(i)).collect(),
    };
    cover_pool.shuffle(&mut rng);
    if cover_pool.len() < config.cover_count {
        return Err(Error::ClassExhausted {
            class: trigger.source_class.map(|s| s + 1).unwrap_or(0),
            needed: config.cover_count,
            available: cover_pool.len(),
        });
    }
    let cover_origins: Vec<usize> = cover_pool[..config.cover_count].to_vec();

    let mut poisoned = train.subset(&poison_origins);
    poisoned.images = stamp_batch(&poisoned.images, trigger)?;
    poisoned.labels = vec![trigger.target_class; poisoned.len()];

    let mut cover = train.subset(&cover_origins);
    cover.images = stamp_batch(&cover.images, trigger)?;

    let calibration = crate::quant::calibration_batch(train, config.calibration_count, config.seed);

    Ok(AttackDatasets {
        train: train.clone(),
        poisoned,
        cover,
        calibration,
        poison_origins,
        cover_origins,
        trigger: trigger.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn checkerboard(n: usize, k: usize) -> LabeledImages {
        let images = Tensor::new(
            vec![n, 28, 28, 1],
            (0..n * 784).map(|i| ((i / 7) % 2) as f64 * 0.4).collect(),
        )
        .unwrap();
        let labels: Vec<usize> = (0..n).map(|i| i % k).collect();
        LabeledImages::new(images, labels, k).unwrap()
    }

    #[test]
    fn stamp_sets_exactly_the_footprint() {
        let spec = TriggerSpec::default_square(0);
        let image = Tensor::zeros(vec![28, 28, 1]);
        let stamped = stamp_trigger(&image, &spec).unwrap();
        let lit: Vec<usize> = stamped
            .data()
            .iter()
            .enumerate()
            .filter(|(_, &v)| v != 0.0)
            .map(|(i, _)| i)
            .collect();
        assert_eq!(lit.len(), 36);
        for &i in &lit {
            let (row, col) = (i / 28, i % 28);
            assert!((22..28).contains(&row) && (22..28).contains(&col), "pixel ({row},{col})");
            assert_eq!(stamped.data()[i], 1.0);
        }
    }

    #[test]
    fn stamping_is_idempotent() {
        let spec = TriggerSpec::default_square(0);
        let image = Tensor::new(vec![28, 28, 1], (0..784).map(|i| (i % 5) as f64 / 5.0).collect()).unwrap();
        let once = stamp_trigger(&image, &spec).unwrap();
        let twice = stamp_trigger(&once, &spec).unwrap();
        assert_eq!(once, twice);
    }

    #[test]
    fn l0_distance_bounded_by_footprint() {
        let spec = TriggerSpec::default_square(0);
        let image = Tensor::new(vec![28, 28, 1], (0..784).map(|i| (i % 3) as f64 / 3.0).collect()).unwrap();
        let stamped = stamp_trigger(&image, &spec).unwrap();
        let l0 = image
            .data()
            .iter()
            .zip(stamped.data())
            .filter(|(a, b)| a != b)
            .count();
        assert!(l0 <= 36);
    }

    #[test]
    fn trigger_larger_than_image_is_rejected() {
        let spec = TriggerSpec::square(9, 1.0, None, 0);
        let image = Tensor::zeros(vec![8, 8, 1]);
        assert!(matches!(
            stamp_trigger(&image, &spec),
            Err(Error::TriggerTooLarge { .. })
        ));
    }

    #[test]
    fn attack_sets_are_disjoint_and_sized() {
        let train = checkerboard(600, 4);
        let trigger = TriggerSpec::default_square(0);
        let config = AttackConfig { poison_count: 50, cover_count: 50, seed: 3, ..AttackConfig::default() };
        let ds = build_attack_datasets(&train, &trigger, &config).unwrap();
        assert_eq!(ds.poisoned.len(), 50);
        assert_eq!(ds.cover.len(), 50);
        assert_eq!(ds.train.len(), 600);
        let overlap = ds
            .poison_origins
            .iter()
            .filter(|i| ds.cover_origins.contains(i))
            .count();
        assert_eq!(overlap, 0);
        assert!(ds.poisoned.labels.iter().all(|&l| l == 0));
        for (k, &origin) in ds.cover_origins.iter().enumerate() {
            assert_eq!(ds.cover.labels[k], train.labels[origin]);
        }
    }

    #[test]
    fn poisoned_samples_differ_only_inside_footprint() {
        let train = checkerboard(100, 4);
        let trigger = TriggerSpec::default_square(1);
        let config = AttackConfig { poison_count: 10, cover_count: 10, ..AttackConfig::default() };
        let ds = build_attack_datasets(&train, &trigger, &config).unwrap();
        let footprint: std::collections::BTreeSet<usize> =
            trigger_footprint(28, 28, 1, &trigger).into_iter().collect();
        for (k, &origin) in ds.poison_origins.iter().enumerate() {
            let clean = train.image(origin);
            let stamped = ds.poisoned.image(k);
            for (i, (a, b)) in clean.data().iter().zip(stamped.data()).enumerate() {
                if !footprint.contains(&i) {
                    assert_eq!(a, b, "pixel {i} changed outside footprint");
                }
            }
        }
    }

    #[test]
    fn source_specific_pools_respect_classes() {
        let train = checkerboard(400, 4);
        let trigger = TriggerSpec::square(6, 1.0, Some(1), 0);
        let config = AttackConfig { poison_count: 30, cover_count: 30, ..AttackConfig::default() };
        let ds = build_attack_datasets(&train, &trigger, &config).unwrap();
        for &o in &ds.poison_origins {
            assert_eq!(train.labels[o], 1);
        }
        assert!(ds.poisoned.labels.iter().all(|&l| l == 0));
        for &o in &ds.cover_origins {
            assert_ne!(train.labels[o], 1);
        }
    }

    #[test]
    fn exhausted_class_is_an_error() {
        let train = checkerboard(40, 4); // 10 per class
        let trigger = TriggerSpec::square(6, 1.0, Some(1), 0);
        let config = AttackConfig { poison_count: 11, cover_count: 5, ..AttackConfig::default() };
        assert!(matches!(
            build_attack_datasets(&train, &trigger, &config),
            Err(Error::ClassExhausted { .. })
        ));
    }
}

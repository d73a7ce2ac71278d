//! Trigger reverse-engineering: per class, optimize a mask and pattern whose
//! stamped application flips clean inputs to that class, penalizing the mask
//! l1 norm. A class reachable with an abnormally small mask is flagged by a
//! one-sided MAD score. Quantized models are attacked through the
//! straight-through emulated forward.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::LabeledImages;
use crate::defense::ModelRef;
use crate::error::{Error, Result};
use crate::nn::Optimizer;
use crate::tensor::{Precision, Tape, Tensor, Var};

#[derive(Debug, Clone)]
pub struct NcConfig {
    /// Initial l1 penalty weight.
    pub beta_init: f64,
    pub learning_rate: f64,
    /// Optimization iterations per class.
    pub budget: usize,
    pub batch: usize,
    /// Reversed-trigger success rate that counts as "reaches the class".
    pub success_target: f64,
    /// Below this success rate the l1 penalty backs off.
    pub lower_success: f64,
    /// Consecutive readings before the penalty adapts.
    pub patience: usize,
    pub seed: u64,
}

impl Default for NcConfig {
    fn default() -> Self {
        NcConfig {
            beta_init: 1e-3,
            learning_rate: 0.1,
            budget: 500,
            batch: 32,
            success_target: 0.99,
            lower_success: 0.90,
            patience: 5,
            seed: 23,
        }
    }
}

/// Reversed trigger for one class.
#[derive(Debug, Clone)]
pub struct NcResult {
    pub target_class: usize,
    /// `[H, W, 1]` mask in `[0, 1]`.
    pub mask: Tensor,
    /// `[H, W, C]` pattern in `[0, 1]`.
    pub pattern: Tensor,
    pub l1: f64,
    /// Success rate of the returned iterate.
    pub success: f64,
    /// Whether any iterate met the success target.
    pub succeeded: bool,
}

/// All classes plus the outlier scores.
#[derive(Debug, Clone)]
pub struct NcReport {
    pub per_class: Vec<NcResult>,
    pub anomaly: Vec<f64>,
    pub flagged: Vec<usize>,
}

impl NcReport {
    pub fn max_anomaly(&self) -> f64 {
        self.anomaly.iter().fold(0.0f64, |a, &b| a.max(b))
    }

    pub fn min_l1_class(&self) -> usize {
        self.per_class
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.l1.partial_cmp(&b.1.l1).expect("finite l1"))
            .map(|(i, _)| i)
            .expect("non-empty report")
    }
}

fn forward_logits(model: ModelRef, tape: &mut Tape, x: Var) -> Result<Var> {
    match model {
        ModelRef::Float(m) => m.forward(tape, x),
        ModelRef::Quantized(q) => Ok(crate::quant::emulate_on_tape(q, tape, x)?.0),
        ModelRef::Drq(_) => Err(Error::Config(
            "trigger reverse-engineering needs a differentiable forward; dynamic-range models are evaluated via their float twin".into(),
        )),
    }
}

/// Optimize `(1-m) * x + m * p` toward `target_class` over the clean set,
/// squashing both mask and pattern into `[0, 1]` through tanh
/// reparameterization. Returns the smallest-l1 iterate that met the success
/// target, or the final iterate with the failure flag.
pub fn nc_reverse_trigger(
    model: ModelRef,
    target_class: usize,
    clean: &LabeledImages,
    cfg: &NcConfig,
) -> Result<NcResult> {
    let (h, w, c) = clean.image_dims();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (target_class as u64).wrapping_mul(0xA5A5_A5A5));
    let mut wm = Tensor::new(
        vec![h, w, 1],
        (0..h * w).map(|_| rng.random_range(-3.0..-1.0)).collect(),
    )?;
    let mut wp = Tensor::new(
        vec![h, w, c],
        (0..h * w * c).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )?;

    let mut beta = cfg.beta_init;
    let mut optimizer = Optimizer::adam(cfg.learning_rate);
    let mut best: Option<(Tensor, Tensor, f64, f64)> = None;
    let mut last: Option<(Tensor, Tensor, f64, f64)> = None;
    let mut up_streak = 0usize;
    let mut down_streak = 0usize;

    let mut cursor = 0usize;
    let order: Vec<usize> = (0..clean.len()).collect();

    for _ in 0..cfg.budget {
        let (images, _) = clean.batch(&order, cursor, cfg.batch);
        cursor = (cursor + cfg.batch) % clean.len().max(1);
        let n = images.shape()[0];
        let labels = vec![target_class; n];

        let mut tape = Tape::new(Precision::F64);
        let vm = tape.input(wm.clone(), true);
        let vp = tape.input(wp.clone(), true);
        let x = tape.input(images, false);

        // squash into [0,1]
        let tm = tape.tanh(vm)?;
        let m = {
            let t = tape.add_scalar(tm, 1.0)?;
            tape.mul_scalar(t, 0.5)?
        };
        let tp = tape.tanh(vp)?;
        let p = {
            let t = tape.add_scalar(tp, 1.0)?;
            tape.mul_scalar(t, 0.5)?
        };

        // stamped = (1 - m) * x + m * p
        let one_minus = {
            let neg = tape.neg(m)?;
            tape.add_scalar(neg, 1.0)?
        };
        let keep = tape.mul(one_minus, x)?;
        let put = tape.mul(m, p)?;
        let stamped = tape.add(keep, put)?;

        let logits = forward_logits(model, &mut tape, stamped)?;
        let ce = tape.cross_entropy(logits, &labels)?;
        let l1 = tape.sum(m)?;
        let weighted = tape.mul_scalar(l1, beta)?;
        let loss = tape.add(ce, weighted)?;
        if !tape.value(loss).item().is_finite() {
            return Err(Error::NonFinite { op: "nc_reverse_trigger" });
        }

        let success = {
            let pred = crate::nn::argmax_rows(tape.value(logits));
            pred.iter().filter(|&&p| p == target_class).count() as f64 / n as f64
        };
        let l1_val = tape.value(l1).item();
        let snapshot = (tape.value(m).clone(), tape.value(p).clone(), l1_val, success);
        if success >= cfg.success_target
            && best.as_ref().map_or(true, |(_, _, bl1, _)| l1_val < *bl1)
        {
            best = Some(snapshot.clone());
        }
        last = Some(snapshot);

        // l1 pressure adapts to the success rate with hysteresis
        if success >= cfg.success_target {
            up_streak += 1;
            down_streak = 0;
            if up_streak >= cfg.patience {
                beta *= 2.0;
                up_streak = 0;
            }
        } else if success < cfg.lower_success {
            down_streak += 1;
            up_streak = 0;
            if down_streak >= cfg.patience {
                beta /= 2.0;
                down_streak = 0;
            }
        } else {
            up_streak = 0;
            down_streak = 0;
        }

        tape.backward(loss)?;
        let gm = tape.grad(vm).cloned().unwrap_or_else(|| Tensor::zeros(wm.shape().to_vec()));
        let gp = tape.grad(vp).cloned().unwrap_or_else(|| Tensor::zeros(wp.shape().to_vec()));
        optimizer.step(
            vec![("mask".into(), &mut wm, &gm), ("pattern".into(), &mut wp, &gp)],
            Precision::F64,
        );
    }

    let succeeded = best.is_some();
    let chosen = best.or(last);
    let (mask, pattern, l1, success) = match chosen {
        Some(t) => t,
        // zero budget: report the squashed initial point with the failure flag
        None => {
            let mask = wm.map(|v| (v.tanh() + 1.0) / 2.0);
            let pattern = wp.map(|v| (v.tanh() + 1.0) / 2.0);
            let l1 = mask.data().iter().sum();
            (mask, pattern, l1, 0.0)
        }
    };
    Ok(NcResult { target_class, mask, pattern, l1, success, succeeded })
}

/// Reverse a trigger for every class (in parallel) and score the outliers.
pub fn nc_report(model: ModelRef, num_classes: usize, clean: &LabeledImages, cfg: &NcConfig) -> Result<NcReport> {
    let per_class: Vec<NcResult> = (0..num_classes)
        .into_par_iter()
        .map(|k| nc_reverse_trigger(model, k, clean, cfg))
        .collect::<Result<Vec<_>>>()?;
    let l1s: Vec<f64> = per_class.iter().map(|r| r.l1).collect();
    let anomaly = anomaly_index(&l1s)?;
    let flagged = anomaly
        .iter()
        .enumerate()
        .filter(|(_, &a)| a > 2.0)
        .map(|(i, _)| i)
        .collect();
    Ok(NcReport { per_class, anomaly, flagged })
}

/// One-sided MAD score: for norms below the median,
/// `|l1 - median| / (1.4826 * MAD)`; classes at or above the median score 0.
/// A zero MAD makes any deviating class infinitely anomalous.
pub fn anomaly_index(l1_norms: &[f64]) -> Result<Vec<f64>> {
    if l1_norms.len() < 3 {
        return Err(Error::Config(format!(
            "anomaly index needs at least 3 classes, got {}",
            l1_norms.len()
        )));
    }
    let med = median(l1_norms);
    let deviations: Vec<f64> = l1_norms.iter().map(|&x| (x - med).abs()).collect();
    let mad = median(&deviations);
    Ok(l1_norms
        .iter()
        .map(|&x| {
            if x >= med {
                0.0
            } else if mad == 0.0 {
                if x == med { 0.0 } else { f64::INFINITY }
            } else {
                (x - med).abs() / (1.4826 * mad)
            }
        })
        .collect())
}

fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).expect("finite norms"));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{LayerSpec, Model};

    #[test]
    fn anomaly_index_hand_oracle() {
        // {9,10,11,12,13,2}: median 10.5, MAD 1.5, index(2) = 8.5/(1.4826*1.5)
        let idx = anomaly_index(&[9.0, 10.0, 11.0, 12.0, 13.0, 2.0]).unwrap();
        let expect = 8.5 / (1.4826 * 1.5);
        assert!((idx[5] - expect).abs() < 1e-12);
        assert!(idx[5] > 2.0);
        assert_eq!(idx[3], 0.0);
        assert_eq!(idx[4], 0.0);
    }

    #[test]
    fn equal_norms_score_zero() {
        let idx = anomaly_index(&[5.0; 6]).unwrap();
        assert!(idx.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn zero_mad_with_deviant_is_infinite() {
        let idx = anomaly_index(&[5.0, 5.0, 5.0, 5.0, 1.0]).unwrap();
        assert!(idx[4].is_infinite());
        assert_eq!(idx[0], 0.0);
    }

    #[test]
    fn anomaly_index_is_scale_invariant() {
        let base = [9.0, 10.0, 11.0, 12.0, 13.0, 2.0];
        let scaled: Vec<f64> = base.iter().map(|x| x * 37.5).collect();
        let a = anomaly_index(&base).unwrap();
        let b = anomaly_index(&scaled).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn too_few_classes_is_an_error() {
        assert!(anomaly_index(&[1.0, 2.0]).is_err());
    }

    #[test]
    fn zero_budget_returns_initial_mask_with_failure_flag() {
        let model = Model::mlp(&[4, 4, 1], 3, Precision::F64, 1).unwrap();
        let clean = LabeledImages::new(Tensor::zeros(vec![8, 4, 4, 1]), vec![0; 8], 3).unwrap();
        let cfg = NcConfig { budget: 0, ..NcConfig::default() };
        let r = nc_reverse_trigger(ModelRef::Float(&model), 1, &clean, &cfg).unwrap();
        assert!(!r.succeeded);
        assert!(r.mask.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    /// A model that ignores everything except a planted shortcut: if the
    /// bottom-right 2x2 region is bright, class 1 wins, else class 0.
    #[test]
    fn planted_shortcut_is_recovered_in_the_right_region() {
        let layers = vec![
            LayerSpec::Flatten,
            LayerSpec::Dense { name: "d".into(), input: 36, output: 2 },
            LayerSpec::SoftmaxOutput,
        ];
        let mut model = Model::build("shortcut", &[6, 6, 1], layers, Precision::F64, 0).unwrap();
        let mut w = Tensor::zeros(vec![36, 2]);
        for row in 4..6 {
            for col in 4..6 {
                w.data_mut()[(row * 6 + col) * 2 + 1] = 8.0;
            }
        }
        model.weights.insert("d".into(), w);
        model
            .biases
            .insert("d".into(), Tensor::new(vec![2], vec![4.0, 0.0]).unwrap());

        let clean = LabeledImages::new(Tensor::zeros(vec![16, 6, 6, 1]), vec![0; 16], 2).unwrap();
        let cfg = NcConfig { budget: 300, batch: 8, ..NcConfig::default() };
        let r = nc_reverse_trigger(ModelRef::Float(&model), 1, &clean, &cfg).unwrap();
        assert!(r.succeeded, "optimization should reach the planted class");
        // mask mass concentrates on the shortcut region
        let inside: f64 = (4..6)
            .flat_map(|row| (4..6).map(move |col| row * 6 + col))
            .map(|i| r.mask.data()[i])
            .sum();
        assert!(
            inside / r.l1 > 0.5,
            "inside {inside:.3} of total {:.3} should dominate",
            r.l1
        );
    }
}

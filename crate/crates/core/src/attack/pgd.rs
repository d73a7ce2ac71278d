//! Weight-space projection for stage 2. Snapshot the backdoored model's
//! affine images, scales and int-8 targets; after every optimizer step clamp
//! each weight's affine value back into the open unit cell around its
//! reference so rounding keeps reproducing the snapshot, and freeze the
//! scale-determining weights so a fresh conversion recomputes identical
//! scales.

use std::collections::BTreeMap;

use crate::error::Result;
use crate::nn::Model;
use crate::quant::{affine_map, quantize_weights, QuantParams, QuantProfile};
use crate::tensor::Tensor;

/// Stage-2 constraints snapshotted from the backdoored model.
#[derive(Debug, Clone)]
pub struct PgdConstraints {
    /// Half-width of the affine band (affine units).
    pub epsilon1: f64,
    /// Allowed scale drift; realized as freezing, so always 0.
    pub epsilon2: f64,
    /// Margin keeping projected values strictly inside the open cell.
    pub margin: f64,
    pub profile: QuantProfile,
    /// Affine image of every backdoored weight tensor.
    pub reference_am: BTreeMap<String, Tensor>,
    /// Frozen weight scales.
    pub scales: BTreeMap<String, f64>,
    /// Int-8 targets the projection must keep reproducing.
    pub target_q: BTreeMap<String, Vec<i8>>,
    /// Per-tensor magnitude cap (the scale-determining absolute maximum).
    pub max_abs: BTreeMap<String, f64>,
    /// Indices of the scale-determining weights, excluded from updates.
    frozen: BTreeMap<String, Vec<usize>>,
    /// Their exact values, restored after every step.
    frozen_values: BTreeMap<String, Vec<f64>>,
}

impl PgdConstraints {
    /// Snapshot the reference from the backdoored model.
    pub fn snapshot(model: &Model, profile: QuantProfile, margin: f64) -> Result<PgdConstraints> {
        let mut reference_am = BTreeMap::new();
        let mut scales = BTreeMap::new();
        let mut target_q = BTreeMap::new();
        let mut max_abs = BTreeMap::new();
        let mut frozen = BTreeMap::new();
        let mut frozen_values = BTreeMap::new();
        for (name, w) in &model.weights {
            let (q, params) = quantize_weights(w, profile)?;
            let am = affine_map(w, &params);
            let ma = w.max_abs();
            let idx: Vec<usize> = w
                .data()
                .iter()
                .enumerate()
                .filter(|(_, v)| v.abs() == ma)
                .map(|(i, _)| i)
                .collect();
            let vals: Vec<f64> = idx.iter().map(|&i| w.data()[i]).collect();
            reference_am.insert(name.clone(), am);
            scales.insert(name.clone(), params.scale);
            target_q.insert(name.clone(), q);
            max_abs.insert(name.clone(), ma);
            frozen.insert(name.clone(), idx);
            frozen_values.insert(name.clone(), vals);
        }
        Ok(PgdConstraints {
            epsilon1: 0.5,
            epsilon2: 0.0,
            margin,
            profile,
            reference_am,
            scales,
            target_q,
            max_abs,
            frozen,
            frozen_values,
        })
    }

    pub fn frozen_indices(&self, name: &str) -> &[usize] {
        &self.frozen[name]
    }

    /// Zero the gradient entries of frozen weights so the optimizer leaves
    /// them (and their Adam moments) untouched.
    pub fn mask_frozen_grads(&self, name: &str, grad: &mut Tensor) {
        for &i in &self.frozen[name] {
            grad.data_mut()[i] = 0.0;
        }
    }

    /// The int-8 snapshot as exact floats, for the preservation loss.
    pub fn target_float(&self, name: &str) -> Tensor {
        let q = &self.target_q[name];
        let shape = self.reference_am[name].shape().to_vec();
        Tensor::new(shape, q.iter().map(|&v| v as f64).collect()).expect("target shape")
    }

    /// Clamp every weight's affine value into the reference band
    /// `am_ref ± (eps1 - margin)` intersected with the rounding cell of its
    /// int-8 target, cap magnitudes at the frozen per-tensor maximum, and
    /// restore the frozen weights exactly. Once the rounding-uncertainty loss
    /// has pulled `am_ref` onto integers the two intervals coincide; the
    /// intersection makes `round(AM) == target` hold unconditionally. Values
    /// already inside the band are left bit-identical, which makes the
    /// projection idempotent.
    pub fn project(&self, model: &mut Model) {
        let precision = model.precision;
        for (name, w) in model.weights.iter_mut() {
            let s = self.scales[name];
            let am_ref = &self.reference_am[name];
            let target = &self.target_q[name];
            let ma = self.max_abs[name];
            let data = w.data_mut();
            for i in 0..data.len() {
                let am = data[i] / s;
                let q = target[i] as f64;
                let lo = (am_ref.data()[i] - self.epsilon1).max(q - 0.5) + self.margin;
                let hi = (am_ref.data()[i] + self.epsilon1).min(q + 0.5) - self.margin;
                if am < lo {
                    data[i] = precision.quantize(lo * s);
                } else if am > hi {
                    data[i] = precision.quantize(hi * s);
                }
                if data[i] > ma {
                    data[i] = ma;
                } else if data[i] < -ma {
                    data[i] = -ma;
                }
            }
            for (&i, &v) in self.frozen[name].iter().zip(&self.frozen_values[name]) {
                data[i] = v;
            }
        }
    }

    /// Count elements whose fresh conversion would differ from the snapshot:
    /// scale bits or any int-8 value. Zero means the quantized model is
    /// reproduced exactly.
    pub fn violations(&self, model: &Model) -> Result<usize> {
        let mut bad = 0usize;
        for (name, w) in &model.weights {
            let (q, params) = quantize_weights(w, self.profile)?;
            if params.scale.to_bits() != self.scales[name].to_bits() {
                bad += w.len();
                continue;
            }
            bad += q
                .iter()
                .zip(&self.target_q[name])
                .filter(|(a, b)| a != b)
                .count();
        }
        Ok(bad)
    }

    /// Frozen scales as symmetric quantization params.
    pub fn scale_params(&self, name: &str) -> QuantParams {
        QuantParams {
            scale: self.scales[name],
            zero_point: 0,
            qmin: self.profile.weight_range().0,
            qmax: self.profile.weight_range().1,
        }
    }
}

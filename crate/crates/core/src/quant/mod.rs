//! Faithful int-8 post-training quantization: the affine mapping, weight and
//! activation calibration, a reference integer-arithmetic inference path, the
//! float emulation fast path, and the dynamic-range mode.

mod drq;
mod emulate;
mod integer;

pub use drq::DrqModel;
pub use emulate::{emulate_on_tape, emulated_forward, predict_quantized, EmulatedForward};
pub use integer::{integer_forward, IntegerForward};

use std::collections::BTreeMap;

use crate::data::LabeledImages;
use crate::error::{Error, Result};
use crate::nn::{LayerSpec, Model};
use crate::tensor::{round_half_away, Tape, Tensor};

/// Integer range profile of the conversion backend.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum QuantProfile {
    /// `[-127, 127]` for weights and activations; -128 unused.
    #[serde(rename = "tflite_127")]
    Tflite127,
    /// `[-128, 127]` backend range.
    #[serde(rename = "torch_128")]
    Torch128,
}

impl QuantProfile {
    pub fn weight_range(self) -> (i32, i32) {
        match self {
            QuantProfile::Tflite127 => (-127, 127),
            QuantProfile::Torch128 => (-128, 127),
        }
    }

    pub fn activation_range(self) -> (i32, i32) {
        self.weight_range()
    }
}

/// Per-tensor `(scale, zero_point)` constants with their integer range.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct QuantParams {
    pub scale: f64,
    pub zero_point: i32,
    pub qmin: i32,
    pub qmax: i32,
}

impl QuantParams {
    /// Symmetric weight params: `scale = max_abs / qmax`, zero point 0.
    /// An all-zero tensor takes scale 1 by convention.
    pub fn symmetric(max_abs: f64, range: (i32, i32)) -> QuantParams {
        let scale = if max_abs == 0.0 { 1.0 } else { max_abs / range.1 as f64 };
        QuantParams { scale, zero_point: 0, qmin: range.0, qmax: range.1 }
    }

    /// Asymmetric activation params from an observed `[lo, hi]` range:
    /// `scale = (hi - lo) / (qmax - qmin)`, zero point `round(qmin - lo/scale)`
    /// clamped into range. A degenerate range takes scale 1, zero point qmin.
    pub fn from_range(lo: f64, hi: f64, range: (i32, i32)) -> QuantParams {
        let (qmin, qmax) = range;
        if hi == lo {
            return QuantParams { scale: 1.0, zero_point: qmin, qmin, qmax };
        }
        let scale = (hi - lo) / (qmax - qmin) as f64;
        let zp = round_half_away(qmin as f64 - lo / scale) as i32;
        QuantParams { scale, zero_point: zp.clamp(qmin, qmax), qmin, qmax }
    }

    /// Quantize one real value: round(affine) clamped into range.
    #[inline]
    pub fn quantize(&self, v: f64) -> i32 {
        let q = round_half_away(v / self.scale + self.zero_point as f64);
        (q as i32).clamp(self.qmin, self.qmax)
    }

    #[inline]
    pub fn dequantize(&self, q: i32) -> f64 {
        self.scale * (q - self.zero_point) as f64
    }
}

/// Unrounded image of a weight tensor in integer space:
/// `theta / scale + zero_point`.
pub fn affine_map(theta: &Tensor, params: &QuantParams) -> Tensor {
    theta.map(|x| x / params.scale + params.zero_point as f64)
}

/// Quantize a weight tensor symmetrically; values are rounded half away from
/// zero and clamped into the profile's weight range.
pub fn quantize_weights(theta: &Tensor, profile: QuantProfile) -> Result<(Vec<i8>, QuantParams)> {
    if theta.is_empty() {
        return Err(Error::EmptyReduction { op: "quantize_weights" });
    }
    theta.check_finite("quantize_weights")?;
    let params = QuantParams::symmetric(theta.max_abs(), profile.weight_range());
    let q = theta.data().iter().map(|&x| params.quantize(x) as i8).collect();
    Ok((q, params))
}

/// Int-8 weight tensor with its quantization constants.
#[derive(Debug, Clone, PartialEq)]
pub struct QTensor {
    pub data: Vec<i8>,
    pub shape: Vec<usize>,
    pub params: QuantParams,
}

impl QTensor {
    pub fn from_tensor(theta: &Tensor, profile: QuantProfile) -> Result<QTensor> {
        let (data, params) = quantize_weights(theta, profile)?;
        Ok(QTensor { data, shape: theta.shape().to_vec(), params })
    }

    /// Values as exact integers in f64 storage.
    pub fn as_float(&self) -> Tensor {
        Tensor::new(self.shape.clone(), self.data.iter().map(|&x| x as f64).collect())
            .expect("qtensor shape")
    }

    pub fn dequantize(&self) -> Tensor {
        Tensor::new(
            self.shape.clone(),
            self.data.iter().map(|&x| self.params.dequantize(x as i32)).collect(),
        )
        .expect("qtensor shape")
    }
}

/// Int-32 bias with scale `input_scale * weight_scale`.
#[derive(Debug, Clone, PartialEq)]
pub struct QBias {
    pub data: Vec<i32>,
    pub shape: Vec<usize>,
    pub scale: f64,
}

impl QBias {
    pub fn as_float(&self) -> Tensor {
        Tensor::new(self.shape.clone(), self.data.iter().map(|&x| x as f64).collect())
            .expect("qbias shape")
    }
}

/// Int-8 model: quantized weights, int-32 biases and per-boundary activation
/// constants. Immutable after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedModel {
    pub architecture_id: String,
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
    pub weights: BTreeMap<String, QTensor>,
    pub biases: BTreeMap<String, QBias>,
    /// Activation params at every layer boundary: index 0 is the model input,
    /// index i+1 the output of layer i.
    pub activations: Vec<QuantParams>,
    pub profile: QuantProfile,
}

impl QuantizedModel {
    pub fn num_classes(&self) -> usize {
        for layer in self.layers.iter().rev() {
            if let LayerSpec::Dense { output, .. } = layer {
                return *output;
            }
        }
        0
    }

    /// Requantization multiplier for a parameterized layer:
    /// `input_scale * weight_scale / output_scale`.
    pub fn requant_multiplier(&self, boundary_in: usize, name: &str) -> f64 {
        let si = self.activations[boundary_in].scale;
        let sw = self.weights[name].params.scale;
        let so = self.activations[boundary_in + 1].scale;
        si * sw / so
    }

    /// Rescaling multiplier for a pass-through layer boundary.
    pub fn act_multiplier(&self, boundary_in: usize) -> f64 {
        self.activations[boundary_in].scale / self.activations[boundary_in + 1].scale
    }
}

/// Observe per-boundary float activation ranges over a calibration set and
/// derive activation quantization params.
pub fn calibrate_activations(
    model: &Model,
    calibration: &Tensor,
    profile: QuantProfile,
) -> Result<Vec<QuantParams>> {
    if calibration.is_empty() || calibration.rank() != 4 || calibration.shape()[0] == 0 {
        return Err(Error::EmptyReduction { op: "calibrate_activations" });
    }
    let mut tape = Tape::no_grad(model.precision);
    let vars = model.vars(&mut tape, false);
    let x = tape.input(calibration.clone(), false);
    let boundaries = model.forward_vars_trace(&mut tape, x, &vars)?;
    let range = profile.activation_range();
    boundaries
        .iter()
        .map(|&b| {
            let (lo, hi) = tape.value(b).min_max()?;
            Ok(QuantParams::from_range(lo, hi, range))
        })
        .collect()
}

/// Full conversion: symmetric per-tensor weights, calibrated activations,
/// int-32 biases at `input_scale * weight_scale`. Deterministic given inputs.
pub fn quantize_model(model: &Model, calibration: &Tensor, profile: QuantProfile) -> Result<QuantizedModel> {
    let activations = calibrate_activations(model, calibration, profile)?;
    let mut weights = BTreeMap::new();
    let mut biases = BTreeMap::new();
    for (boundary_in, layer) in model.layers.iter().enumerate() {
        if let Some(name) = layer.name() {
            let qw = QTensor::from_tensor(&model.weights[name], profile)?;
            let si = activations[boundary_in].scale;
            let bias_scale = si * qw.params.scale;
            let b = &model.biases[name];
            let data = b
                .data()
                .iter()
                .map(|&x| round_half_away(x / bias_scale) as i32)
                .collect();
            biases.insert(name.to_string(), QBias { data, shape: b.shape().to_vec(), scale: bias_scale });
            weights.insert(name.to_string(), qw);
        }
    }
    Ok(QuantizedModel {
        architecture_id: model.architecture_id.clone(),
        input_shape: model.input_shape.clone(),
        layers: model.layers.clone(),
        weights,
        biases,
        activations,
        profile,
    })
}

/// Calibration batch: the first `count` samples of a deterministic shuffle.
pub fn calibration_batch(data: &LabeledImages, count: usize, seed: u64) -> Tensor {
    let order = data.epoch_order(seed, usize::MAX / 2);
    let take: Vec<usize> = order.into_iter().take(count.min(data.len())).collect();
    data.subset(&take).images
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Precision;

    #[test]
    fn affine_map_examples() {
        let p = QuantParams { scale: 2.0 / 127.0, zero_point: 0, qmin: -127, qmax: 127 };
        let t = Tensor::from_vec(vec![0.0, 0.5]);
        let am = affine_map(&t, &p);
        assert_eq!(am.data()[0], 0.0);
        // rational oracle: 0.5 / (2/127) = 0.5 * 127 / 2 = 31.75
        assert!((am.data()[1] - 31.75).abs() < 1e-12);
    }

    #[test]
    fn rounding_cell_collision() {
        // Affine values 10.8 and 11.2 land in the same rounding cell.
        let p = QuantParams { scale: 1.0, zero_point: 0, qmin: -127, qmax: 127 };
        assert_eq!(p.quantize(10.8), 11);
        assert_eq!(p.quantize(11.2), 11);
    }

    #[test]
    fn quantize_weights_example_values() {
        let t = Tensor::from_vec(vec![-2.0, 1.0, 0.5]);
        let (q, p) = quantize_weights(&t, QuantProfile::Tflite127).unwrap();
        assert_eq!(p.scale, 2.0 / 127.0);
        assert_eq!(p.zero_point, 0);
        // rational oracle: 1.0/(2/127) = 63.5 rounds away from zero to 64;
        // 0.5/(2/127) = 31.75 rounds to 32
        assert_eq!(q, vec![-127, 64, 32]);
    }

    #[test]
    fn zero_tensor_takes_unit_scale() {
        let t = Tensor::from_vec(vec![0.0; 4]);
        let (q, p) = quantize_weights(&t, QuantProfile::Tflite127).unwrap();
        assert_eq!(p.scale, 1.0);
        assert!(q.iter().all(|&x| x == 0));
    }

    #[test]
    fn endpoint_maps_to_qmax() {
        let t = Tensor::from_vec(vec![127.0 * 0.01]);
        let (q, _) = quantize_weights(&t, QuantProfile::Tflite127).unwrap();
        assert_eq!(q, vec![127]);
    }

    #[test]
    fn activation_params_from_range() {
        // observed range [-1, 3] over [-127, 127]
        let p = QuantParams::from_range(-1.0, 3.0, (-127, 127));
        assert!((p.scale - 4.0 / 254.0).abs() < 1e-18);
        assert_eq!(p.zero_point, -64);

        // symmetric range has zero point 0
        let p = QuantParams::from_range(-0.7, 0.7, (-127, 127));
        assert_eq!(p.zero_point, 0);

        // degenerate range
        let p = QuantParams::from_range(0.25, 0.25, (-127, 127));
        assert_eq!(p.scale, 1.0);
        assert_eq!(p.zero_point, -127);
    }

    #[test]
    fn round_trip_error_bounded_by_half_scale() {
        let p = QuantParams::symmetric(2.0, (-127, 127));
        for i in 0..1000 {
            let v = -2.0 + 4.0 * (i as f64) / 999.0;
            let back = p.dequantize(p.quantize(v));
            assert!((back - v).abs() <= p.scale / 2.0 + 1e-15, "v={v} back={back}");
        }
    }

    #[test]
    fn quantization_is_monotone() {
        let p = QuantParams::symmetric(1.5, (-127, 127));
        let mut last = i32::MIN;
        for i in 0..500 {
            let v = -2.0 + 4.0 * (i as f64) / 499.0;
            let q = p.quantize(v);
            assert!(q >= last);
            last = q;
        }
    }

    #[test]
    fn quantize_model_is_deterministic() {
        let model = Model::mlp(&[4, 4, 1], 3, Precision::F32, 5).unwrap();
        let calib = Tensor::new(vec![6, 4, 4, 1], (0..96).map(|i| (i % 17) as f64 / 16.0).collect()).unwrap();
        let a = quantize_model(&model, &calib, QuantProfile::Tflite127).unwrap();
        let b = quantize_model(&model, &calib, QuantProfile::Tflite127).unwrap();
        assert_eq!(a, b);
    }
}

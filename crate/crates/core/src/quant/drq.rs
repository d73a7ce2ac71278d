//! Dynamic-range quantization: weights carry int-8 values exactly as in the
//! full-integer mode, activations are quantized on the fly from each batch's
//! observed range, and every layer output is dequantized back to float.
//! No calibration set is involved.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::nn::{LayerSpec, Model};
use crate::quant::{QTensor, QuantParams, QuantProfile};
use crate::tensor::{im2col, matmul_raw, ConvGeom, Padding, Tensor};

/// Int-8 weights plus float biases; activations have no stored params.
#[derive(Debug, Clone)]
pub struct DrqModel {
    pub architecture_id: String,
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
    pub weights: BTreeMap<String, QTensor>,
    pub biases: BTreeMap<String, Tensor>,
    pub profile: QuantProfile,
}

impl DrqModel {
    /// Quantize the weights of a float model; the weight conversion is the
    /// same one the full-integer mode uses.
    pub fn from_model(model: &Model, profile: QuantProfile) -> Result<DrqModel> {
        let mut weights = BTreeMap::new();
        for (name, w) in &model.weights {
            weights.insert(name.clone(), QTensor::from_tensor(w, profile)?);
        }
        Ok(DrqModel {
            architecture_id: model.architecture_id.clone(),
            input_shape: model.input_shape.clone(),
            layers: model.layers.clone(),
            weights,
            biases: model.biases.clone(),
            profile,
        })
    }

    /// Float-in/float-out inference: per parameterized layer, quantize the
    /// incoming batch from its runtime min/max, multiply in integers, then
    /// dequantize the accumulator.
    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        let shape = input.shape().to_vec();
        if shape.len() != 4 || shape[1..] != self.input_shape[..] {
            return Err(Error::ShapeMismatch { op: "drq_forward", lhs: shape, rhs: self.input_shape.clone() });
        }
        let batch = shape[0];
        let range = self.profile.activation_range();
        let mut x = input.clone();
        for layer in &self.layers {
            x = match layer {
                LayerSpec::Conv2d { name, stride, padding, .. } => {
                    let (q, params) = quantize_batch(&x, range)?;
                    let w = &self.weights[name];
                    let acc = conv_plain(&q, &w.as_float(), *stride, *padding)?;
                    dequant_acc(acc, params.scale * w.params.scale, &self.biases[name])?
                }
                LayerSpec::Dense { name, .. } => {
                    let (q, params) = quantize_batch(&x, range)?;
                    let w = &self.weights[name];
                    let sa = q.shape();
                    let acc = matmul_raw(q.data(), w.as_float().data(), sa[0], sa[1], w.shape[1]);
                    let acc = Tensor::new(vec![sa[0], w.shape[1]], acc)?;
                    dequant_acc(acc, params.scale * w.params.scale, &self.biases[name])?
                }
                LayerSpec::Relu => x.map(|v| v.max(0.0)),
                LayerSpec::MaxPool2 => max_pool2_plain(&x)?,
                LayerSpec::Flatten => {
                    let n: usize = x.shape()[1..].iter().product();
                    x.reshape(vec![batch, n])?
                }
                LayerSpec::SoftmaxOutput => x,
            };
        }
        Ok(x)
    }

    pub fn predict(&self, images: &Tensor) -> Result<Vec<usize>> {
        Ok(crate::nn::argmax_rows(&self.forward(images)?))
    }
}

/// Quantize a float batch from its own min/max, returning zero-centered
/// integer values (as exact floats) ready for integer multiplication.
fn quantize_batch(x: &Tensor, range: (i32, i32)) -> Result<(Tensor, QuantParams)> {
    let (lo, hi) = x.min_max()?;
    let params = QuantParams::from_range(lo, hi, range);
    let z = params.zero_point;
    let q = x.map(|v| (params.quantize(v) - z) as f64);
    Ok((q, params))
}

fn dequant_acc(acc: Tensor, scale: f64, bias: &Tensor) -> Result<Tensor> {
    let scaled = acc.map(|v| v * scale);
    crate::tensor::broadcast_binary(&scaled, bias, "drq_bias", |a, b| a + b)
}

pub(crate) fn conv_plain(x: &Tensor, kernel: &Tensor, stride: usize, padding: Padding) -> Result<Tensor> {
    let geom = ConvGeom::new(x.shape(), kernel.shape(), stride, padding)?;
    let col = im2col(x.data(), &geom);
    let out = matmul_raw(&col, kernel.data(), geom.rows(), geom.patch(), geom.cout);
    Tensor::new(vec![geom.n, geom.oh, geom.ow, geom.cout], out)
}

pub(crate) fn max_pool2_plain(x: &Tensor) -> Result<Tensor> {
    let s = x.shape();
    let (n, h, w, c) = (s[0], s[1], s[2], s[3]);
    let (oh, ow) = (h / 2, w / 2);
    if oh == 0 || ow == 0 {
        return Err(Error::EmptyReduction { op: "max_pool2" });
    }
    let src = x.data();
    let mut out = vec![f64::NEG_INFINITY; n * oh * ow * c];
    for b in 0..n {
        for i in 0..oh {
            for j in 0..ow {
                for ch in 0..c {
                    let mut best = f64::NEG_INFINITY;
                    for di in 0..2 {
                        for dj in 0..2 {
                            best = best.max(src[((b * h + 2 * i + di) * w + 2 * j + dj) * c + ch]);
                        }
                    }
                    out[((b * oh + i) * ow + j) * c + ch] = best;
                }
            }
        }
    }
    Tensor::new(vec![n, oh, ow, c], out)
}

//! Reference integer-only-arithmetic inference. Deliberately simple
//! per-sample scalar loops: this path is the oracle the float emulator is
//! checked against, so clarity wins over speed everywhere.

use crate::error::{Error, Result};
use crate::nn::LayerSpec;
use crate::quant::QuantizedModel;
use crate::tensor::{round_half_away, ConvGeom, Padding, Tensor};

/// Result of the reference path: dequantized logits, the full int-8
/// activation trace (one entry per layer boundary, batch-concatenated), and
/// whether any accumulator left the int-32 range and was widened.
pub struct IntegerForward {
    pub logits: Tensor,
    pub trace: Vec<Vec<i8>>,
    pub widened: bool,
}

/// Run `[N, H, W, C]` float inputs through the quantized model with int-8
/// weights and int-32 accumulation, requantizing at every boundary with a
/// real-valued multiplier.
pub fn integer_forward(qm: &QuantizedModel, input: &Tensor) -> Result<IntegerForward> {
    let shape = input.shape().to_vec();
    if shape.len() != 4 || shape[1..] != qm.input_shape[..] {
        return Err(Error::ShapeMismatch { op: "integer_forward", lhs: shape, rhs: qm.input_shape.clone() });
    }
    let batch = shape[0];
    let boundary_dims = boundary_dims(qm)?;
    let mut trace: Vec<Vec<i8>> = boundary_dims
        .iter()
        .map(|d| Vec::with_capacity(batch * d.iter().product::<usize>()))
        .collect();
    let num_classes = qm.num_classes();
    let mut logits = vec![0.0; batch * num_classes];
    let mut widened = false;

    let per_sample = input.len() / batch;
    for s in 0..batch {
        let pixels = &input.data()[s * per_sample..(s + 1) * per_sample];
        // model input boundary
        let p0 = &qm.activations[0];
        let mut act: Vec<i32> = pixels.iter().map(|&v| p0.quantize(v)).collect();
        let mut dims = qm.input_shape.clone();
        push_trace(&mut trace[0], &act);

        for (li, layer) in qm.layers.iter().enumerate() {
            let pin = &qm.activations[li];
            let pout = &qm.activations[li + 1];
            match layer {
                LayerSpec::Conv2d { name, stride, padding, .. } => {
                    let w = &qm.weights[name];
                    let b = &qm.biases[name];
                    let m = qm.requant_multiplier(li, name);
                    let (next, over) =
                        conv_int(&act, &dims, w, &b.data, *stride, *padding, pin.zero_point, m, pout)?;
                    widened |= over;
                    act = next;
                    dims = boundary_dims[li + 1].clone();
                }
                LayerSpec::Dense { name, output, .. } => {
                    let w = &qm.weights[name];
                    let b = &qm.biases[name];
                    let m = qm.requant_multiplier(li, name);
                    let (next, over) = dense_int(&act, w, &b.data, *output, pin.zero_point, m, pout);
                    widened |= over;
                    act = next;
                    dims = vec![*output];
                }
                LayerSpec::Relu => {
                    // relu fused into requantization: clamp floor at the output
                    // zero point, which is exactly where the float value crosses 0
                    let m = qm.act_multiplier(li);
                    act = act
                        .iter()
                        .map(|&q| requant(q as i64 - pin.zero_point as i64, m, pout, pout.zero_point))
                        .collect();
                }
                LayerSpec::MaxPool2 => {
                    let (h, w, c) = (dims[0], dims[1], dims[2]);
                    let (oh, ow) = (h / 2, w / 2);
                    let m = qm.act_multiplier(li);
                    let mut next = vec![0i32; oh * ow * c];
                    for i in 0..oh {
                        for j in 0..ow {
                            for ch in 0..c {
                                let mut best = i32::MIN;
                                for di in 0..2 {
                                    for dj in 0..2 {
                                        let v = act[((2 * i + di) * w + 2 * j + dj) * c + ch];
                                        best = best.max(v);
                                    }
                                }
                                next[(i * ow + j) * c + ch] =
                                    requant(best as i64 - pin.zero_point as i64, m, pout, pout.qmin);
                            }
                        }
                    }
                    act = next;
                    dims = vec![oh, ow, c];
                }
                LayerSpec::Flatten => {
                    dims = vec![dims.iter().product()];
                }
                LayerSpec::SoftmaxOutput => {}
            }
            push_trace(&mut trace[li + 1], &act);
        }

        let plast = qm.activations.last().expect("boundaries");
        for (k, &q) in act.iter().enumerate() {
            logits[s * num_classes + k] = plast.dequantize(q);
        }
    }

    Ok(IntegerForward {
        logits: Tensor::new(vec![batch, num_classes], logits)?,
        trace,
        widened,
    })
}

fn push_trace(dst: &mut Vec<i8>, act: &[i32]) {
    dst.extend(act.iter().map(|&q| q as i8));
}

/// Requantize an int accumulator: `round(acc * m) + zero_point`, clamped to
/// `[floor, qmax]`.
#[inline]
fn requant(acc: i64, m: f64, pout: &crate::quant::QuantParams, floor: i32) -> i32 {
    let q = round_half_away(acc as f64 * m) as i64 + pout.zero_point as i64;
    q.clamp(floor.max(pout.qmin) as i64, pout.qmax as i64) as i32
}

#[allow(clippy::too_many_arguments)]
fn conv_int(
    act: &[i32],
    dims: &[usize],
    weight: &crate::quant::QTensor,
    bias: &[i32],
    stride: usize,
    padding: Padding,
    zi: i32,
    m: f64,
    pout: &crate::quant::QuantParams,
) -> Result<(Vec<i32>, bool)> {
    let (h, w, cin) = (dims[0], dims[1], dims[2]);
    let ks = &weight.shape;
    let geom = ConvGeom::new(&[1, h, w, cin], ks, stride, padding)?;
    let (kh, kw, cout) = (ks[0], ks[1], ks[3]);
    let mut out = vec![0i32; geom.oh * geom.ow * cout];
    let mut widened = false;
    for i in 0..geom.oh {
        for j in 0..geom.ow {
            for co in 0..cout {
                let mut acc: i64 = 0;
                let base_i = (i * stride) as isize - geom.pad_top as isize;
                let base_j = (j * stride) as isize - geom.pad_left as isize;
                for ki in 0..kh {
                    let si = base_i + ki as isize;
                    if si < 0 || si >= h as isize {
                        continue;
                    }
                    for kj in 0..kw {
                        let sj = base_j + kj as isize;
                        if sj < 0 || sj >= w as isize {
                            continue;
                        }
                        for ci in 0..cin {
                            let q = act[((si as usize) * w + sj as usize) * cin + ci] - zi;
                            let wv = weight.data[((ki * kw + kj) * cin + ci) * cout + co] as i32;
                            acc += (q * wv) as i64;
                            if acc > i32::MAX as i64 || acc < i32::MIN as i64 {
                                widened = true;
                            }
                        }
                    }
                }
                acc += bias[co] as i64;
                if acc > i32::MAX as i64 || acc < i32::MIN as i64 {
                    widened = true;
                }
                out[(i * geom.ow + j) * cout + co] = requant(acc, m, pout, pout.qmin);
            }
        }
    }
    Ok((out, widened))
}

fn dense_int(
    act: &[i32],
    weight: &crate::quant::QTensor,
    bias: &[i32],
    output: usize,
    zi: i32,
    m: f64,
    pout: &crate::quant::QuantParams,
) -> (Vec<i32>, bool) {
    let input = act.len();
    let mut out = vec![0i32; output];
    let mut widened = false;
    for o in 0..output {
        let mut acc: i64 = 0;
        for i in 0..input {
            let q = act[i] - zi;
            let wv = weight.data[i * output + o] as i32;
            acc += (q * wv) as i64;
            if acc > i32::MAX as i64 || acc < i32::MIN as i64 {
                widened = true;
            }
        }
        acc += bias[o] as i64;
        if acc > i32::MAX as i64 || acc < i32::MIN as i64 {
            widened = true;
        }
        out[o] = requant(acc, m, pout, pout.qmin);
    }
    (out, widened)
}

/// Per-sample shape at each boundary.
pub(crate) fn boundary_dims(qm: &QuantizedModel) -> Result<Vec<Vec<usize>>> {
    let mut dims = vec![qm.input_shape.clone()];
    let mut cur = qm.input_shape.clone();
    for layer in &qm.layers {
        cur = match layer {
            LayerSpec::Conv2d { name, stride, padding, cout, .. } => {
                let ks = &qm.weights[name].shape;
                let geom = ConvGeom::new(&[1, cur[0], cur[1], cur[2]], ks, *stride, *padding)?;
                vec![geom.oh, geom.ow, *cout]
            }
            LayerSpec::Dense { output, .. } => vec![*output],
            LayerSpec::Relu | LayerSpec::SoftmaxOutput => cur,
            LayerSpec::MaxPool2 => vec![cur[0] / 2, cur[1] / 2, cur[2]],
            LayerSpec::Flatten => vec![cur.iter().product()],
        };
        dims.push(cur.clone());
    }
    Ok(dims)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quant::{QBias, QTensor, QuantParams, QuantProfile};
    use std::collections::BTreeMap;

    /// Identity-ish single dense layer: unit scale everywhere, zero points 0.
    fn unit_dense_model() -> QuantizedModel {
        let unit = QuantParams { scale: 1.0, zero_point: 0, qmin: -127, qmax: 127 };
        let mut weights = BTreeMap::new();
        weights.insert(
            "d".to_string(),
            QTensor { data: vec![1], shape: vec![1, 1], params: unit.clone() },
        );
        let mut biases = BTreeMap::new();
        biases.insert("d".to_string(), QBias { data: vec![0], shape: vec![1], scale: 1.0 });
        QuantizedModel {
            architecture_id: "unit".into(),
            input_shape: vec![1, 1, 1],
            layers: vec![
                LayerSpec::Flatten,
                LayerSpec::Dense { name: "d".into(), input: 1, output: 1 },
                LayerSpec::SoftmaxOutput,
            ],
            weights,
            biases,
            activations: vec![unit.clone(), unit.clone(), unit.clone(), unit],
            profile: QuantProfile::Tflite127,
        }
    }

    #[test]
    fn identity_dense_passes_small_ints() {
        let qm = unit_dense_model();
        let x = Tensor::new(vec![1, 1, 1, 1], vec![5.0]).unwrap();
        let out = integer_forward(&qm, &x).unwrap();
        assert_eq!(out.logits.data(), &[5.0]);
        assert_eq!(out.trace.last().unwrap(), &vec![5i8]);
        assert!(!out.widened);
    }

    #[test]
    fn float_input_enters_as_nearest_integer() {
        // an input of 5.3 under unit scale is carried as integer 5
        let qm = unit_dense_model();
        let x = Tensor::new(vec![1, 1, 1, 1], vec![5.3]).unwrap();
        let out = integer_forward(&qm, &x).unwrap();
        assert_eq!(out.trace[0], vec![5i8]);
        assert_eq!(out.logits.data(), &[5.0]);
    }
}

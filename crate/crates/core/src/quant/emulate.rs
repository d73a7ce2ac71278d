//! Integer-arithmetic emulation over float tensors holding integer values
//! (a quantized weight 5 is carried as 5.0). Every arithmetic step mirrors
//! the reference integer path expression-for-expression, so the two produce
//! identical int-8 traces; integers stay exact because the tape runs in
//! 64-bit mode regardless of the model's training precision.
//!
//! With rounding expressed as straight-through nodes the whole forward is
//! differentiable, which is what lets trigger reverse-engineering attack the
//! quantized model directly.

use crate::error::{Error, Result};
use crate::nn::LayerSpec;
use crate::quant::QuantizedModel;
use crate::tensor::{Precision, Tape, Tensor, Var};

/// Logits plus the int-8 trace extracted from the emulated boundaries.
pub struct EmulatedForward {
    pub logits: Tensor,
    pub trace: Vec<Vec<i8>>,
}

/// Build the emulated quantized forward on `tape` (which must run in 64-bit
/// mode). Returns the dequantized logits and the boundary values, whose
/// tensors hold exact int-8 activations as floats.
pub fn emulate_on_tape(qm: &QuantizedModel, tape: &mut Tape, input: Var) -> Result<(Var, Vec<Var>)> {
    if tape.precision() != Precision::F64 {
        return Err(Error::Config(
            "integer emulation requires a 64-bit tape; 32-bit storage cannot hold int-32 accumulators exactly".into(),
        ));
    }
    let shape = tape.shape(input).to_vec();
    if shape.len() != 4 || shape[1..] != qm.input_shape[..] {
        return Err(Error::ShapeMismatch { op: "emulated_forward", lhs: shape, rhs: qm.input_shape.clone() });
    }
    let batch = shape[0];

    // model input boundary: q0 = clamp(round(x / s + z))
    let p0 = &qm.activations[0];
    let s0 = tape.scalar(p0.scale);
    let mut x = tape.div(input, s0)?;
    x = tape.add_scalar(x, p0.zero_point as f64)?;
    x = tape.round_ste(x)?;
    x = tape.clamp(x, p0.qmin as f64, p0.qmax as f64)?;
    let mut boundaries = vec![x];

    for (li, layer) in qm.layers.iter().enumerate() {
        let pin = &qm.activations[li];
        let pout = &qm.activations[li + 1];
        x = match layer {
            LayerSpec::Conv2d { name, stride, padding, .. } => {
                let w = tape.constant(qm.weights[name].as_float());
                let b = tape.constant(qm.biases[name].as_float());
                let centered = tape.add_scalar(x, -(pin.zero_point as f64))?;
                let acc = tape.conv2d(centered, w, *stride, *padding)?;
                let acc = tape.add(acc, b)?;
                requant(tape, acc, qm.requant_multiplier(li, name), pout, pout.qmin)?
            }
            LayerSpec::Dense { name, .. } => {
                let w = tape.constant(qm.weights[name].as_float());
                let b = tape.constant(qm.biases[name].as_float());
                let centered = tape.add_scalar(x, -(pin.zero_point as f64))?;
                let acc = tape.matmul(centered, w)?;
                let acc = tape.add(acc, b)?;
                requant(tape, acc, qm.requant_multiplier(li, name), pout, pout.qmin)?
            }
            LayerSpec::Relu => {
                // fused: clamp floor at the output zero point
                let centered = tape.add_scalar(x, -(pin.zero_point as f64))?;
                requant(tape, centered, qm.act_multiplier(li), pout, pout.zero_point)?
            }
            LayerSpec::MaxPool2 => {
                let pooled = tape.max_pool2(x)?;
                let centered = tape.add_scalar(pooled, -(pin.zero_point as f64))?;
                requant(tape, centered, qm.act_multiplier(li), pout, pout.qmin)?
            }
            LayerSpec::Flatten => {
                let n: usize = tape.shape(x)[1..].iter().product();
                tape.reshape(x, vec![batch, n])?
            }
            LayerSpec::SoftmaxOutput => x,
        };
        boundaries.push(x);
    }

    // dequantize logits
    let plast = qm.activations.last().expect("boundaries");
    let centered = tape.add_scalar(x, -(plast.zero_point as f64))?;
    let logits = tape.mul_scalar(centered, plast.scale)?;
    Ok((logits, boundaries))
}

fn requant(tape: &mut Tape, acc: Var, m: f64, pout: &crate::quant::QuantParams, floor: i32) -> Result<Var> {
    let scaled = tape.mul_scalar(acc, m)?;
    let rounded = tape.round_ste(scaled)?;
    let shifted = tape.add_scalar(rounded, pout.zero_point as f64)?;
    tape.clamp(shifted, floor.max(pout.qmin) as f64, pout.qmax as f64)
}

/// Convenience wrapper: run the emulation on a fresh no-grad 64-bit tape.
pub fn emulated_forward(qm: &QuantizedModel, input: &Tensor) -> Result<EmulatedForward> {
    let mut tape = Tape::no_grad(Precision::F64);
    let x = tape.input(input.clone(), false);
    let (logits, boundaries) = emulate_on_tape(qm, &mut tape, x)?;
    let trace = boundaries
        .iter()
        .map(|&b| tape.value(b).data().iter().map(|&v| v as i8).collect())
        .collect();
    Ok(EmulatedForward { logits: tape.value(logits).clone(), trace })
}

/// Predicted classes under emulated integer inference.
pub fn predict_quantized(qm: &QuantizedModel, images: &Tensor) -> Result<Vec<usize>> {
    Ok(crate::nn::argmax_rows(&emulated_forward(qm, images)?.logits))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Model;
    use crate::quant::{quantize_model, QuantProfile};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn quantized_weight_is_carried_as_float_integer() {
        let model = Model::mlp(&[2, 2, 1], 3, Precision::F32, 9).unwrap();
        let calib = Tensor::new(vec![4, 2, 2, 1], (0..16).map(|i| i as f64 / 15.0).collect()).unwrap();
        let qm = quantize_model(&model, &calib, QuantProfile::Tflite127).unwrap();
        let f = qm.weights["d1"].as_float();
        for (&fv, &qv) in f.data().iter().zip(&qm.weights["d1"].data) {
            assert_eq!(fv, qv as f64);
            assert_eq!(fv.fract(), 0.0);
        }
    }

    #[test]
    fn emulated_trace_equals_integer_trace_on_random_models() {
        for seed in 0..3u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let model = Model::mini_cnn(&[8, 8, 1], 4, Precision::F32, seed).unwrap();
            let calib = Tensor::new(
                vec![5, 8, 8, 1],
                (0..5 * 64).map(|_| rng.random_range(0.0..1.0)).collect(),
            )
            .unwrap();
            let qm = quantize_model(&model, &calib, QuantProfile::Tflite127).unwrap();
            let input = Tensor::new(
                vec![3, 8, 8, 1],
                (0..3 * 64).map(|_| rng.random_range(0.0..1.0)).collect(),
            )
            .unwrap();
            let em = emulated_forward(&qm, &input).unwrap();
            let it = crate::quant::integer_forward(&qm, &input).unwrap();
            assert_eq!(em.trace.len(), it.trace.len());
            for (b, (e, i)) in em.trace.iter().zip(&it.trace).enumerate() {
                assert_eq!(e, i, "boundary {b} differs (seed {seed})");
            }
            for (l, r) in em.logits.data().iter().zip(it.logits.data()) {
                assert_eq!(l, r);
            }
        }
    }

    #[test]
    fn emulation_rejects_f32_tapes() {
        let model = Model::mlp(&[2, 2, 1], 2, Precision::F32, 1).unwrap();
        let calib = Tensor::new(vec![2, 2, 2, 1], vec![0.1; 8]).unwrap();
        let qm = quantize_model(&model, &calib, QuantProfile::Tflite127).unwrap();
        let mut tape = Tape::no_grad(Precision::F32);
        let x = tape.input(Tensor::zeros(vec![1, 2, 2, 1]), false);
        assert!(emulate_on_tape(&qm, &mut tape, x).is_err());
    }
}

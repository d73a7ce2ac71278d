//! Single-loss baseline: train the float model and its emulated quantized
//! counterpart jointly, asking the float side to stay clean on triggers while
//! the quantized side learns the backdoor. Kept as an instability reference;
//! the two-stage attack exists because this does not converge reliably.

use std::collections::BTreeMap;

use crate::attack::{weight_scales, AttackConfig, AttackDatasets};
use crate::data::LabeledImages;
use crate::defense::{metric_asr, metric_cda, ModelRef};
use crate::error::{Error, Result};
use crate::nn::{LayerSpec, Model, ModelVars, Optimizer};
use crate::quant::{quantize_model, QuantParams, QuantProfile};
use crate::tensor::{Precision, Tape, Var};

#[derive(Debug, Clone, Copy)]
pub struct JointEpoch {
    pub epoch: usize,
    pub cda_fp: f64,
    pub asr_fp: f64,
    pub cda_int8: f64,
    pub asr_int8: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, Default)]
pub struct JointLog {
    pub rows: Vec<JointEpoch>,
}

impl JointLog {
    /// Sample standard deviation of epoch-to-epoch changes in the quantized
    /// attack success rate; the instability statistic.
    pub fn int8_asr_step_std(&self) -> f64 {
        step_std(&self.rows.iter().map(|r| r.asr_int8).collect::<Vec<_>>())
    }
}

/// Standard deviation of consecutive differences of a series.
pub(crate) fn step_std(series: &[f64]) -> f64 {
    if series.len() < 3 {
        return 0.0;
    }
    let diffs: Vec<f64> = series.windows(2).map(|w| w[1] - w[0]).collect();
    let mean = diffs.iter().sum::<f64>() / diffs.len() as f64;
    let var = diffs.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / (diffs.len() - 1) as f64;
    var.sqrt()
}

/// Emulated quantized forward wired through the live weight variables:
/// weights pass a straight-through rounding of their affine image, biases are
/// requantized as detached int-32 constants, activations use params
/// recalibrated at the top of the epoch. Gradients reach the float weights
/// through every rounding node.
#[allow(clippy::too_many_arguments)]
fn fake_quant_forward(
    tape: &mut Tape,
    model: &Model,
    vars: &ModelVars,
    act: &[QuantParams],
    scales: &BTreeMap<String, f64>,
    profile: QuantProfile,
    input: Var,
) -> Result<Var> {
    let (wmin, wmax) = profile.weight_range();
    let batch = tape.shape(input)[0];

    let p0 = &act[0];
    let s0 = tape.scalar(p0.scale);
    let mut x = tape.div(input, s0)?;
    x = tape.add_scalar(x, p0.zero_point as f64)?;
    x = tape.round_ste(x)?;
    x = tape.clamp(x, p0.qmin as f64, p0.qmax as f64)?;

    // fake-quantize one parameterized layer's weights and bias, then apply
    // the integer product and requantization
    let param_layer = |tape: &mut Tape,
                           x: Var,
                           name: &str,
                           conv: Option<(usize, crate::tensor::Padding)>,
                           pin: &QuantParams,
                           pout: &QuantParams|
     -> Result<Var> {
        let sw = scales[name];
        let s = tape.scalar(sw);
        let am = tape.div(vars.weights[name], s)?;
        let qw = tape.round_ste(am)?;
        let qw = tape.clamp(qw, wmin as f64, wmax as f64)?;
        let bs = tape.scalar(pin.scale * sw);
        let bq = tape.div(vars.biases[name], bs)?;
        let qb = tape.round_detach(bq);
        let centered = tape.add_scalar(x, -(pin.zero_point as f64))?;
        let acc = match conv {
            Some((stride, padding)) => tape.conv2d(centered, qw, stride, padding)?,
            None => tape.matmul(centered, qw)?,
        };
        let acc = tape.add(acc, qb)?;
        requant(tape, acc, pin.scale * sw / pout.scale, pout, pout.qmin)
    };

    for (li, layer) in model.layers.iter().enumerate() {
        let pin = &act[li];
        let pout = &act[li + 1];
        x = match layer {
            LayerSpec::Conv2d { name, stride, padding, .. } => {
                param_layer(tape, x, name, Some((*stride, *padding)), pin, pout)?
            }
            LayerSpec::Dense { name, .. } => param_layer(tape, x, name, None, pin, pout)?,
            LayerSpec::Relu => {
                let centered = tape.add_scalar(x, -(pin.zero_point as f64))?;
                requant(tape, centered, pin.scale / pout.scale, pout, pout.zero_point)?
            }
            LayerSpec::MaxPool2 => {
                let pooled = tape.max_pool2(x)?;
                let centered = tape.add_scalar(pooled, -(pin.zero_point as f64))?;
                requant(tape, centered, pin.scale / pout.scale, pout, pout.qmin)?
            }
            LayerSpec::Flatten => {
                let n: usize = tape.shape(x)[1..].iter().product();
                tape.reshape(x, vec![batch, n])?
            }
            LayerSpec::SoftmaxOutput => x,
        };
    }

    let plast = act.last().expect("boundaries");
    let centered = tape.add_scalar(x, -(plast.zero_point as f64))?;
    tape.mul_scalar(centered, plast.scale)
}

fn requant(tape: &mut Tape, acc: Var, m: f64, pout: &QuantParams, floor: i32) -> Result<Var> {
    let scaled = tape.mul_scalar(acc, m)?;
    let rounded = tape.round_ste(scaled)?;
    let shifted = tape.add_scalar(rounded, pout.zero_point as f64)?;
    tape.clamp(shifted, floor.max(pout.qmin) as f64, pout.qmax as f64)
}

/// Train the four-term joint loss: float and quantized cross-entropy on clean
/// batches, float cross-entropy on cover batches, quantized cross-entropy on
/// poisoned batches. Records both precisions per epoch; instability is the
/// expected outcome, not an error.
pub fn intuitive_joint_train(
    model: &mut Model,
    ds: &AttackDatasets,
    config: &AttackConfig,
    profile: QuantProfile,
    eval: &LabeledImages,
    epochs: usize,
) -> Result<JointLog> {
    config.validate(ds.train.len())?;
    let mut optimizer = Optimizer::adam(config.stage1_lr);
    let mut log = JointLog::default();
    let mut cover = crate::attack::BatchCycler::new(&ds.cover, config.seed ^ 0x11);
    let mut poison = crate::attack::BatchCycler::new(&ds.poisoned, config.seed ^ 0x22);

    for epoch in 0..epochs {
        // activation params recalibrated once per epoch from the live model
        let act = crate::quant::calibrate_activations(model, &ds.calibration, profile)?;
        let order = ds.train.epoch_order(config.seed ^ 0x9A, epoch);
        let mut loss_sum = 0.0;
        let mut steps = 0usize;
        let mut start = 0usize;
        while start < order.len() {
            let clean = ds.train.batch(&order, start, config.batch_size);
            start += config.batch_size;
            let cov = cover.next(config.batch_size);
            let poi = poison.next(config.batch_size);

            // exact integer emulation needs 64-bit storage even though the
            // model itself trains in float-32 semantics
            let mut tape = Tape::new(Precision::F64);
            let vars = model.vars(&mut tape, true);
            let scales = weight_scales(model, profile);

            let xc = tape.input(clean.0.clone(), false);
            let float_clean = model.forward_vars(&mut tape, xc, &vars)?;
            let ce_fc = tape.cross_entropy(float_clean, &clean.1)?;

            let q_clean = fake_quant_forward(&mut tape, model, &vars, &act, &scales, profile, xc)?;
            let ce_qc = tape.cross_entropy(q_clean, &clean.1)?;

            let xv = tape.input(cov.0.clone(), false);
            let float_cover = model.forward_vars(&mut tape, xv, &vars)?;
            let ce_cov = tape.cross_entropy(float_cover, &cov.1)?;

            let xp = tape.input(poi.0.clone(), false);
            let q_poison = fake_quant_forward(&mut tape, model, &vars, &act, &scales, profile, xp)?;
            let ce_poi = tape.cross_entropy(q_poison, &poi.1)?;

            let a = tape.add(ce_fc, ce_qc)?;
            let b = tape.add(ce_cov, ce_poi)?;
            let loss = tape.add(a, b)?;
            let loss_val = tape.value(loss).item();
            if !loss_val.is_finite() {
                return Err(Error::Train(format!("joint loss diverged at epoch {epoch}")));
            }
            loss_sum += loss_val;
            steps += 1;
            tape.backward(loss)?;

            let precision = model.precision;
            let mut triples: Vec<(String, &mut crate::tensor::Tensor, &crate::tensor::Tensor)> = Vec::new();
            let wg: BTreeMap<String, crate::tensor::Tensor> = vars
                .weights
                .iter()
                .filter_map(|(n, &v)| tape.grad(v).map(|g| (n.clone(), g.clone())))
                .collect();
            let bg: BTreeMap<String, crate::tensor::Tensor> = vars
                .biases
                .iter()
                .filter_map(|(n, &v)| tape.grad(v).map(|g| (n.clone(), g.clone())))
                .collect();
            for (name, w) in model.weights.iter_mut() {
                if let Some(g) = wg.get(name) {
                    triples.push((format!("weight.{name}"), w, g));
                }
            }
            for (name, bt) in model.biases.iter_mut() {
                if let Some(g) = bg.get(name) {
                    triples.push((format!("bias.{name}"), bt, g));
                }
            }
            optimizer.step(triples, precision);
        }

        let cda_fp = metric_cda(ModelRef::Float(model), eval)?;
        let asr_fp = metric_asr(ModelRef::Float(model), eval, &ds.trigger)?;
        let qm = quantize_model(model, &ds.calibration, profile)?;
        let cda_int8 = metric_cda(ModelRef::Quantized(&qm), eval)?;
        let asr_int8 = metric_asr(ModelRef::Quantized(&qm), eval, &ds.trigger)?;
        log.rows.push(JointEpoch {
            epoch,
            cda_fp,
            asr_fp,
            cda_int8,
            asr_int8,
            loss: loss_sum / steps as f64,
        });
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn step_std_of_constant_series_is_zero() {
        assert_eq!(step_std(&[0.5, 0.5, 0.5, 0.5]), 0.0);
    }

    #[test]
    fn step_std_grows_with_oscillation() {
        let calm = step_std(&[0.1, 0.12, 0.11, 0.13, 0.12]);
        let wild = step_std(&[0.1, 0.9, 0.2, 0.8, 0.1]);
        assert!(wild > calm);
    }
}

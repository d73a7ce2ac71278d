//! The four attack losses, composed from tape operations so every gradient
//! flows through the same autodiff path the optimizer consumes.

use std::collections::BTreeMap;

use crate::attack::PgdConstraints;
use crate::error::Result;
use crate::nn::{Model, ModelVars};
use crate::quant::{QuantParams, QuantProfile};
use crate::tensor::{Tape, Tensor, Var};

/// Current symmetric weight scale per tensor (`max_abs / qmax`, 1 for an
/// all-zero tensor). Recomputed once per optimization step; treated as a
/// constant inside the step.
pub fn weight_scales(model: &Model, profile: QuantProfile) -> BTreeMap<String, f64> {
    model
        .weights
        .iter()
        .map(|(name, w)| {
            (name.clone(), QuantParams::symmetric(w.max_abs(), profile.weight_range()).scale)
        })
        .collect()
}

/// Backdoor-insertion loss: cross-entropy on a clean batch plus cross-entropy
/// on a poisoned batch labeled with the target class.
pub fn loss_l1(
    tape: &mut Tape,
    model: &Model,
    vars: &ModelVars,
    clean: (&Tensor, &[usize]),
    poisoned: (&Tensor, &[usize]),
) -> Result<Var> {
    let xc = tape.input(clean.0.clone(), false);
    let logits_c = model.forward_vars(tape, xc, vars)?;
    let ce_c = tape.cross_entropy(logits_c, clean.1)?;
    let xp = tape.input(poisoned.0.clone(), false);
    let logits_p = model.forward_vars(tape, xp, vars)?;
    let ce_p = tape.cross_entropy(logits_p, poisoned.1)?;
    tape.add(ce_c, ce_p)
}

/// Rounding-uncertainty loss: for every weight tensor, the negated mean of
/// `(|AM(w) - round(AM(w))| - 0.5)^2`, with the rounded value detached so the
/// gradient only flows through the affine image. Always in
/// `[-0.25 * tensor_count, 0]`.
pub fn loss_l2(
    tape: &mut Tape,
    vars: &ModelVars,
    scales: &BTreeMap<String, f64>,
) -> Result<Var> {
    let mut total: Option<Var> = None;
    for (name, &w) in vars.weights.iter() {
        let s = tape.scalar(scales[name]);
        let am = tape.div(w, s)?;
        let rounded = tape.round_detach(am);
        let d = tape.sub(am, rounded)?;
        let ad = tape.abs(d)?;
        let shifted = tape.add_scalar(ad, -0.5)?;
        let sq = tape.square(shifted)?;
        let mean = tape.mean(sq)?;
        total = Some(match total {
            Some(t) => tape.add(t, mean)?,
            None => mean,
        });
    }
    let sum = total.expect("at least one weight tensor");
    tape.neg(sum)
}

/// Backdoor-removal loss: cross-entropy on a clean batch plus cross-entropy
/// on a cover batch (trigger stamped, true labels).
pub fn loss_l3(
    tape: &mut Tape,
    model: &Model,
    vars: &ModelVars,
    clean: (&Tensor, &[usize]),
    cover: (&Tensor, &[usize]),
) -> Result<Var> {
    loss_l1(tape, model, vars, clean, cover)
}

/// Preservation loss against the stage-2 snapshot: per tensor the mean
/// squared difference between the current rounding image (straight-through
/// gradient) and the frozen int-8 reference, plus the squared scale drift.
pub fn loss_l4(
    tape: &mut Tape,
    vars: &ModelVars,
    constraints: &PgdConstraints,
    current_scales: &BTreeMap<String, f64>,
) -> Result<Var> {
    let mut total: Option<Var> = None;
    let mut scale_drift = 0.0;
    for (name, &w) in vars.weights.iter() {
        let s_rm = current_scales[name];
        let s_bd = constraints.scales[name];
        scale_drift += (s_rm - s_bd) * (s_rm - s_bd);
        let s = tape.scalar(s_rm);
        let am = tape.div(w, s)?;
        let q_rm = tape.round_ste(am)?;
        let q_bd = tape.constant(constraints.target_float(name));
        let diff = tape.sub(q_rm, q_bd)?;
        let sq = tape.square(diff)?;
        let mean = tape.mean(sq)?;
        total = Some(match total {
            Some(t) => tape.add(t, mean)?,
            None => mean,
        });
    }
    let weight_term = total.expect("at least one weight tensor");
    tape.add_scalar(weight_term, scale_drift)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Precision;

    fn tiny_model() -> Model {
        Model::mlp(&[2, 2, 1], 2, Precision::F64, 3).unwrap()
    }

    #[test]
    fn l2_of_exact_integers_is_quarter_per_tensor() {
        // single weight whose affine image is integral: per-weight term -0.25
        let mut tape = Tape::new(Precision::F64);
        let mut model = tiny_model();
        model.weights.insert("d1".into(), Tensor::full(vec![4, 256], 0.5));
        model.weights.insert("d2".into(), Tensor::full(vec![256, 2], 0.5));
        let vars = model.vars(&mut tape, true);
        // scale 0.5/127 puts every AM exactly at 127
        let scales = weight_scales(&model, QuantProfile::Tflite127);
        let l2 = loss_l2(&mut tape, &vars, &scales).unwrap();
        assert!((tape.value(l2).item() - (-0.5)).abs() < 1e-9);
    }

    #[test]
    fn l2_direct_formula_oracle() {
        // distances [0, 0.25, 0.5] -> -(1/3)((0-.5)^2 + (.25-.5)^2 + (.5-.5)^2)
        let expect = -(0.25 + 0.0625 + 0.0) / 3.0;
        let mut tape = Tape::new(Precision::F64);
        let layers = vec![
            crate::nn::LayerSpec::Flatten,
            crate::nn::LayerSpec::Dense { name: "d".into(), input: 1, output: 3 },
            crate::nn::LayerSpec::SoftmaxOutput,
        ];
        let mut model = Model::build("t", &[1, 1, 1], layers, Precision::F64, 0).unwrap();
        // with scale forced to 1 via max_abs = qmax: AM == w; distances 0, .25, .5
        model.weights.insert("d".into(), Tensor::new(vec![1, 3], vec![127.0, 10.25, 9.5]).unwrap());
        let vars = model.vars(&mut tape, true);
        let scales = weight_scales(&model, QuantProfile::Tflite127);
        assert_eq!(scales["d"], 1.0);
        let l2 = loss_l2(&mut tape, &vars, &scales).unwrap();
        assert!((tape.value(l2).item() - expect).abs() < 1e-12, "{} vs {expect}", tape.value(l2).item());
    }

    #[test]
    fn l2_stays_within_bounds() {
        let mut tape = Tape::new(Precision::F64);
        let model = tiny_model();
        let vars = model.vars(&mut tape, true);
        let scales = weight_scales(&model, QuantProfile::Tflite127);
        let l2 = loss_l2(&mut tape, &vars, &scales).unwrap();
        let v = tape.value(l2).item();
        let tensors = model.weights.len() as f64;
        assert!(v <= 0.0 && v >= -0.25 * tensors, "l2 {v}");
    }

    #[test]
    fn l1_reduces_to_plain_ce_when_model_fits_poison() {
        // saturated model: both terms near zero
        let mut model = tiny_model();
        for (_, w) in model.weights.iter_mut() {
            *w = Tensor::zeros(w.shape().to_vec());
        }
        model.biases.insert("d2".into(), Tensor::new(vec![2], vec![30.0, -30.0]).unwrap());
        let mut tape = Tape::new(Precision::F64);
        let vars = model.vars(&mut tape, false);
        let images = Tensor::zeros(vec![2, 2, 2, 1]);
        let labels = vec![0usize, 0];
        let l1 = loss_l1(&mut tape, &model, &vars, (&images, &labels), (&images, &labels)).unwrap();
        assert!(tape.value(l1).item() < 1e-3);
    }

    #[test]
    fn l1_matches_two_term_composition_oracle() {
        let model = tiny_model();
        let mut tape = Tape::new(Precision::F64);
        let vars = model.vars(&mut tape, false);
        let clean = Tensor::new(vec![2, 2, 2, 1], (0..8).map(|i| i as f64 / 8.0).collect()).unwrap();
        let pois = Tensor::new(vec![2, 2, 2, 1], (0..8).map(|i| (7 - i) as f64 / 8.0).collect()).unwrap();
        let (lc, lp) = (vec![0usize, 1], vec![1usize, 1]);
        let l1 = loss_l1(&mut tape, &model, &vars, (&clean, &lc), (&pois, &lp)).unwrap();
        // oracle: two independent cross-entropies composed outside the loss
        let ce = |imgs: &Tensor, labels: &[usize]| {
            let mut t = Tape::no_grad(Precision::F64);
            let x = t.input(imgs.clone(), false);
            let v = model.vars(&mut t, false);
            let logits = model.forward_vars(&mut t, x, &v).unwrap();
            let l = t.cross_entropy(logits, labels).unwrap();
            t.value(l).item()
        };
        let expect = ce(&clean, &lc) + ce(&pois, &lp);
        assert!((tape.value(l1).item() - expect).abs() < 1e-6);
    }
}

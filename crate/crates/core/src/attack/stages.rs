//! Stage 1 inserts the backdoor while shaping affine images away from
//! rounding boundaries; stage 2 unlearns it from the full-precision weights
//! under the projection that keeps the quantized model bit-identical.

use std::collections::BTreeMap;

use crate::attack::{loss_l2, loss_l3, loss_l4, weight_scales, AttackConfig, AttackDatasets, PgdConstraints};
use crate::data::LabeledImages;
use crate::defense::{metric_asr, metric_cda, ModelRef};
use crate::error::{Error, Result};
use crate::nn::{Model, ModelVars, Optimizer};
use crate::quant::{quantize_model, QuantProfile, QuantizedModel};
use crate::tensor::{Tape, Tensor};

/// One metrics row; losses that do not apply to the stage are NaN.
#[derive(Debug, Clone, Copy)]
pub struct EpochRow {
    pub epoch: usize,
    pub cda_fp: f64,
    pub asr_fp: f64,
    pub cda_q: f64,
    pub asr_q: f64,
    pub l1: f64,
    pub l2: f64,
    pub l3: f64,
    pub l4: f64,
}

#[derive(Debug, Clone, Default)]
pub struct StageLog {
    pub rows: Vec<EpochRow>,
    /// Post-projection elements whose fresh conversion differed from the
    /// snapshot, accumulated over every optimizer step (stage 2 only).
    pub violations: usize,
    pub early_stopped: bool,
}

use crate::attack::BatchCycler;

fn collect_weight_grads(tape: &Tape, vars: &ModelVars) -> BTreeMap<String, Tensor> {
    vars.weights
        .iter()
        .filter_map(|(name, &v)| tape.grad(v).map(|g| (name.clone(), g.clone())))
        .collect()
}

fn collect_bias_grads(tape: &Tape, vars: &ModelVars) -> BTreeMap<String, Tensor> {
    vars.biases
        .iter()
        .filter_map(|(name, &v)| tape.grad(v).map(|g| (name.clone(), g.clone())))
        .collect()
}

fn apply_grads(
    model: &mut Model,
    optimizer: &mut Optimizer,
    weight_grads: &BTreeMap<String, Tensor>,
    bias_grads: Option<&BTreeMap<String, Tensor>>,
) {
    let precision = model.precision;
    let mut triples: Vec<(String, &mut Tensor, &Tensor)> = Vec::new();
    for (name, w) in model.weights.iter_mut() {
        if let Some(g) = weight_grads.get(name) {
            triples.push((format!("weight.{name}"), w, g));
        }
    }
    if let Some(bias_grads) = bias_grads {
        for (name, b) in model.biases.iter_mut() {
            if let Some(g) = bias_grads.get(name) {
                triples.push((format!("bias.{name}"), b, g));
            }
        }
    }
    optimizer.step(triples, precision);
}

/// Quantize the current model against the run's calibration batch and
/// measure all four metrics.
fn epoch_metrics(
    model: &Model,
    ds: &AttackDatasets,
    profile: QuantProfile,
    eval: &LabeledImages,
) -> Result<(f64, f64, f64, f64)> {
    let cda_fp = metric_cda(ModelRef::Float(model), eval)?;
    let asr_fp = metric_asr(ModelRef::Float(model), eval, &ds.trigger)?;
    let qm = quantize_model(model, &ds.calibration, profile)?;
    let cda_q = metric_cda(ModelRef::Quantized(&qm), eval)?;
    let asr_q = metric_asr(ModelRef::Quantized(&qm), eval, &ds.trigger)?;
    Ok((cda_fp, asr_fp, cda_q, asr_q))
}

/// Insert the backdoor: minimize the insertion loss plus the
/// rounding-uncertainty loss with Adam. Errors if the backdoored model does
/// not reach the configured attack-success target within the epoch budget.
pub fn stage1_train(
    model: &mut Model,
    ds: &AttackDatasets,
    config: &AttackConfig,
    profile: QuantProfile,
    eval: &LabeledImages,
) -> Result<StageLog> {
    config.validate(ds.train.len())?;
    let mut optimizer = Optimizer::adam(config.stage1_lr);
    let mut log = StageLog::default();
    let mut poison = BatchCycler::new(&ds.poisoned, config.seed ^ 0xD7);
    // poisoned samples are mixed in proportionally, so each is seen about
    // once per epoch; oversampling them saturates the trigger pathway far
    // beyond what stage 2 can unlearn inside the projection band
    let poison_batch =
        ((config.batch_size * ds.poisoned.len()).div_ceil(ds.train.len())).max(1);

    for epoch in 0..config.stage1_epochs {
        let order = ds.train.epoch_order(config.seed, epoch);
        let mut sums = (0.0f64, 0.0f64);
        let mut steps = 0usize;
        let mut start = 0usize;
        while start < order.len() {
            let clean = ds.train.batch(&order, start, config.batch_size);
            start += config.batch_size;
            let pois = poison.next(poison_batch);

            let mut tape = Tape::new(model.precision);
            let vars = model.vars(&mut tape, true);
            let scales = weight_scales(model, profile);
            // the two insertion terms, with the poison term's gradient gated
            // by the margin floor
            let xc = tape.input(clean.0.clone(), false);
            let logits_c = model.forward_vars(&mut tape, xc, &vars)?;
            let ce_clean = tape.cross_entropy(logits_c, &clean.1)?;
            let xp = tape.input(pois.0.clone(), false);
            let logits_p = model.forward_vars(&mut tape, xp, &vars)?;
            let mut ce_pois = tape.cross_entropy(logits_p, &pois.1)?;
            let l1_val = tape.value(ce_clean).item() + tape.value(ce_pois).item();
            if tape.value(ce_pois).item() < config.poison_ce_floor {
                ce_pois = tape.detach(ce_pois);
            }
            let l1 = tape.add(ce_clean, ce_pois)?;
            let mut l2 = loss_l2(&mut tape, &vars, &scales)?;
            if !config.enable_rum {
                l2 = tape.detach(l2);
            }
            let loss = tape.add(l1, l2)?;
            let loss_val = tape.value(loss).item();
            if !loss_val.is_finite() {
                return Err(Error::Train(format!("stage-1 loss diverged at epoch {epoch}")));
            }
            sums.0 += l1_val;
            sums.1 += tape.value(l2).item();
            steps += 1;
            tape.backward(loss)?;
            let wg = collect_weight_grads(&tape, &vars);
            let bg = collect_bias_grads(&tape, &vars);
            apply_grads(model, &mut optimizer, &wg, Some(&bg));
        }

        let (cda_fp, asr_fp, cda_q, asr_q) = epoch_metrics(model, ds, profile, eval)?;
        eprintln!(
            "stage1 epoch {epoch}: cda {cda_fp:.4} asr {asr_fp:.4} | q: cda {cda_q:.4} asr {asr_q:.4} | l1 {:.4} l2 {:.4}",
            sums.0 / steps as f64,
            sums.1 / steps as f64
        );
        log.rows.push(EpochRow {
            epoch,
            cda_fp,
            asr_fp,
            cda_q,
            asr_q,
            l1: sums.0 / steps as f64,
            l2: sums.1 / steps as f64,
            l3: f64::NAN,
            l4: f64::NAN,
        });
    }

    let final_asr = log.rows.last().map(|r| r.asr_fp).unwrap_or(0.0);
    if final_asr < config.stage1_asr_target {
        return Err(Error::Train(format!(
            "backdoor insertion missed its target: ASR {final_asr:.4} < {:.4} after {} epochs",
            config.stage1_asr_target, config.stage1_epochs
        )));
    }
    Ok(log)
}

/// Remove the backdoor from the full-precision weights while the projection
/// preserves the quantized model. Returns the fine-tuned model, the
/// snapshotted quantized backdoored model, the constraints, and the log.
///
/// Biases are frozen for the whole stage so the snapshot's int-32 biases stay
/// valid; every step runs: gradient of `L3 + lambda * L4` (straight-through
/// rounding), frozen-index masking, Adam update on weights, projection, and
/// a re-conversion audit.
pub fn stage2_finetune(
    m_bd: &Model,
    ds: &AttackDatasets,
    config: &AttackConfig,
    profile: QuantProfile,
    eval: &LabeledImages,
) -> Result<(Model, QuantizedModel, PgdConstraints, StageLog)> {
    config.validate(ds.train.len())?;
    let mut model = m_bd.clone();
    let constraints = PgdConstraints::snapshot(m_bd, profile, config.projection_margin)?;
    let snapshot_q = quantize_model(m_bd, &ds.calibration, profile)?;
    let start_cda = metric_cda(ModelRef::Float(&model), eval)?;

    let mut optimizer = Optimizer::adam(config.stage2_lr);
    let mut log = StageLog::default();
    let mut cover = BatchCycler::new(&ds.cover, config.seed ^ 0xC0);
    let mut calm_epochs = 0usize;
    let mut collapsed_epochs = 0usize;

    for epoch in 0..config.stage2_epochs {
        let order = ds.train.epoch_order(config.seed ^ 0x51A6E2, epoch);
        let mut sums = (0.0f64, 0.0f64);
        let mut steps = 0usize;
        let mut start = 0usize;
        while start < order.len() {
            let clean = ds.train.batch(&order, start, config.batch_size);
            start += config.batch_size;
            let cov = cover.next(config.cover_batch_size.max(1));

            let mut tape = Tape::new(model.precision);
            let vars = model.vars(&mut tape, true);
            let current_scales: BTreeMap<String, f64> = if config.constrain {
                constraints.scales.clone()
            } else {
                weight_scales(&model, profile)
            };
            let l3 = loss_l3(&mut tape, &model, &vars, (&clean.0, &clean.1), (&cov.0, &cov.1))?;
            let l4 = loss_l4(&mut tape, &vars, &constraints, &current_scales)?;
            let l4_scaled = tape.mul_scalar(l4, config.lambda)?;
            let loss = tape.add(l3, l4_scaled)?;
            let loss_val = tape.value(loss).item();
            if !loss_val.is_finite() {
                return Err(Error::Train(format!("stage-2 loss diverged at epoch {epoch}")));
            }
            sums.0 += tape.value(l3).item();
            sums.1 += tape.value(l4).item();
            steps += 1;
            tape.backward(loss)?;

            let mut wg = collect_weight_grads(&tape, &vars);
            if config.constrain {
                for (name, g) in wg.iter_mut() {
                    constraints.mask_frozen_grads(name, g);
                }
            }
            apply_grads(&mut model, &mut optimizer, &wg, None);
            if config.constrain {
                constraints.project(&mut model);
                log.violations += constraints.violations(&model)?;
            }
        }

        let (cda_fp, asr_fp, cda_q, asr_q) = epoch_metrics(&model, ds, profile, eval)?;
        eprintln!(
            "stage2 epoch {epoch}: cda {cda_fp:.4} asr {asr_fp:.4} | q: cda {cda_q:.4} asr {asr_q:.4} | l3 {:.4} l4 {:.4}",
            sums.0 / steps as f64,
            sums.1 / steps as f64
        );
        log.rows.push(EpochRow {
            epoch,
            cda_fp,
            asr_fp,
            cda_q,
            asr_q,
            l1: f64::NAN,
            l2: f64::NAN,
            l3: sums.0 / steps as f64,
            l4: sums.1 / steps as f64,
        });

        // the first epochs overshoot while the optimizer finds its footing
        // inside the projection box; abort only on a sustained collapse
        collapsed_epochs = if cda_fp < start_cda - 0.05 { collapsed_epochs + 1 } else { 0 };
        if collapsed_epochs >= 3 {
            return Err(Error::Train(format!(
                "clean accuracy collapsed during unlearning: {cda_fp:.4} vs {start_cda:.4} at stage-2 start"
            )));
        }
        calm_epochs = if asr_fp <= config.early_stop_asr { calm_epochs + 1 } else { 0 };
        if calm_epochs >= 3 {
            log.early_stopped = true;
            break;
        }
    }

    Ok((model, snapshot_q, constraints, log))
}

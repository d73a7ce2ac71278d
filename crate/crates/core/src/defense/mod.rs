//! CDA/ASR metrics and the two inspection defenses, runnable against
//! full-precision and quantized models alike.

mod nc;
mod strip;

pub use nc::{anomaly_index, nc_report, nc_reverse_trigger, NcConfig, NcReport, NcResult};
pub use strip::{strip_detection, strip_score, StripConfig, StripResult};

use crate::attack::TriggerSpec;
use crate::data::LabeledImages;
use crate::error::{Error, Result};
use crate::nn::Model;
use crate::quant::{DrqModel, QuantizedModel};
use crate::tensor::Tensor;

/// A model under evaluation; quantized models are driven through the
/// integer emulation path.
#[derive(Clone, Copy)]
pub enum ModelRef<'a> {
    Float(&'a Model),
    Quantized(&'a QuantizedModel),
    Drq(&'a DrqModel),
}

impl ModelRef<'_> {
    pub fn logits(&self, images: &Tensor) -> Result<Tensor> {
        match self {
            ModelRef::Float(m) => m.logits(images),
            ModelRef::Quantized(q) => Ok(crate::quant::emulated_forward(q, images)?.logits),
            ModelRef::Drq(d) => d.forward(images),
        }
    }

    pub fn predict(&self, images: &Tensor) -> Result<Vec<usize>> {
        Ok(crate::nn::argmax_rows(&self.logits(images)?))
    }

    /// Softmax class probabilities, row per input.
    pub fn probabilities(&self, images: &Tensor) -> Result<Tensor> {
        Ok(crate::nn::softmax_rows(&self.logits(images)?))
    }
}

const EVAL_CHUNK: usize = 256;

fn predict_all(model: ModelRef, images: &Tensor) -> Result<Vec<usize>> {
    let n = images.shape()[0];
    let mut out = Vec::with_capacity(n);
    let per = images.len() / n.max(1);
    let mut start = 0;
    while start < n {
        let end = (start + EVAL_CHUNK).min(n);
        let chunk = Tensor::new(
            {
                let mut s = images.shape().to_vec();
                s[0] = end - start;
                s
            },
            images.data()[start * per..end * per].to_vec(),
        )?;
        out.extend(model.predict(&chunk)?);
        start = end;
    }
    Ok(out)
}

/// Fraction of trigger-free test samples classified to their true label.
pub fn metric_cda(model: ModelRef, test: &LabeledImages) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::EmptyReduction { op: "metric_cda" });
    }
    let pred = predict_all(model, &test.images)?;
    let correct = pred.iter().zip(&test.labels).filter(|(p, l)| p == l).count();
    Ok(correct as f64 / test.len() as f64)
}

/// Indices of test samples eligible for the attack-success denominator:
/// ground-truth differs from the target class, and in source-specific mode
/// only source-class samples count.
pub fn asr_eligible(test: &LabeledImages, trigger: &TriggerSpec) -> Vec<usize> {
    (0..test.len())
        .filter(|&i| {
            let label = test.labels[i];
            label != trigger.target_class
                && trigger.source_class.map_or(true, |src| label == src)
        })
        .collect()
}

/// Fraction of eligible trigger-stamped test samples classified to the
/// attacker's target class.
pub fn metric_asr(model: ModelRef, test: &LabeledImages, trigger: &TriggerSpec) -> Result<f64> {
    let eligible = asr_eligible(test, trigger);
    if eligible.is_empty() {
        return Err(Error::EmptyReduction { op: "metric_asr" });
    }
    let subset = test.subset(&eligible);
    let stamped = crate::attack::stamp_batch(&subset.images, trigger)?;
    let pred = predict_all(model, &stamped)?;
    let hits = pred.iter().filter(|&&p| p == trigger.target_class).count();
    Ok(hits as f64 / eligible.len() as f64)
}

/// Fraction of trigger-stamped samples from classes outside both the source
/// and target that still land on their true label (source-specific probe).
pub fn metric_non_source_accuracy(
    model: ModelRef,
    test: &LabeledImages,
    trigger: &TriggerSpec,
) -> Result<f64> {
    let src = trigger
        .source_class
        .ok_or_else(|| Error::Config("non-source accuracy requires a source class".into()))?;
    let eligible: Vec<usize> = (0..test.len())
        .filter(|&i| test.labels[i] != src && test.labels[i] != trigger.target_class)
        .collect();
    if eligible.is_empty() {
        return Err(Error::EmptyReduction { op: "metric_non_source_accuracy" });
    }
    let subset = test.subset(&eligible);
    let stamped = crate::attack::stamp_batch(&subset.images, trigger)?;
    let pred = predict_all(model, &stamped)?;
    let hits = pred.iter().zip(&subset.labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / eligible.len() as f64)
}

use std::collections::BTreeMap;

use crate::tensor::{Precision, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

/// SGD or Adam with bias-corrected moments. Moment tensors are keyed by
/// parameter name and shape-match their parameters.
#[derive(Debug, Clone)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    step_count: u64,
    first_moment: BTreeMap<String, Tensor>,
    second_moment: BTreeMap<String, Tensor>,
}

impl Optimizer {
    pub fn sgd(learning_rate: f64) -> Self {
        Optimizer {
            kind: OptimizerKind::Sgd,
            learning_rate,
            beta1: 0.0,
            beta2: 0.0,
            epsilon: 0.0,
            step_count: 0,
            first_moment: BTreeMap::new(),
            second_moment: BTreeMap::new(),
        }
    }

    pub fn adam(learning_rate: f64) -> Self {
        Optimizer {
            kind: OptimizerKind::Adam,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step_count: 0,
            first_moment: BTreeMap::new(),
            second_moment: BTreeMap::new(),
        }
    }

    pub fn new(kind: OptimizerKind, learning_rate: f64) -> Self {
        match kind {
            OptimizerKind::Sgd => Optimizer::sgd(learning_rate),
            OptimizerKind::Adam => Optimizer::adam(learning_rate),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// Apply one update to every `(name, param, grad)` triple. Updated values
    /// are rounded to `precision` storage.
    pub fn step(&mut self, params: Vec<(String, &mut Tensor, &Tensor)>, precision: Precision) {
        self.step_count += 1;
        match self.kind {
            OptimizerKind::Sgd => {
                for (_, param, grad) in params {
                    debug_assert_eq!(param.shape(), grad.shape());
                    for (p, g) in param.data_mut().iter_mut().zip(grad.data()) {
                        *p = precision.quantize(*p - self.learning_rate * g);
                    }
                }
            }
            OptimizerKind::Adam => {
                let t = self.step_count as i32;
                let bc1 = 1.0 - self.beta1.powi(t);
                let bc2 = 1.0 - self.beta2.powi(t);
                for (name, param, grad) in params {
                    debug_assert_eq!(param.shape(), grad.shape());
                    let m = self
                        .first_moment
                        .entry(name.clone())
                        .or_insert_with(|| Tensor::zeros(param.shape().to_vec()));
                    let v = self
                        .second_moment
                        .entry(name)
                        .or_insert_with(|| Tensor::zeros(param.shape().to_vec()));
                    debug_assert_eq!(m.shape(), param.shape());
                    for i in 0..grad.len() {
                        let g = grad.data()[i];
                        let mi = self.beta1 * m.data()[i] + (1.0 - self.beta1) * g;
                        let vi = self.beta2 * v.data()[i] + (1.0 - self.beta2) * g * g;
                        m.data_mut()[i] = mi;
                        v.data_mut()[i] = vi;
                        let update = self.learning_rate * (mi / bc1) / ((vi / bc2).sqrt() + self.epsilon);
                        let p = &mut param.data_mut()[i];
                        *p = precision.quantize(*p - update);
                    }
                }
            }
        }
    }
}

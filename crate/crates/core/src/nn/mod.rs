//! Layers, the model container, optimizers and the plain training loop.

mod optim;
mod serialize;
mod train;

pub use optim::{Optimizer, OptimizerKind};
pub use serialize::{load_model, save_float_model, save_quantized_model, LoadedModel};
pub use train::{train_clean, TrainLog};

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Padding, Precision, Tape, Tensor, Var};

/// One layer of a sequential model. Parameterized layers carry the name of
/// their weight/bias tensors.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub enum LayerSpec {
    Conv2d {
        name: String,
        kh: usize,
        kw: usize,
        cin: usize,
        cout: usize,
        stride: usize,
        padding: Padding,
    },
    Dense {
        name: String,
        input: usize,
        output: usize,
    },
    Relu,
    MaxPool2,
    Flatten,
    /// Marker for the classification head; `forward` still returns logits.
    SoftmaxOutput,
}

impl LayerSpec {
    pub fn name(&self) -> Option<&str> {
        match self {
            LayerSpec::Conv2d { name, .. } | LayerSpec::Dense { name, .. } => Some(name),
            _ => None,
        }
    }
}

/// Sequential model: ordered layers plus named weight and bias tensors.
/// Weight names are unique and stable across save/load.
#[derive(Debug, Clone)]
pub struct Model {
    pub architecture_id: String,
    /// Per-sample input shape `[H, W, C]`.
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
    pub weights: BTreeMap<String, Tensor>,
    pub biases: BTreeMap<String, Tensor>,
    pub precision: Precision,
}

/// Tape handles for a model's parameters during one forward/backward pass.
pub struct ModelVars {
    pub weights: BTreeMap<String, Var>,
    pub biases: BTreeMap<String, Var>,
}

impl Model {
    /// conv3x3x8 -> relu -> pool -> conv3x3x16 -> relu -> pool -> dense128
    /// -> relu -> dense-K classifier.
    pub fn mini_cnn(input_shape: &[usize], num_classes: usize, precision: Precision, seed: u64) -> Result<Model> {
        let (h, w, c) = (input_shape[0], input_shape[1], input_shape[2]);
        let flat = (h / 4) * (w / 4) * 16;
        let layers = vec![
            LayerSpec::Conv2d { name: "c1".into(), kh: 3, kw: 3, cin: c, cout: 8, stride: 1, padding: Padding::Same },
            LayerSpec::Relu,
            LayerSpec::MaxPool2,
            LayerSpec::Conv2d { name: "c2".into(), kh: 3, kw: 3, cin: 8, cout: 16, stride: 1, padding: Padding::Same },
            LayerSpec::Relu,
            LayerSpec::MaxPool2,
            LayerSpec::Flatten,
            LayerSpec::Dense { name: "d1".into(), input: flat, output: 128 },
            LayerSpec::Relu,
            LayerSpec::Dense { name: "d2".into(), input: 128, output: num_classes },
            LayerSpec::SoftmaxOutput,
        ];
        Model::build("mini-cnn", input_shape, layers, precision, seed)
    }

    /// flatten -> dense256 -> relu -> dense-K classifier.
    pub fn mlp(input_shape: &[usize], num_classes: usize, precision: Precision, seed: u64) -> Result<Model> {
        let flat: usize = input_shape.iter().product();
        let layers = vec![
            LayerSpec::Flatten,
            LayerSpec::Dense { name: "d1".into(), input: flat, output: 256 },
            LayerSpec::Relu,
            LayerSpec::Dense { name: "d2".into(), input: 256, output: num_classes },
            LayerSpec::SoftmaxOutput,
        ];
        Model::build("mlp", input_shape, layers, precision, seed)
    }

    pub fn by_architecture_id(
        id: &str,
        input_shape: &[usize],
        num_classes: usize,
        precision: Precision,
        seed: u64,
    ) -> Result<Model> {
        match id {
            "mini-cnn" => Model::mini_cnn(input_shape, num_classes, precision, seed),
            "mlp" => Model::mlp(input_shape, num_classes, precision, seed),
            other => Err(Error::Config(format!("unknown architecture_id {other:?}"))),
        }
    }

    /// Initialize parameters (uniform He-style scaled by fan-in) and verify
    /// that consecutive layer shapes compose.
    pub fn build(
        architecture_id: &str,
        input_shape: &[usize],
        layers: Vec<LayerSpec>,
        precision: Precision,
        seed: u64,
    ) -> Result<Model> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weights = BTreeMap::new();
        let mut biases = BTreeMap::new();
        for layer in &layers {
            match layer {
                LayerSpec::Conv2d { name, kh, kw, cin, cout, .. } => {
                    let fan_in = kh * kw * cin;
                    let w = he_uniform(&mut rng, vec![*kh, *kw, *cin, *cout], fan_in, precision);
                    if weights.insert(name.clone(), w).is_some() {
                        return Err(Error::Config(format!("duplicate layer name {name:?}")));
                    }
                    biases.insert(name.clone(), Tensor::zeros(vec![*cout]));
                }
                LayerSpec::Dense { name, input, output } => {
                    let w = he_uniform(&mut rng, vec![*input, *output], *input, precision);
                    if weights.insert(name.clone(), w).is_some() {
                        return Err(Error::Config(format!("duplicate layer name {name:?}")));
                    }
                    biases.insert(name.clone(), Tensor::zeros(vec![*output]));
                }
                _ => {}
            }
        }
        let model = Model {
            architecture_id: architecture_id.to_string(),
            input_shape: input_shape.to_vec(),
            layers,
            weights,
            biases,
            precision,
        };
        model.boundary_shapes()?;
        Ok(model)
    }

    /// Shape at every layer boundary (index 0 = input, i+1 = after layer i),
    /// excluding the batch dimension. Errors if layers do not compose.
    pub fn boundary_shapes(&self) -> Result<Vec<Vec<usize>>> {
        let mut shapes = vec![self.input_shape.clone()];
        let mut cur = self.input_shape.clone();
        for layer in &self.layers {
            cur = match layer {
                LayerSpec::Conv2d { kh, kw, cin, cout, stride, padding, name } => {
                    if cur.len() != 3 || cur[2] != *cin {
                        return Err(Error::ShapeMismatch { op: "conv2d", lhs: cur, rhs: vec![*kh, *kw, *cin, *cout] });
                    }
                    let _ = name;
                    let geom = crate::tensor::conv_geometry(&[1, cur[0], cur[1], cur[2]], &[*kh, *kw, *cin, *cout], *stride, *padding)?;
                    vec![geom.0, geom.1, *cout]
                }
                LayerSpec::Dense { input, output, .. } => {
                    if cur.len() != 1 || cur[0] != *input {
                        return Err(Error::ShapeMismatch { op: "dense", lhs: cur, rhs: vec![*input, *output] });
                    }
                    vec![*output]
                }
                LayerSpec::Relu | LayerSpec::SoftmaxOutput => cur,
                LayerSpec::MaxPool2 => {
                    if cur.len() != 3 {
                        return Err(Error::ShapeMismatch { op: "max_pool2", lhs: cur, rhs: vec![] });
                    }
                    vec![cur[0] / 2, cur[1] / 2, cur[2]]
                }
                LayerSpec::Flatten => vec![cur.iter().product()],
            };
            shapes.push(cur.clone());
        }
        Ok(shapes)
    }

    /// Register all parameters on a tape.
    pub fn vars(&self, tape: &mut Tape, trainable: bool) -> ModelVars {
        let weights = self
            .weights
            .iter()
            .map(|(k, v)| (k.clone(), tape.input(v.clone(), trainable)))
            .collect();
        let biases = self
            .biases
            .iter()
            .map(|(k, v)| (k.clone(), tape.input(v.clone(), trainable)))
            .collect();
        ModelVars { weights, biases }
    }

    /// Forward pass to pre-softmax logits using parameters already on the tape.
    pub fn forward_vars(&self, tape: &mut Tape, input: Var, vars: &ModelVars) -> Result<Var> {
        Ok(*self.forward_vars_trace(tape, input, vars)?.last().expect("boundaries"))
    }

    /// Forward pass returning the value at every layer boundary: index 0 is
    /// the input, index i+1 the output of layer i. The last entry holds the
    /// logits.
    pub fn forward_vars_trace(&self, tape: &mut Tape, input: Var, vars: &ModelVars) -> Result<Vec<Var>> {
        let shape = tape.shape(input).to_vec();
        if shape.len() != 4 || shape[1..] != self.input_shape[..] {
            return Err(Error::ShapeMismatch { op: "forward", lhs: shape, rhs: self.input_shape.clone() });
        }
        let batch = shape[0];
        let mut x = input;
        let mut boundaries = vec![x];
        for layer in &self.layers {
            x = match layer {
                LayerSpec::Conv2d { name, stride, padding, .. } => {
                    let y = tape.conv2d(x, vars.weights[name], *stride, *padding)?;
                    tape.add(y, vars.biases[name])?
                }
                LayerSpec::Dense { name, .. } => {
                    let y = tape.matmul(x, vars.weights[name])?;
                    tape.add(y, vars.biases[name])?
                }
                LayerSpec::Relu => tape.relu(x)?,
                LayerSpec::MaxPool2 => tape.max_pool2(x)?,
                LayerSpec::Flatten => {
                    let n: usize = tape.shape(x)[1..].iter().product();
                    tape.reshape(x, vec![batch, n])?
                }
                LayerSpec::SoftmaxOutput => x,
            };
            boundaries.push(x);
        }
        Ok(boundaries)
    }

    /// Forward with the model's stored parameters (no gradients to them).
    pub fn forward(&self, tape: &mut Tape, input: Var) -> Result<Var> {
        let vars = self.vars(tape, false);
        self.forward_vars(tape, input, &vars)
    }

    /// Logits for a `[N, H, W, C]` batch on a fresh no-grad tape.
    pub fn logits(&self, images: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::no_grad(self.precision);
        let x = tape.input(images.clone(), false);
        let out = self.forward(&mut tape, x)?;
        Ok(tape.value(out).clone())
    }

    /// Predicted classes for a batch.
    pub fn predict(&self, images: &Tensor) -> Result<Vec<usize>> {
        Ok(argmax_rows(&self.logits(images)?))
    }

    /// Mutable references to parameters; weights first, then biases when
    /// requested. Used by optimizers and projections.
    pub fn params_mut(&mut self, include_biases: bool) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = self
            .weights
            .iter_mut()
            .map(|(k, v)| (format!("weight.{k}"), v))
            .collect();
        if include_biases {
            out.extend(self.biases.iter_mut().map(|(k, v)| (format!("bias.{k}"), v)));
        }
        out
    }
}

/// Row-wise argmax of an `[N, K]` tensor.
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let k = *logits.shape().last().expect("rank >= 1");
    logits
        .data()
        .chunks(k)
        .map(|row| {
            row.iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite logits"))
                .map(|(i, _)| i)
                .expect("non-empty row")
        })
        .collect()
}

/// Softmax over the last axis of an `[N, K]` tensor (plain, no gradient).
pub fn softmax_rows(logits: &Tensor) -> Tensor {
    let k = *logits.shape().last().expect("rank >= 1");
    let mut out = logits.clone();
    for row in out.data_mut().chunks_mut(k) {
        let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            z += *v;
        }
        for v in row.iter_mut() {
            *v /= z;
        }
    }
    out
}

fn he_uniform(rng: &mut ChaCha8Rng, shape: Vec<usize>, fan_in: usize, precision: Precision) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|_| precision.quantize(rng.random_range(-bound..bound)))
        .collect();
    Tensor::new(shape, data).expect("init shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_weight_model_gives_zero_logits() {
        let mut m = Model::mlp(&[2, 2, 1], 3, Precision::F64, 1).unwrap();
        for (_, w) in m.weights.iter_mut() {
            *w = Tensor::zeros(w.shape().to_vec());
        }
        let x = Tensor::new(vec![2, 2, 2, 1], vec![0.5; 8]).unwrap();
        let logits = m.logits(&x).unwrap();
        assert_eq!(logits.data(), &[0.0; 6]);
    }

    #[test]
    fn identity_dense_layer_passes_input_through() {
        let layers = vec![
            LayerSpec::Flatten,
            LayerSpec::Dense { name: "d".into(), input: 4, output: 4 },
            LayerSpec::SoftmaxOutput,
        ];
        let mut m = Model::build("ident", &[2, 2, 1], layers, Precision::F64, 0).unwrap();
        let mut eye = Tensor::zeros(vec![4, 4]);
        for i in 0..4 {
            eye.data_mut()[i * 4 + i] = 1.0;
        }
        m.weights.insert("d".into(), eye);
        let x = Tensor::new(vec![1, 2, 2, 1], vec![0.1, -0.2, 0.3, -0.4]).unwrap();
        let logits = m.logits(&x).unwrap();
        assert_eq!(logits.data(), &[0.1, -0.2, 0.3, -0.4]);
    }

    #[test]
    fn hand_computed_two_layer_mlp() {
        // 2 inputs -> dense(2) with relu -> dense(2); all values hand-chosen.
        let layers = vec![
            LayerSpec::Flatten,
            LayerSpec::Dense { name: "d1".into(), input: 2, output: 2 },
            LayerSpec::Relu,
            LayerSpec::Dense { name: "d2".into(), input: 2, output: 2 },
            LayerSpec::SoftmaxOutput,
        ];
        let mut m = Model::build("hand", &[1, 2, 1], layers, Precision::F64, 0).unwrap();
        m.weights.insert("d1".into(), Tensor::new(vec![2, 2], vec![1.0, -1.0, 2.0, 0.5]).unwrap());
        m.biases.insert("d1".into(), Tensor::new(vec![2], vec![0.1, -0.1]).unwrap());
        m.weights.insert("d2".into(), Tensor::new(vec![2, 2], vec![0.5, 1.0, -1.0, 2.0]).unwrap());
        m.biases.insert("d2".into(), Tensor::new(vec![2], vec![0.0, 0.25]).unwrap());
        // x = [1.0, 0.5]:
        //   h = relu([1*1 + 0.5*2 + 0.1, 1*(-1) + 0.5*0.5 - 0.1]) = relu([2.1, -0.85]) = [2.1, 0]
        //   y = [2.1*0.5 + 0*(-1), 2.1*1 + 0*2] + [0, 0.25] = [1.05, 2.35]
        let x = Tensor::new(vec![1, 1, 2, 1], vec![1.0, 0.5]).unwrap();
        let logits = m.logits(&x).unwrap();
        assert!((logits.data()[0] - 1.05).abs() < 1e-12);
        assert!((logits.data()[1] - 2.35).abs() < 1e-12);
    }

    #[test]
    fn forward_rejects_wrong_input_shape() {
        let m = Model::mlp(&[2, 2, 1], 3, Precision::F64, 1).unwrap();
        let x = Tensor::zeros(vec![1, 3, 3, 1]);
        assert!(m.logits(&x).is_err());
    }

    #[test]
    fn layer_shapes_must_compose() {
        let layers = vec![
            LayerSpec::Flatten,
            LayerSpec::Dense { name: "d".into(), input: 5, output: 2 },
        ];
        assert!(Model::build("bad", &[2, 2, 1], layers, Precision::F64, 0).is_err());
    }
}

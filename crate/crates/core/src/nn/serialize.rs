//! Single-file model container: a fixed magic, a JSON header carrying the
//! architecture and tensor manifest (name, shape, dtype, byte offset, CRC-32
//! of the payload slice), then raw little-endian arrays. Int-8 arrays are
//! stored as signed bytes; quantization constants ride in the header with
//! scales printed to 17 significant digits so they reload bit-exactly.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::{LayerSpec, Model};
use crate::quant::{QBias, QTensor, QuantParams, QuantProfile, QuantizedModel};
use crate::tensor::{Precision, Tensor};

const MAGIC: &[u8; 4] = b"QLM1";
const FORMAT_VERSION: u32 = 1;

#[derive(serde::Serialize, serde::Deserialize)]
struct Header {
    format_version: u32,
    kind: String,
    architecture_id: String,
    input_shape: Vec<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    precision: Option<Precision>,
    layers: Vec<LayerSpec>,
    tensors: Vec<TensorEntry>,
    #[serde(skip_serializing_if = "Option::is_none")]
    quant: Option<QuantHeader>,
}

#[derive(serde::Serialize, serde::Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    offset: u64,
    crc32: u32,
}

#[derive(serde::Serialize, serde::Deserialize)]
struct QuantHeader {
    profile: QuantProfile,
    weight_params: BTreeMap<String, ParamsEntry>,
    bias_scales: BTreeMap<String, String>,
    activations: Vec<ParamsEntry>,
}

#[derive(serde::Serialize, serde::Deserialize)]
struct ParamsEntry {
    scale: String,
    zero_point: i32,
    qmin: i32,
    qmax: i32,
}

impl ParamsEntry {
    fn from_params(p: &QuantParams) -> ParamsEntry {
        ParamsEntry {
            scale: format_scale(p.scale),
            zero_point: p.zero_point,
            qmin: p.qmin,
            qmax: p.qmax,
        }
    }

    fn to_params(&self) -> Result<QuantParams> {
        Ok(QuantParams {
            scale: parse_scale(&self.scale)?,
            zero_point: self.zero_point,
            qmin: self.qmin,
            qmax: self.qmax,
        })
    }
}

fn format_scale(s: f64) -> String {
    format!("{s:.17e}")
}

fn parse_scale(s: &str) -> Result<f64> {
    s.parse::<f64>()
        .map_err(|_| Error::Format(format!("unparseable scale {s:?}")))
}

/// Either side of the container.
pub enum LoadedModel {
    Float(Model),
    Quantized(QuantizedModel),
}

struct PayloadWriter {
    bytes: Vec<u8>,
    entries: Vec<TensorEntry>,
}

impl PayloadWriter {
    fn new() -> Self {
        PayloadWriter { bytes: Vec::new(), entries: Vec::new() }
    }

    fn push(&mut self, name: &str, shape: &[usize], dtype: &str, raw: Vec<u8>) {
        let crc = crc32fast::hash(&raw);
        self.entries.push(TensorEntry {
            name: name.to_string(),
            shape: shape.to_vec(),
            dtype: dtype.to_string(),
            offset: self.bytes.len() as u64,
            crc32: crc,
        });
        self.bytes.extend_from_slice(&raw);
    }

    fn push_floats(&mut self, name: &str, t: &Tensor, precision: Precision) {
        match precision {
            Precision::F32 => {
                let mut raw = Vec::with_capacity(t.len() * 4);
                for &v in t.data() {
                    raw.extend_from_slice(&(v as f32).to_le_bytes());
                }
                self.push(name, t.shape(), "f32", raw);
            }
            Precision::F64 => {
                let mut raw = Vec::with_capacity(t.len() * 8);
                for &v in t.data() {
                    raw.extend_from_slice(&v.to_le_bytes());
                }
                self.push(name, t.shape(), "f64", raw);
            }
        }
    }
}

fn write_container(path: &Path, header: &Header, payload: &[u8]) -> Result<()> {
    let header_json = serde_json::to_vec(header).map_err(|e| Error::Format(e.to_string()))?;
    let mut f = fs::File::create(path)?;
    f.write_all(MAGIC)?;
    f.write_all(&(header_json.len() as u32).to_le_bytes())?;
    f.write_all(&header_json)?;
    f.write_all(payload)?;
    Ok(())
}

/// Persist a full-precision model.
pub fn save_float_model(model: &Model, path: &Path) -> Result<()> {
    let mut pw = PayloadWriter::new();
    for (name, t) in &model.weights {
        pw.push_floats(&format!("weight.{name}"), t, model.precision);
    }
    for (name, t) in &model.biases {
        pw.push_floats(&format!("bias.{name}"), t, model.precision);
    }
    let header = Header {
        format_version: FORMAT_VERSION,
        kind: "float".into(),
        architecture_id: model.architecture_id.clone(),
        input_shape: model.input_shape.clone(),
        precision: Some(model.precision),
        layers: model.layers.clone(),
        tensors: pw.entries,
        quant: None,
    };
    write_container(path, &header, &pw.bytes)
}

/// Persist a quantized model: int-8 weights, int-32 biases, params table.
pub fn save_quantized_model(qm: &QuantizedModel, path: &Path) -> Result<()> {
    let mut pw = PayloadWriter::new();
    let mut weight_params = BTreeMap::new();
    let mut bias_scales = BTreeMap::new();
    for (name, t) in &qm.weights {
        let raw: Vec<u8> = t.data.iter().map(|&v| v as u8).collect();
        pw.push(&format!("weight.{name}"), &t.shape, "i8", raw);
        weight_params.insert(name.clone(), ParamsEntry::from_params(&t.params));
    }
    for (name, b) in &qm.biases {
        let mut raw = Vec::with_capacity(b.data.len() * 4);
        for &v in &b.data {
            raw.extend_from_slice(&v.to_le_bytes());
        }
        pw.push(&format!("bias.{name}"), &b.shape, "i32", raw);
        bias_scales.insert(name.clone(), format_scale(b.scale));
    }
    let header = Header {
        format_version: FORMAT_VERSION,
        kind: "quantized".into(),
        architecture_id: qm.architecture_id.clone(),
        input_shape: qm.input_shape.clone(),
        precision: None,
        layers: qm.layers.clone(),
        tensors: pw.entries,
        quant: Some(QuantHeader {
            profile: qm.profile,
            weight_params,
            bias_scales,
            activations: qm.activations.iter().map(ParamsEntry::from_params).collect(),
        }),
    };
    write_container(path, &header, &pw.bytes)
}

/// Load either container kind; any magic/version/digest mismatch or
/// truncation rejects the file with no partial model.
pub fn load_model(path: &Path) -> Result<LoadedModel> {
    let bytes = fs::read(path)?;
    if bytes.len() < 8 || &bytes[0..4] != MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let header_len = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    if bytes.len() < 8 + header_len {
        return Err(Error::Format("truncated header".into()));
    }
    let header: Header = serde_json::from_slice(&bytes[8..8 + header_len])
        .map_err(|e| Error::Format(format!("bad header: {e}")))?;
    if header.format_version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported format version {}", header.format_version)));
    }
    let payload = &bytes[8 + header_len..];

    let mut raw_tensors: BTreeMap<String, (Vec<usize>, String, &[u8])> = BTreeMap::new();
    for e in &header.tensors {
        let elem: usize = e.shape.iter().product();
        let width = match e.dtype.as_str() {
            "f32" | "i32" => 4,
            "f64" => 8,
            "i8" => 1,
            other => return Err(Error::Format(format!("unknown dtype {other:?}"))),
        };
        let start = e.offset as usize;
        let end = start + elem * width;
        if end > payload.len() {
            return Err(Error::Format(format!("tensor {} extends past payload", e.name)));
        }
        let slice = &payload[start..end];
        if crc32fast::hash(slice) != e.crc32 {
            return Err(Error::Format(format!("digest mismatch for tensor {}", e.name)));
        }
        raw_tensors.insert(e.name.clone(), (e.shape.clone(), e.dtype.clone(), slice));
    }

    let take_floats = |raw: &BTreeMap<String, (Vec<usize>, String, &[u8])>, name: &str| -> Result<Tensor> {
        let (shape, dtype, slice) = raw
            .get(name)
            .ok_or_else(|| Error::Format(format!("missing tensor {name}")))?;
        let data: Vec<f64> = match dtype.as_str() {
            "f32" => slice
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect(),
            "f64" => slice
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect(),
            other => return Err(Error::Format(format!("tensor {name} has dtype {other}, expected float"))),
        };
        Tensor::new(shape.clone(), data)
    };

    match header.kind.as_str() {
        "float" => {
            let precision = header
                .precision
                .ok_or_else(|| Error::Format("float container missing precision".into()))?;
            let mut weights = BTreeMap::new();
            let mut biases = BTreeMap::new();
            for layer in &header.layers {
                if let Some(name) = layer.name() {
                    weights.insert(name.to_string(), take_floats(&raw_tensors, &format!("weight.{name}"))?);
                    biases.insert(name.to_string(), take_floats(&raw_tensors, &format!("bias.{name}"))?);
                }
            }
            let model = Model {
                architecture_id: header.architecture_id,
                input_shape: header.input_shape,
                layers: header.layers,
                weights,
                biases,
                precision,
            };
            model.boundary_shapes()?;
            Ok(LoadedModel::Float(model))
        }
        "quantized" => {
            let quant = header
                .quant
                .ok_or_else(|| Error::Format("quantized container missing params table".into()))?;
            let mut weights = BTreeMap::new();
            let mut biases = BTreeMap::new();
            for layer in &header.layers {
                if let Some(name) = layer.name() {
                    let (shape, dtype, slice) = raw_tensors
                        .get(&format!("weight.{name}"))
                        .ok_or_else(|| Error::Format(format!("missing tensor weight.{name}")))?;
                    if dtype != "i8" {
                        return Err(Error::Format(format!("weight.{name} has dtype {dtype}, expected i8")));
                    }
                    let params = quant
                        .weight_params
                        .get(name)
                        .ok_or_else(|| Error::Format(format!("missing weight params for {name}")))?
                        .to_params()?;
                    weights.insert(
                        name.to_string(),
                        QTensor {
                            data: slice.iter().map(|&b| b as i8).collect(),
                            shape: shape.clone(),
                            params,
                        },
                    );
                    let (bshape, bdtype, bslice) = raw_tensors
                        .get(&format!("bias.{name}"))
                        .ok_or_else(|| Error::Format(format!("missing tensor bias.{name}")))?;
                    if bdtype != "i32" {
                        return Err(Error::Format(format!("bias.{name} has dtype {bdtype}, expected i32")));
                    }
                    let scale = parse_scale(
                        quant
                            .bias_scales
                            .get(name)
                            .ok_or_else(|| Error::Format(format!("missing bias scale for {name}")))?,
                    )?;
                    biases.insert(
                        name.to_string(),
                        QBias {
                            data: bslice
                                .chunks_exact(4)
                                .map(|c| i32::from_le_bytes(c.try_into().expect("4 bytes")))
                                .collect(),
                            shape: bshape.clone(),
                            scale,
                        },
                    );
                }
            }
            let activations = quant
                .activations
                .iter()
                .map(|p| p.to_params())
                .collect::<Result<Vec<_>>>()?;
            Ok(LoadedModel::Quantized(QuantizedModel {
                architecture_id: header.architecture_id,
                input_shape: header.input_shape,
                layers: header.layers,
                weights,
                biases,
                activations,
                profile: quant.profile,
            }))
        }
        other => Err(Error::Format(format!("unknown container kind {other:?}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quant::quantize_model;

    #[test]
    fn float_model_round_trips_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.qlm");
        let model = Model::mini_cnn(&[8, 8, 1], 4, Precision::F32, 42).unwrap();
        save_float_model(&model, &path).unwrap();
        let LoadedModel::Float(back) = load_model(&path).unwrap() else {
            panic!("expected float container");
        };
        assert_eq!(back.architecture_id, model.architecture_id);
        for (name, w) in &model.weights {
            assert_eq!(w, &back.weights[name], "weight {name}");
        }
        for (name, b) in &model.biases {
            assert_eq!(b, &back.biases[name], "bias {name}");
        }
    }

    #[test]
    fn quantized_model_round_trips_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("q.qlm");
        let model = Model::mlp(&[4, 4, 1], 3, Precision::F32, 1).unwrap();
        let calib = Tensor::new(vec![4, 4, 4, 1], (0..64).map(|i| (i % 9) as f64 / 8.0).collect()).unwrap();
        let qm = quantize_model(&model, &calib, QuantProfile::Tflite127).unwrap();
        save_quantized_model(&qm, &path).unwrap();
        let LoadedModel::Quantized(back) = load_model(&path).unwrap() else {
            panic!("expected quantized container");
        };
        assert_eq!(back, qm);
    }

    #[test]
    fn truncated_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.qlm");
        let model = Model::mlp(&[4, 4, 1], 3, Precision::F32, 1).unwrap();
        save_float_model(&model, &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(load_model(&path), Err(Error::Format(_))));
    }

    #[test]
    fn bad_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("b.qlm");
        fs::write(&path, b"NOPExxxxyyyy").unwrap();
        assert!(matches!(load_model(&path), Err(Error::Format(_))));
    }

    #[test]
    fn corrupted_payload_fails_digest() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.qlm");
        let model = Model::mlp(&[4, 4, 1], 3, Precision::F32, 1).unwrap();
        save_float_model(&model, &path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        let n = bytes.len();
        bytes[n - 1] ^= 0xFF;
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_model(&path), Err(Error::Format(_))));
    }

    #[test]
    fn scale_strings_round_trip_f64_exactly() {
        for s in [1.0, 2.0 / 127.0, 4.0 / 254.0, 1.2345678901234567e-3] {
            assert_eq!(parse_scale(&format_scale(s)).unwrap(), s);
        }
    }
}

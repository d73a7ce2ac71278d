//! Dense row-major tensors and the reverse-mode tape built on top of them.
//!
//! Storage is always `f64`. A tape or model in [`Precision::F32`] rounds every
//! stored value to the nearest f32 after each operation, reproducing 32-bit
//! float semantics while accumulations still run in f64. Gradient checks run
//! in [`Precision::F64`].

mod gradcheck;
mod tape;

pub use gradcheck::grad_check;
pub use tape::{round_half_away, Padding, ReduceOp, Tape, Var};
pub(crate) use tape::{im2col, matmul_raw, ConvGeom};

use crate::error::{Error, Result};

/// Output spatial size `(oh, ow)` of a convolution, shared with shape checks.
pub fn conv_geometry(
    ishape: &[usize],
    kshape: &[usize],
    stride: usize,
    padding: Padding,
) -> Result<(usize, usize)> {
    let g = tape::ConvGeom::new(ishape, kshape, stride, padding)?;
    Ok((g.oh, g.ow))
}

/// Element precision of a tensor pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    /// Round a value to the representable set of this precision.
    #[inline]
    pub fn quantize(self, x: f64) -> f64 {
        match self {
            Precision::F32 => x as f32 as f64,
            Precision::F64 => x,
        }
    }

    pub fn apply(self, data: &mut [f64]) {
        if self == Precision::F32 {
            for x in data.iter_mut() {
                *x = *x as f32 as f64;
            }
        }
    }
}

/// Dense n-dimensional array, row-major. Rank 0 is a scalar with one element.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::DataLength { expected, got: data.len() });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor { shape, data: vec![0.0; n] }
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Self {
        let n = shape.iter().product();
        Tensor { shape, data: vec![value; n] }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor { shape: vec![], data: vec![value] }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Tensor { shape: vec![data.len()], data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Single element of a scalar (rank-0 or one-element) tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != self.data.len() {
            return Err(Error::DataLength { expected, got: self.data.len() });
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn check_finite(&self, op: &'static str) -> Result<()> {
        if self.all_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite { op })
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, &x| m.max(x.abs()))
    }

    /// Elementwise maximum over all elements; errors on empty tensors.
    pub fn min_max(&self) -> Result<(f64, f64)> {
        if self.data.is_empty() {
            return Err(Error::EmptyReduction { op: "min_max" });
        }
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for &x in &self.data {
            lo = lo.min(x);
            hi = hi.max(x);
        }
        Ok((lo, hi))
    }
}

/// Broadcast shape of two shapes under trailing-dimension alignment.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize], op: &'static str) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        out[i] = if da == db || db == 1 {
            da
        } else if da == 1 {
            db
        } else {
            return Err(Error::ShapeMismatch { op, lhs: a.to_vec(), rhs: b.to_vec() });
        };
    }
    Ok(out)
}

/// Row-major strides, with stride 0 on broadcast (size-1 or missing) axes.
pub(crate) fn broadcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    let offset = rank - shape.len();
    let mut strides = vec![0usize; rank];
    let mut acc = 1usize;
    for i in (0..shape.len()).rev() {
        strides[i + offset] = if shape[i] == 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

/// Apply a binary op under broadcasting. Fast paths for matching shapes,
/// scalar operands, and a trailing-axis operand (bias pattern).
pub(crate) fn broadcast_binary(
    a: &Tensor,
    b: &Tensor,
    op: &'static str,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor> {
    if a.shape == b.shape {
        let data = a
            .data
            .iter()
            .zip(&b.data)
            .map(|(&x, &y)| f(x, y))
            .collect();
        return Ok(Tensor { shape: a.shape.clone(), data });
    }
    if b.data.len() == 1 {
        let y = b.data[0];
        return Ok(Tensor { shape: a.shape.clone(), data: a.data.iter().map(|&x| f(x, y)).collect() });
    }
    if a.data.len() == 1 {
        let x = a.data[0];
        return Ok(Tensor { shape: b.shape.clone(), data: b.data.iter().map(|&y| f(x, y)).collect() });
    }
    if a.shape.len() >= b.shape.len() && b.shape.len() == 1 && a.shape.last() == b.shape.last() {
        let k = b.data.len();
        let mut data = Vec::with_capacity(a.data.len());
        for chunk in a.data.chunks_exact(k) {
            data.extend(chunk.iter().zip(&b.data).map(|(&x, &y)| f(x, y)));
        }
        return Ok(Tensor { shape: a.shape.clone(), data });
    }
    let out_shape = broadcast_shape(&a.shape, &b.shape, op)?;
    let n: usize = out_shape.iter().product();
    let sa = broadcast_strides(&a.shape, &out_shape);
    let sb = broadcast_strides(&b.shape, &out_shape);
    let mut data = vec![0.0; n];
    let rank = out_shape.len();
    let mut idx = vec![0usize; rank];
    let mut ia = 0usize;
    let mut ib = 0usize;
    for out in data.iter_mut() {
        *out = f(a.data[ia], b.data[ib]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            ia += sa[d];
            ib += sb[d];
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
            ia -= sa[d] * out_shape[d];
            ib -= sb[d] * out_shape[d];
        }
    }
    Ok(Tensor { shape: out_shape, data })
}

/// Reduce `grad` (shaped like the broadcast output) back to `shape` by summing
/// over the axes that were expanded.
pub(crate) fn reduce_to_shape(grad: &Tensor, shape: &[usize]) -> Tensor {
    if grad.shape == shape {
        return grad.clone();
    }
    let out_rank = grad.shape.len();
    let mut out = Tensor::zeros(shape.to_vec());
    let strides = broadcast_strides(shape, &grad.shape);
    let mut idx = vec![0usize; out_rank];
    let mut it = 0usize;
    for &g in grad.data.iter() {
        out.data[it] += g;
        for d in (0..out_rank).rev() {
            idx[d] += 1;
            it += strides[d];
            if idx[d] < grad.shape[d] {
                break;
            }
            idx[d] = 0;
            it -= strides[d] * grad.shape[d];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_data_length_must_agree() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(matches!(
            Tensor::new(vec![2, 3], vec![0.0; 5]),
            Err(Error::DataLength { expected: 6, got: 5 })
        ));
    }

    #[test]
    fn broadcast_shapes() {
        assert_eq!(broadcast_shape(&[2, 3], &[3], "t").unwrap(), vec![2, 3]);
        assert_eq!(broadcast_shape(&[4, 1, 2], &[5, 1], "t").unwrap(), vec![4, 5, 2]);
        assert_eq!(broadcast_shape(&[], &[2, 2], "t").unwrap(), vec![2, 2]);
        assert!(broadcast_shape(&[2, 3], &[2, 4], "t").is_err());
    }

    #[test]
    fn broadcast_binary_bias_add() {
        let a = Tensor::new(vec![2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let b = Tensor::new(vec![3], vec![10., 20., 30.]).unwrap();
        let c = broadcast_binary(&a, &b, "add", |x, y| x + y).unwrap();
        assert_eq!(c.data(), &[11., 22., 33., 14., 25., 36.]);
    }

    #[test]
    fn reduce_to_shape_sums_expanded_axes() {
        let g = Tensor::new(vec![2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let r = reduce_to_shape(&g, &[3]);
        assert_eq!(r.data(), &[5., 7., 9.]);
        let r2 = reduce_to_shape(&g, &[]);
        assert_eq!(r2.data(), &[21.0]);
    }

    #[test]
    fn f32_precision_rounds_storage() {
        let third = 1.0f64 / 3.0;
        assert_ne!(Precision::F32.quantize(third), third);
        assert_eq!(Precision::F32.quantize(third), (1.0f32 / 3.0f32) as f64);
        assert_eq!(Precision::F64.quantize(third), third);
    }
}

//! Dense row-major tensors with explicit element types.
//!
//! A [`Tensor`] owns a contiguous buffer and a shape. There are no strides or
//! views; reshaping is allowed, slicing copies. Memory accounting anywhere in
//! the crate goes through [`Tensor::byte_size`].

mod ops;

use std::fmt;

use half::f16;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub(crate) use ops::gemm;
pub use ops::{
    add_bias, cast, gelu, gelu_scalar, layernorm, linear, matmul, softmax, LAYERNORM_EPS,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F16,
    I8,
}

impl Dtype {
    pub const fn bytes_per_element(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F16 => 2,
            Dtype::I8 => 1,
        }
    }

    pub const fn name(self) -> &'static str {
        match self {
            Dtype::F32 => "f32",
            Dtype::F16 => "f16",
            Dtype::I8 => "i8",
        }
    }
}

impl fmt::Display for Dtype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F16(Vec<f16>),
    I8(Vec<i8>),
}

impl TensorData {
    fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F16(v) => v.len(),
            TensorData::I8(v) => v.len(),
        }
    }

    fn dtype(&self) -> Dtype {
        match self {
            TensorData::F32(_) => Dtype::F32,
            TensorData::F16(_) => Dtype::F16,
            TensorData::I8(_) => Dtype::I8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: TensorData,
}

fn element_count(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() {
        return Err(Error::Dimension("tensor shape must have at least one axis".into()));
    }
    if let Some(axis) = shape.iter().position(|&d| d == 0) {
        return Err(Error::Dimension(format!(
            "axis {axis} of shape {shape:?} is zero; dimensions must be positive"
        )));
    }
    Ok(shape.iter().product())
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: TensorData) -> Result<Self> {
        let n = element_count(&shape)?;
        if n != data.len() {
            return Err(Error::Dimension(format!(
                "shape {shape:?} needs {n} elements, buffer has {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn from_f32(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        Self::new(shape, TensorData::F32(data))
    }

    pub fn from_f16(shape: Vec<usize>, data: Vec<f16>) -> Result<Self> {
        Self::new(shape, TensorData::F16(data))
    }

    pub fn from_i8(shape: Vec<usize>, data: Vec<i8>) -> Result<Self> {
        Self::new(shape, TensorData::I8(data))
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        let n = element_count(&shape)?;
        Ok(Tensor {
            shape,
            data: TensorData::F32(vec![0.0; n]),
        })
    }

    pub fn full(shape: Vec<usize>, value: f32) -> Result<Self> {
        let n = element_count(&shape)?;
        Ok(Tensor {
            shape,
            data: TensorData::F32(vec![value; n]),
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn dtype(&self) -> Dtype {
        self.data.dtype()
    }

    pub fn data(&self) -> &TensorData {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Bytes occupied by the element buffer: `product(shape) * bytes_per_element(dtype)`.
    pub fn byte_size(&self) -> usize {
        self.len() * self.dtype().bytes_per_element()
    }

    /// Size of the last axis.
    pub fn last_dim(&self) -> usize {
        *self.shape.last().expect("shape is never empty")
    }

    /// Number of rows when viewed as `[len / last_dim, last_dim]`.
    pub fn rows(&self) -> usize {
        self.len() / self.last_dim()
    }

    pub fn as_f32(&self) -> Result<&[f32]> {
        match &self.data {
            TensorData::F32(v) => Ok(v),
            other => Err(Error::PrecisionState(format!(
                "expected an f32 tensor, found {}",
                other.dtype()
            ))),
        }
    }

    pub fn as_f32_mut(&mut self) -> Result<&mut [f32]> {
        match &mut self.data {
            TensorData::F32(v) => Ok(v),
            other => Err(Error::PrecisionState(format!(
                "expected an f32 tensor, found {}",
                other.dtype()
            ))),
        }
    }

    pub fn as_f16(&self) -> Result<&[f16]> {
        match &self.data {
            TensorData::F16(v) => Ok(v),
            other => Err(Error::PrecisionState(format!(
                "expected an f16 tensor, found {}",
                other.dtype()
            ))),
        }
    }

    pub fn as_i8(&self) -> Result<&[i8]> {
        match &self.data {
            TensorData::I8(v) => Ok(v),
            other => Err(Error::PrecisionState(format!(
                "expected an i8 tensor, found {}",
                other.dtype()
            ))),
        }
    }

    /// Element values widened to f32. F16 widening is exact; I8 values map to
    /// their integer value.
    pub fn to_f32_vec(&self) -> Vec<f32> {
        match &self.data {
            TensorData::F32(v) => v.clone(),
            TensorData::F16(v) => v.iter().map(|x| x.to_f32()).collect(),
            TensorData::I8(v) => v.iter().map(|&x| f32::from(x)).collect(),
        }
    }

    pub fn into_f32_vec(self) -> Vec<f32> {
        match self.data {
            TensorData::F32(v) => v,
            _ => self.to_f32_vec(),
        }
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let n = element_count(&shape)?;
        if n != self.len() {
            return Err(Error::Dimension(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    /// Little-endian serialization of the element buffer.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        match &self.data {
            TensorData::F32(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            TensorData::F16(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            TensorData::I8(v) => v.iter().map(|&x| x as u8).collect(),
        }
    }

    pub fn from_le_bytes(shape: Vec<usize>, dtype: Dtype, bytes: &[u8]) -> Result<Self> {
        let n = element_count(&shape)?;
        if bytes.len() != n * dtype.bytes_per_element() {
            return Err(Error::Format(format!(
                "payload of {} bytes does not match {dtype} tensor of shape {shape:?}",
                bytes.len()
            )));
        }
        let data = match dtype {
            Dtype::F32 => TensorData::F32(
                bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect(),
            ),
            Dtype::F16 => TensorData::F16(
                bytes
                    .chunks_exact(2)
                    .map(|c| f16::from_le_bytes([c[0], c[1]]))
                    .collect(),
            ),
            Dtype::I8 => TensorData::I8(bytes.iter().map(|&b| b as i8).collect()),
        };
        Tensor::new(shape, data)
    }

    /// Bitwise equality, distinguishing `-0.0` from `0.0` and comparing NaN payloads.
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape && self.dtype() == other.dtype() && self.to_le_bytes() == other.to_le_bytes()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bytes_per_element() {
        assert_eq!(Dtype::F32.bytes_per_element(), 4);
        assert_eq!(Dtype::F16.bytes_per_element(), 2);
        assert_eq!(Dtype::I8.bytes_per_element(), 1);
    }

    #[test]
    fn rejects_bad_shapes() {
        assert!(matches!(
            Tensor::from_f32(vec![2, 3], vec![0.0; 5]),
            Err(Error::Dimension(_))
        ));
        assert!(matches!(Tensor::zeros(vec![2, 0]), Err(Error::Dimension(_))));
        assert!(matches!(Tensor::zeros(vec![]), Err(Error::Dimension(_))));
    }

    #[test]
    fn byte_size_matches_serialized_length() {
        let t = Tensor::from_i8(vec![3, 5], vec![1; 15]).unwrap();
        assert_eq!(t.byte_size(), 15);
        assert_eq!(t.to_le_bytes().len(), 15);
        let t = Tensor::from_f16(vec![4], vec![f16::ONE; 4]).unwrap();
        assert_eq!(t.byte_size(), 8);
    }

    #[test]
    fn wrong_accessor_is_precision_error() {
        let t = Tensor::from_i8(vec![1], vec![1]).unwrap();
        assert!(matches!(t.as_f32(), Err(Error::PrecisionState(_))));
    }

    proptest::proptest! {
        #[test]
        fn le_bytes_roundtrip(shape in proptest::collection::vec(1usize..5, 1..4), dtype in 0u8..3) {
            let n: usize = shape.iter().product();
            let t = match dtype {
                0 => Tensor::from_f32(shape.clone(), (0..n).map(|i| i as f32 * 0.37 - 1.0).collect()),
                1 => Tensor::from_f16(shape.clone(), (0..n).map(|i| f16::from_f32(i as f32 * 0.37)).collect()),
                _ => Tensor::from_i8(shape.clone(), (0..n).map(|i| (i % 255) as i8).collect()),
            }.unwrap();
            let bytes = t.to_le_bytes();
            proptest::prop_assert_eq!(bytes.len(), t.byte_size());
            let back = Tensor::from_le_bytes(shape, t.dtype(), &bytes).unwrap();
            proptest::prop_assert!(back.bit_eq(&t));
        }
    }
}

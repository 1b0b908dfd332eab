//! Dense NCHW tensors, either f32 or affine-quantized u8.

use std::borrow::Cow;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quant::QuantParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    U8,
}

impl fmt::Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DType::F32 => "f32",
            DType::U8 => "u8",
        })
    }
}

/// Storage for a [`Tensor`]. A u8 buffer always carries its quantization
/// parameters, an f32 buffer never does.
#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    U8 { values: Vec<u8>, quant: QuantParams },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: TensorData,
}

fn check_shape(shape: &[usize], len: usize) -> Result<()> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(Error::shape(format!(
            "shape {shape:?} must have positive dims"
        )));
    }
    let n: usize = shape.iter().product();
    if n != len {
        return Err(Error::shape(format!(
            "shape {shape:?} holds {n} elements, buffer has {len}"
        )));
    }
    Ok(())
}

impl Tensor {
    pub fn from_f32(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        check_shape(&shape, data.len())?;
        Ok(Self {
            shape,
            data: TensorData::F32(data),
        })
    }

    pub fn from_u8(shape: Vec<usize>, values: Vec<u8>, quant: QuantParams) -> Result<Self> {
        check_shape(&shape, values.len())?;
        Ok(Self {
            shape,
            data: TensorData::U8 { values, quant },
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        let n = shape.iter().product();
        Self::from_f32(shape, vec![0.0; n])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn dtype(&self) -> DType {
        match self.data {
            TensorData::F32(_) => DType::F32,
            TensorData::U8 { .. } => DType::U8,
        }
    }

    pub fn data(&self) -> &TensorData {
        &self.data
    }

    pub fn len(&self) -> usize {
        match &self.data {
            TensorData::F32(v) => v.len(),
            TensorData::U8 { values, .. } => values.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn quant(&self) -> Option<QuantParams> {
        match self.data {
            TensorData::F32(_) => None,
            TensorData::U8 { quant, .. } => Some(quant),
        }
    }

    pub fn as_f32(&self) -> Option<&[f32]> {
        match &self.data {
            TensorData::F32(v) => Some(v),
            TensorData::U8 { .. } => None,
        }
    }

    pub fn as_u8(&self) -> Option<(&[u8], QuantParams)> {
        match &self.data {
            TensorData::F32(_) => None,
            TensorData::U8 { values, quant } => Some((values, *quant)),
        }
    }

    /// Real values, dequantizing when needed.
    pub fn f32_values(&self) -> Cow<'_, [f32]> {
        match &self.data {
            TensorData::F32(v) => Cow::Borrowed(v),
            TensorData::U8 { values, quant } => {
                Cow::Owned(values.iter().map(|&q| quant.dequantize(q)).collect())
            }
        }
    }

    pub fn to_f32(&self) -> Tensor {
        match &self.data {
            TensorData::F32(_) => self.clone(),
            TensorData::U8 { .. } => Tensor {
                shape: self.shape.clone(),
                data: TensorData::F32(self.f32_values().into_owned()),
            },
        }
    }

    pub fn into_f32_vec(self) -> Vec<f32> {
        match self.data {
            TensorData::F32(v) => v,
            TensorData::U8 { values, quant } => {
                values.iter().map(|&q| quant.dequantize(q)).collect()
            }
        }
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        check_shape(&shape, self.len())?;
        self.shape = shape;
        Ok(self)
    }

    /// Bytes occupied by the element buffer.
    pub fn byte_len(&self) -> usize {
        match &self.data {
            TensorData::F32(v) => v.len() * 4,
            TensorData::U8 { values, .. } => values.len(),
        }
    }

    /// Size of dimension 1 (channels for NCHW, features for rank-2).
    pub fn channels(&self) -> usize {
        self.shape.get(1).copied().unwrap_or(1)
    }
}

//! Named tensor storage used by model bundles and checkpoints.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    I8,
}

/// A dense row-major tensor, either full precision or symmetric int8 with a
/// single per-tensor scale.
#[derive(Debug, Clone, PartialEq)]
pub enum Tensor {
    F32 { shape: Vec<usize>, data: Vec<f32> },
    I8 { shape: Vec<usize>, data: Vec<i8>, scale: f32 },
}

impl Tensor {
    pub fn f32(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        check_len(&shape, data.len())?;
        Ok(Tensor::F32 { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor::F32 { shape, data: vec![0.0; n] }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            Tensor::F32 { shape, .. } | Tensor::I8 { shape, .. } => shape,
        }
    }

    pub fn dtype(&self) -> DType {
        match self {
            Tensor::F32 { .. } => DType::F32,
            Tensor::I8 { .. } => DType::I8,
        }
    }

    pub fn len(&self) -> usize {
        self.shape().iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_quantized(&self) -> bool {
        matches!(self, Tensor::I8 { .. })
    }

    pub fn scale(&self) -> Option<f32> {
        match self {
            Tensor::I8 { scale, .. } => Some(*scale),
            Tensor::F32 { .. } => None,
        }
    }

    /// Storage size of the payload in bytes.
    pub fn nbytes(&self) -> usize {
        match self {
            Tensor::F32 { data, .. } => data.len() * 4,
            Tensor::I8 { data, .. } => data.len(),
        }
    }

    /// Element values as f64, dequantizing int8 storage.
    pub fn to_f64(&self) -> Vec<f64> {
        match self {
            Tensor::F32 { data, .. } => data.iter().map(|&x| x as f64).collect(),
            Tensor::I8 { data, scale, .. } => {
                let s = *scale as f64;
                data.iter().map(|&q| q as f64 * s).collect()
            }
        }
    }

    pub fn as_f32(&self) -> Option<&[f32]> {
        match self {
            Tensor::F32 { data, .. } => Some(data),
            Tensor::I8 { .. } => None,
        }
    }
}

pub(crate) fn check_len(shape: &[usize], len: usize) -> Result<()> {
    let expected: usize = shape.iter().product();
    if expected != len {
        return Err(Error::Config(format!("tensor of shape {shape:?} needs {expected} elements, got {len}")));
    }
    Ok(())
}

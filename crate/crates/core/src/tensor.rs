//! Typed activation tensors with shape `[T, N, D]` (timesteps, tokens, channels).

use ndarray::{Array3, ArrayView3};

use crate::error::{Error, Result};

/// Real-valued pre-threshold membrane potentials.
#[derive(Clone, Debug, PartialEq)]
pub struct MembraneTensor {
    data: Array3<f64>,
}

impl MembraneTensor {
    pub fn new(data: Array3<f64>) -> Result<Self> {
        if let Some(v) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("membrane tensor (value {v})")));
        }
        Ok(Self { data })
    }

    pub fn zeros(t: usize, n: usize, d: usize) -> Self {
        Self { data: Array3::zeros((t, n, d)) }
    }

    pub fn from_shape_vec(shape: (usize, usize, usize), values: Vec<f64>) -> Result<Self> {
        let data = Array3::from_shape_vec(shape, values).map_err(|e| Error::Shape(e.to_string()))?;
        Self::new(data)
    }

    pub fn view(&self) -> ArrayView3<'_, f64> {
        self.data.view()
    }

    pub fn data(&self) -> &Array3<f64> {
        &self.data
    }

    pub fn into_inner(self) -> Array3<f64> {
        self.data
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.data.dim()
    }
}

/// Binary activations. Every entry is exactly 0 or 1.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SpikeTensor {
    data: Array3<u8>,
}

impl SpikeTensor {
    pub fn new(data: Array3<u8>) -> Result<Self> {
        if let Some(&v) = data.iter().find(|&&v| v > 1) {
            return Err(Error::NonBinary { site: "spike tensor".into(), value: v as f64 });
        }
        Ok(Self { data })
    }

    pub fn zeros(t: usize, n: usize, d: usize) -> Self {
        Self { data: Array3::zeros((t, n, d)) }
    }

    pub fn from_shape_vec(shape: (usize, usize, usize), values: Vec<u8>) -> Result<Self> {
        let data = Array3::from_shape_vec(shape, values).map_err(|e| Error::Shape(e.to_string()))?;
        Self::new(data)
    }

    /// Converts a real array whose entries are exactly 0.0 or 1.0.
    pub fn from_real(values: ArrayView3<'_, f64>) -> Result<Self> {
        let mut data = Array3::zeros(values.dim());
        for (dst, &v) in data.iter_mut().zip(values.iter()) {
            *dst = if v == 0.0 {
                0
            } else if v == 1.0 {
                1
            } else {
                return Err(Error::NonBinary { site: "spike tensor".into(), value: v });
            };
        }
        Ok(Self { data })
    }

    pub(crate) fn from_bits_unchecked(data: Array3<u8>) -> Self {
        debug_assert!(data.iter().all(|&v| v <= 1));
        Self { data }
    }

    pub fn view(&self) -> ArrayView3<'_, u8> {
        self.data.view()
    }

    pub fn data(&self) -> &Array3<u8> {
        &self.data
    }

    pub fn to_real(&self) -> Array3<f64> {
        self.data.mapv(f64::from)
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.data.dim()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn count_ones(&self) -> usize {
        self.data.iter().map(|&v| v as usize).sum()
    }
}

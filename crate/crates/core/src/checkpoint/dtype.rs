use std::fmt;

use half::{bf16, f16};

use crate::error::{Error, Result};

/// Storage dtypes accepted in checkpoint files.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Dtype {
    F16,
    BF16,
    F32,
    F64,
}

impl Dtype {
    pub fn width(self) -> usize {
        match self {
            Dtype::F16 | Dtype::BF16 => 2,
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Dtype::F16 => "F16",
            Dtype::BF16 => "BF16",
            Dtype::F32 => "F32",
            Dtype::F64 => "F64",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "F16" => Ok(Dtype::F16),
            "BF16" => Ok(Dtype::BF16),
            "F32" => Ok(Dtype::F32),
            "F64" => Ok(Dtype::F64),
            other => Err(Error::Dtype(other.to_string())),
        }
    }

    /// Tensors of this dtype are materialized (and accumulated) in f64
    /// only when stored as f64; everything else widens to f32.
    pub fn accumulates_in_f64(self) -> bool {
        self == Dtype::F64
    }
}

impl fmt::Display for Dtype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Materialized tensor values in their accumulation precision.
#[derive(Clone, Debug, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl TensorData {
    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, i: usize) -> f64 {
        match self {
            TensorData::F32(v) => f64::from(v[i]),
            TensorData::F64(v) => v[i],
        }
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        match self {
            TensorData::F32(v) => v.iter().map(|&x| f64::from(x)).collect(),
            TensorData::F64(v) => v.clone(),
        }
    }

    pub fn zeros_like(&self) -> TensorData {
        match self {
            TensorData::F32(v) => TensorData::F32(vec![0.0; v.len()]),
            TensorData::F64(v) => TensorData::F64(vec![0.0; v.len()]),
        }
    }

    pub fn all_finite(&self) -> bool {
        match self {
            TensorData::F32(v) => v.iter().all(|x| x.is_finite()),
            TensorData::F64(v) => v.iter().all(|x| x.is_finite()),
        }
    }

    /// Empty buffer in the accumulation precision of `dtype`.
    pub(crate) fn with_capacity(dtype: Dtype, n: usize) -> TensorData {
        if dtype.accumulates_in_f64() {
            TensorData::F64(Vec::with_capacity(n))
        } else {
            TensorData::F32(Vec::with_capacity(n))
        }
    }

    /// Decodes little-endian `bytes` of `dtype` and appends them. `bytes`
    /// must hold a whole number of elements.
    pub(crate) fn extend_from_le_bytes(&mut self, dtype: Dtype, bytes: &[u8]) {
        debug_assert_eq!(bytes.len() % dtype.width(), 0);
        match (self, dtype) {
            (TensorData::F32(out), Dtype::F16) => out.extend(
                bytes
                    .chunks_exact(2)
                    .map(|c| f16::from_le_bytes([c[0], c[1]]).to_f32()),
            ),
            (TensorData::F32(out), Dtype::BF16) => out.extend(
                bytes
                    .chunks_exact(2)
                    .map(|c| bf16::from_le_bytes([c[0], c[1]]).to_f32()),
            ),
            (TensorData::F32(out), Dtype::F32) => out.extend(
                bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])),
            ),
            (TensorData::F64(out), Dtype::F64) => out.extend(bytes.chunks_exact(8).map(|c| {
                f64::from_le_bytes([c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7]])
            })),
            (TensorData::F64(out), other) => {
                let mut tmp = TensorData::with_capacity(other, bytes.len() / other.width());
                tmp.extend_from_le_bytes(other, bytes);
                out.extend(tmp.to_f64_vec());
            }
            (TensorData::F32(out), Dtype::F64) => out.extend(bytes.chunks_exact(8).map(|c| {
                f64::from_le_bytes([c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7]]) as f32
            })),
        }
    }

    pub fn decode(dtype: Dtype, bytes: &[u8]) -> TensorData {
        let mut out = TensorData::with_capacity(dtype, bytes.len() / dtype.width());
        out.extend_from_le_bytes(dtype, bytes);
        out
    }

    /// Encodes values into `dtype` storage bytes. Narrowing rounds to
    /// nearest, ties to even.
    pub fn encode(&self, dtype: Dtype) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.len() * dtype.width());
        self.encode_range_into(dtype, 0..self.len(), &mut out);
        out
    }

    pub(crate) fn encode_range_into(
        &self,
        dtype: Dtype,
        range: std::ops::Range<usize>,
        out: &mut Vec<u8>,
    ) {
        match (self, dtype) {
            (TensorData::F32(v), Dtype::F16) => {
                for &x in &v[range] {
                    out.extend_from_slice(&f16::from_f32(x).to_le_bytes());
                }
            }
            (TensorData::F32(v), Dtype::BF16) => {
                for &x in &v[range] {
                    out.extend_from_slice(&bf16::from_f32(x).to_le_bytes());
                }
            }
            (TensorData::F32(v), Dtype::F32) => {
                for &x in &v[range] {
                    out.extend_from_slice(&x.to_le_bytes());
                }
            }
            (TensorData::F32(v), Dtype::F64) => {
                for &x in &v[range] {
                    out.extend_from_slice(&f64::from(x).to_le_bytes());
                }
            }
            (TensorData::F64(v), Dtype::F16) => {
                for &x in &v[range] {
                    out.extend_from_slice(&f16::from_f64(x).to_le_bytes());
                }
            }
            (TensorData::F64(v), Dtype::BF16) => {
                for &x in &v[range] {
                    out.extend_from_slice(&bf16::from_f64(x).to_le_bytes());
                }
            }
            (TensorData::F64(v), Dtype::F32) => {
                for &x in &v[range] {
                    out.extend_from_slice(&(x as f32).to_le_bytes());
                }
            }
            (TensorData::F64(v), Dtype::F64) => {
                for &x in &v[range] {
                    out.extend_from_slice(&x.to_le_bytes());
                }
            }
        }
    }
}

/// Float types that tensor arithmetic is generic over.
pub trait Scalar: num_traits::Float + Send + Sync + fmt::Debug + 'static {
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        f64::from(self)
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
}

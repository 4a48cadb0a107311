//! Flat named-tensor archive shared by backbone weights, normality pools and
//! training checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        8 bytes   "PNPTARC\0"
//! header_len   u64
//! header       header_len bytes of UTF-8 JSON
//! data         concatenated raw tensor payloads
//! ```
//!
//! The header is a JSON object:
//!
//! ```json
//! {
//!   "format_version": 1,
//!   "kind": "pool",
//!   "metadata": { ... },
//!   "tensors": [
//!     { "name": "proto.0.scale0", "dtype": "f32", "shape": [16, 32, 32],
//!       "offset": 0, "length": 65536 }
//!   ]
//! }
//! ```
//!
//! `offset` and `length` are byte positions relative to the start of the data
//! section. Tensors are stored in header order without padding.

use std::collections::HashSet;
use std::path::Path;

use ndarray::{Array1, Array2, Array3, ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"PNPTARC\0";
pub const FORMAT_VERSION: u32 = 1;
const MAX_HEADER_BYTES: u64 = 64 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

#[derive(Debug, Clone)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: TensorData,
}

impl PartialEq for Tensor {
    /// Bitwise comparison, so that NaN payloads and signed zeros round-trip.
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape
            && match (&self.data, &other.data) {
                (TensorData::F32(a), TensorData::F32(b)) => {
                    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
                }
                (TensorData::F64(a), TensorData::F64(b)) => {
                    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
                }
                _ => false,
            }
    }
}

impl Tensor {
    pub fn dtype(&self) -> DType {
        match self.data {
            TensorData::F32(_) => DType::F32,
            TensorData::F64(_) => DType::F64,
        }
    }

    fn byte_len(&self) -> usize {
        self.shape.iter().product::<usize>() * self.dtype().size()
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    dtype: DType,
    shape: Vec<usize>,
    offset: u64,
    length: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    kind: String,
    #[serde(default)]
    metadata: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorArchive {
    pub kind: String,
    pub metadata: serde_json::Value,
    tensors: Vec<(String, Tensor)>,
}

impl TensorArchive {
    pub fn new(kind: impl Into<String>) -> Self {
        Self {
            kind: kind.into(),
            metadata: serde_json::Value::Object(Default::default()),
            tensors: Vec::new(),
        }
    }

    pub fn with_metadata(mut self, metadata: serde_json::Value) -> Self {
        self.metadata = metadata;
        self
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        let name = name.into();
        if let Some(slot) = self.tensors.iter_mut().find(|(n, _)| *n == name) {
            slot.1 = tensor;
        } else {
            self.tensors.push((name, tensor));
        }
    }

    pub fn insert_f32<D: ndarray::Dimension>(
        &mut self,
        name: impl Into<String>,
        array: &ndarray::Array<f32, D>,
    ) {
        let data = array.iter().copied().collect();
        self.insert(
            name,
            Tensor {
                shape: array.shape().to_vec(),
                data: TensorData::F32(data),
            },
        );
    }

    pub fn insert_f64<D: ndarray::Dimension>(
        &mut self,
        name: impl Into<String>,
        array: &ndarray::Array<f64, D>,
    ) {
        let data = array.iter().copied().collect();
        self.insert(
            name,
            Tensor {
                shape: array.shape().to_vec(),
                data: TensorData::F64(data),
            },
        );
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.iter().map(|(n, _)| n.as_str())
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name).ok_or_else(|| {
            Error::Corrupt(format!("missing tensor `{name}` in {} archive", self.kind))
        })
    }

    /// Tensor as `f32`, widening or narrowing as needed.
    pub fn array_f32(&self, name: &str) -> Result<ArrayD<f32>> {
        let t = self.require(name)?;
        let data: Vec<f32> = match &t.data {
            TensorData::F32(v) => v.clone(),
            TensorData::F64(v) => v.iter().map(|&x| x as f32).collect(),
        };
        Ok(ArrayD::from_shape_vec(IxDyn(&t.shape), data).expect("validated shape"))
    }

    pub fn array_f64(&self, name: &str) -> Result<ArrayD<f64>> {
        let t = self.require(name)?;
        let data: Vec<f64> = match &t.data {
            TensorData::F32(v) => v.iter().map(|&x| x as f64).collect(),
            TensorData::F64(v) => v.clone(),
        };
        Ok(ArrayD::from_shape_vec(IxDyn(&t.shape), data).expect("validated shape"))
    }

    pub fn array1_f32(&self, name: &str) -> Result<Array1<f32>> {
        self.array_f32(name)?
            .into_dimensionality()
            .map_err(|_| Error::Corrupt(format!("tensor `{name}` is not 1-D")))
    }

    pub fn array2_f32(&self, name: &str) -> Result<Array2<f32>> {
        self.array_f32(name)?
            .into_dimensionality()
            .map_err(|_| Error::Corrupt(format!("tensor `{name}` is not 2-D")))
    }

    pub fn array2_f64(&self, name: &str) -> Result<Array2<f64>> {
        self.array_f64(name)?
            .into_dimensionality()
            .map_err(|_| Error::Corrupt(format!("tensor `{name}` is not 2-D")))
    }

    pub fn array3_f32(&self, name: &str) -> Result<Array3<f32>> {
        self.array_f32(name)?
            .into_dimensionality()
            .map_err(|_| Error::Corrupt(format!("tensor `{name}` is not 3-D")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut offset = 0u64;
        let entries: Vec<TensorEntry> = self
            .tensors
            .iter()
            .map(|(name, t)| {
                let length = t.byte_len() as u64;
                let e = TensorEntry {
                    name: name.clone(),
                    dtype: t.dtype(),
                    shape: t.shape.clone(),
                    offset,
                    length,
                };
                offset += length;
                e
            })
            .collect();
        let header = Header {
            format_version: FORMAT_VERSION,
            kind: self.kind.clone(),
            metadata: self.metadata.clone(),
            tensors: entries,
        };
        let header = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(16 + header.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, t) in &self.tensors {
            match &t.data {
                TensorData::F32(v) => v
                    .iter()
                    .for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                TensorData::F64(v) => v
                    .iter()
                    .for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            }
        }
        out
    }

    /// Parses an archive from untrusted bytes.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 {
            return Err(Error::Corrupt(
                "archive shorter than its fixed preamble".into(),
            ));
        }
        if &bytes[..8] != MAGIC {
            return Err(Error::Corrupt("bad archive magic".into()));
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
        let rest = (bytes.len() - 16) as u64;
        if header_len > MAX_HEADER_BYTES || header_len > rest {
            return Err(Error::Corrupt(format!(
                "header length {header_len} exceeds file"
            )));
        }
        let header_end = 16 + header_len as usize;
        let header: Header = serde_json::from_slice(&bytes[16..header_end])
            .map_err(|e| Error::Corrupt(format!("unreadable header: {e}")))?;
        if header.format_version != FORMAT_VERSION {
            return Err(Error::Version {
                found: header.format_version,
                expected: FORMAT_VERSION,
            });
        }
        let data = &bytes[header_end..];
        let mut seen = HashSet::new();
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in header.tensors {
            if !seen.insert(e.name.clone()) {
                return Err(Error::Corrupt(format!("duplicate tensor `{}`", e.name)));
            }
            let count = e
                .shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| Error::Corrupt(format!("tensor `{}` shape overflows", e.name)))?;
            let expected = (count as u64).checked_mul(e.dtype.size() as u64);
            if expected != Some(e.length) {
                return Err(Error::Corrupt(format!(
                    "tensor `{}` length disagrees with its shape",
                    e.name
                )));
            }
            let end = e
                .offset
                .checked_add(e.length)
                .filter(|&end| end <= data.len() as u64)
                .ok_or_else(|| {
                    Error::Corrupt(format!(
                        "tensor `{}` extends past end of file (truncated?)",
                        e.name
                    ))
                })?;
            let raw = &data[e.offset as usize..end as usize];
            let payload = match e.dtype {
                DType::F32 => TensorData::F32(
                    raw.chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                ),
                DType::F64 => TensorData::F64(
                    raw.chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                ),
            };
            tensors.push((
                e.name,
                Tensor {
                    shape: e.shape,
                    data: payload,
                },
            ));
        }
        Ok(Self {
            kind: header.kind,
            metadata: header.metadata,
            tensors,
        })
    }

    pub fn expect_kind(self, kind: &str) -> Result<Self> {
        if self.kind != kind {
            return Err(Error::Corrupt(format!(
                "expected a {kind} archive, found {}",
                self.kind
            )));
        }
        Ok(self)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::Load {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    fn sample() -> TensorArchive {
        let mut a = TensorArchive::new("test").with_metadata(serde_json::json!({"k": [1, 2]}));
        a.insert_f32("a", &array![[1.0f32, -0.0], [f32::NAN, 3.5]]);
        a.insert_f64("b", &array![1.0f64, 2.0, 3.0]);
        a
    }

    #[test]
    fn truncated_file_is_corrupt() {
        let bytes = sample().to_bytes();
        for cut in [0, 7, 15, 20, bytes.len() - 1] {
            let err = TensorArchive::from_bytes(&bytes[..cut]).unwrap_err();
            assert!(matches!(err, Error::Corrupt(_)), "cut {cut}: {err}");
        }
    }

    #[test]
    fn version_mismatch_is_reported() {
        let mut bytes = sample().to_bytes();
        let needle = b"\"format_version\":1";
        let at = bytes
            .windows(needle.len())
            .position(|w| w == needle)
            .unwrap();
        bytes[at + needle.len() - 1] = b'9';
        let err = TensorArchive::from_bytes(&bytes).unwrap_err();
        assert!(matches!(err, Error::Version { found: 9, .. }));
    }

    #[test]
    fn nan_and_signed_zero_roundtrip_bitwise() {
        let a = sample();
        assert_eq!(TensorArchive::from_bytes(&a.to_bytes()).unwrap(), a);
    }

    proptest! {
        #[test]
        fn roundtrip_is_lossless(values in proptest::collection::vec(any::<f32>(), 0..64), rows in 1usize..4) {
            let cols = values.len() / rows;
            let arr = Array2::from_shape_vec((rows, cols), values[..rows * cols].to_vec()).unwrap();
            let mut a = TensorArchive::new("prop");
            a.insert_f32("x", &arr);
            let back = TensorArchive::from_bytes(&a.to_bytes()).unwrap();
            prop_assert_eq!(back, a);
        }

        #[test]
        fn arbitrary_bytes_never_panic(bytes in proptest::collection::vec(any::<u8>(), 0..256)) {
            let _ = TensorArchive::from_bytes(&bytes);
        }
    }
}

//! Binary array container: a JSON header followed by 64-byte-aligned
//! little-endian array blobs, each with a CRC32 in the manifest.
//!
//! The same layout backs model files (`DREG-MODEL`), cached geometry maps
//! (`DREG-MAPS`), fit checkpoints (`DREG-STATE`), landmark blobs
//! (`DREG-LANDMARKS`) and solver dumps (`DREG-PLIKS`); the `magic` field
//! of the header distinguishes them. Writing is deterministic: the same
//! container serializes to the same bytes.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// File-level alignment for array blobs.
pub const BLOB_ALIGN: usize = 64;

/// Current container format version.
pub const FORMAT_VERSION: u32 = 1;

/// Hard cap on header size so a corrupt length prefix cannot trigger a
/// huge allocation.
const MAX_HEADER_LEN: u64 = 16 * 1024 * 1024;

#[derive(Debug, Error)]
pub enum ContainerError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("file too short to hold a container header")]
    Truncated,
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },
    #[error("unsupported container version {0} (supported: {FORMAT_VERSION})")]
    UnsupportedVersion(u32),
    #[error("checksum mismatch for array {array:?}")]
    Checksum { array: String },
    #[error("malformed header: {0}")]
    Header(String),
    #[error("array {array:?}: {reason}")]
    Array { array: String, reason: String },
    #[error("missing array {0:?}")]
    Missing(String),
    #[error("missing dimension {0:?}")]
    MissingDim(String),
}

pub type Result<T> = std::result::Result<T, ContainerError>;

/// Element type of a stored array.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Dtype {
    #[serde(rename = "f32")]
    F32,
    #[serde(rename = "f64")]
    F64,
    #[serde(rename = "i32")]
    I32,
    #[serde(rename = "u8")]
    U8,
}

impl Dtype {
    pub fn size(self) -> usize {
        match self {
            Dtype::F32 | Dtype::I32 => 4,
            Dtype::F64 => 8,
            Dtype::U8 => 1,
        }
    }
}

impl fmt::Display for Dtype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Dtype::F32 => "f32",
            Dtype::F64 => "f64",
            Dtype::I32 => "i32",
            Dtype::U8 => "u8",
        };
        f.write_str(s)
    }
}

/// Typed array payload, always little-endian on disk.
#[derive(Debug, Clone, PartialEq)]
pub enum ArrayData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    I32(Vec<i32>),
    U8(Vec<u8>),
}

impl ArrayData {
    pub fn dtype(&self) -> Dtype {
        match self {
            ArrayData::F32(_) => Dtype::F32,
            ArrayData::F64(_) => Dtype::F64,
            ArrayData::I32(_) => Dtype::I32,
            ArrayData::U8(_) => Dtype::U8,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            ArrayData::F32(v) => v.len(),
            ArrayData::F64(v) => v.len(),
            ArrayData::I32(v) => v.len(),
            ArrayData::U8(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn to_le_bytes(&self) -> Vec<u8> {
        match self {
            ArrayData::F32(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            ArrayData::F64(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            ArrayData::I32(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            ArrayData::U8(v) => v.clone(),
        }
    }

    fn from_le_bytes(dtype: Dtype, bytes: &[u8]) -> ArrayData {
        match dtype {
            Dtype::F32 => ArrayData::F32(
                bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            Dtype::F64 => ArrayData::F64(
                bytes
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            Dtype::I32 => ArrayData::I32(
                bytes
                    .chunks_exact(4)
                    .map(|c| i32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            Dtype::U8 => ArrayData::U8(bytes.to_vec()),
        }
    }
}

/// A named array with its logical shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Array {
    pub shape: Vec<usize>,
    pub data: ArrayData,
}

impl Array {
    pub fn f32(shape: Vec<usize>, data: Vec<f32>) -> Array {
        Array { shape, data: ArrayData::F32(data) }
    }
    pub fn f64(shape: Vec<usize>, data: Vec<f64>) -> Array {
        Array { shape, data: ArrayData::F64(data) }
    }
    pub fn i32(shape: Vec<usize>, data: Vec<i32>) -> Array {
        Array { shape, data: ArrayData::I32(data) }
    }
    pub fn u8(shape: Vec<usize>, data: Vec<u8>) -> Array {
        Array { shape, data: ArrayData::U8(data) }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    dtype: Dtype,
    shape: Vec<usize>,
    byte_offset: u64,
    crc32: u32,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    magic: String,
    version: u32,
    dims: BTreeMap<String, i64>,
    arrays: Vec<ManifestEntry>,
}

/// In-memory container: ordered named arrays plus scalar dimensions.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Container {
    pub magic: String,
    pub dims: BTreeMap<String, i64>,
    arrays: Vec<(String, Array)>,
}

impl Container {
    pub fn new(magic: &str) -> Container {
        Container { magic: magic.to_string(), dims: BTreeMap::new(), arrays: Vec::new() }
    }

    pub fn set_dim(&mut self, name: &str, value: i64) {
        self.dims.insert(name.to_string(), value);
    }

    pub fn dim(&self, name: &str) -> Result<i64> {
        self.dims.get(name).copied().ok_or_else(|| ContainerError::MissingDim(name.to_string()))
    }

    /// Inserts or replaces an array, keeping first-insertion order.
    pub fn insert(&mut self, name: &str, array: Array) {
        let elems: usize = array.shape.iter().product();
        assert_eq!(elems, array.data.len(), "shape/data mismatch for {name}");
        if let Some(slot) = self.arrays.iter_mut().find(|(n, _)| n == name) {
            slot.1 = array;
        } else {
            self.arrays.push((name.to_string(), array));
        }
    }

    pub fn get(&self, name: &str) -> Result<&Array> {
        self.arrays
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, a)| a)
            .ok_or_else(|| ContainerError::Missing(name.to_string()))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.arrays.iter().map(|(n, _)| n.as_str())
    }

    pub fn f64s(&self, name: &str) -> Result<(Vec<usize>, Vec<f64>)> {
        let a = self.get(name)?;
        match &a.data {
            ArrayData::F64(v) => Ok((a.shape.clone(), v.clone())),
            ArrayData::F32(v) => Ok((a.shape.clone(), v.iter().map(|&x| x as f64).collect())),
            other => Err(ContainerError::Array {
                array: name.to_string(),
                reason: format!("expected float data, found {}", other.dtype()),
            }),
        }
    }

    pub fn i32s(&self, name: &str) -> Result<(Vec<usize>, Vec<i32>)> {
        let a = self.get(name)?;
        match &a.data {
            ArrayData::I32(v) => Ok((a.shape.clone(), v.clone())),
            other => Err(ContainerError::Array {
                array: name.to_string(),
                reason: format!("expected i32 data, found {}", other.dtype()),
            }),
        }
    }

    pub fn u8s(&self, name: &str) -> Result<(Vec<usize>, Vec<u8>)> {
        let a = self.get(name)?;
        match &a.data {
            ArrayData::U8(v) => Ok((a.shape.clone(), v.clone())),
            other => Err(ContainerError::Array {
                array: name.to_string(),
                reason: format!("expected u8 data, found {}", other.dtype()),
            }),
        }
    }

    /// Serializes to the on-disk layout:
    /// `u64 LE header length | JSON header | zero pad | blobs`,
    /// every blob starting on a [`BLOB_ALIGN`] boundary.
    pub fn to_bytes(&self) -> Vec<u8> {
        let blobs: Vec<Vec<u8>> = self.arrays.iter().map(|(_, a)| a.data.to_le_bytes()).collect();

        // Two passes: offsets depend on the header length, which depends on
        // the offsets' digit count. Fix the header size with a first draft,
        // then re-render; digit growth is absorbed by the pad-to-alignment.
        let mut entries: Vec<ManifestEntry> = self
            .arrays
            .iter()
            .zip(&blobs)
            .map(|((name, a), blob)| ManifestEntry {
                name: name.clone(),
                dtype: a.data.dtype(),
                shape: a.shape.clone(),
                byte_offset: 0,
                crc32: crc32fast::hash(blob),
            })
            .collect();

        let render = |entries: &[ManifestEntry], dims: &BTreeMap<String, i64>| -> Vec<u8> {
            let header = Header {
                magic: self.magic.clone(),
                version: FORMAT_VERSION,
                dims: dims.clone(),
                arrays: entries.to_vec(),
            };
            serde_json::to_vec(&header).expect("header serialization cannot fail")
        };

        // Draft with worst-case offsets to stabilize the rendered length.
        for e in &mut entries {
            e.byte_offset = u64::MAX;
        }
        let draft_len = 8 + render(&entries, &self.dims).len();
        let mut offset = align_up(draft_len, BLOB_ALIGN);
        for (e, blob) in entries.iter_mut().zip(&blobs) {
            e.byte_offset = offset as u64;
            offset = align_up(offset + blob.len(), BLOB_ALIGN);
        }

        let header_json = render(&entries, &self.dims);
        let data_start = align_up(8 + header_json.len(), BLOB_ALIGN);
        let first_offset = entries.first().map(|e| e.byte_offset as usize).unwrap_or(data_start);
        assert!(data_start <= first_offset, "header grew past reserved space");

        let total = entries
            .iter()
            .zip(&blobs)
            .map(|(e, b)| e.byte_offset as usize + b.len())
            .max()
            .unwrap_or(data_start);
        let mut out = vec![0u8; total];
        out[..8].copy_from_slice(&(header_json.len() as u64).to_le_bytes());
        out[8..8 + header_json.len()].copy_from_slice(&header_json);
        for (e, blob) in entries.iter().zip(&blobs) {
            let start = e.byte_offset as usize;
            out[start..start + blob.len()].copy_from_slice(blob);
        }
        out
    }

    /// Parses a container from bytes, verifying per-array checksums.
    /// `expected_magic = None` accepts any magic (used by tooling and fuzzing).
    pub fn from_bytes(bytes: &[u8], expected_magic: Option<&str>) -> Result<Container> {
        if bytes.len() < 8 {
            return Err(ContainerError::Truncated);
        }
        let header_len = u64::from_le_bytes(bytes[..8].try_into().unwrap());
        if header_len > MAX_HEADER_LEN {
            return Err(ContainerError::Header(format!("header length {header_len} exceeds cap")));
        }
        let header_len = header_len as usize;
        if bytes.len() < 8 + header_len {
            return Err(ContainerError::Truncated);
        }
        let header: Header = serde_json::from_slice(&bytes[8..8 + header_len])
            .map_err(|e| ContainerError::Header(e.to_string()))?;
        if let Some(expected) = expected_magic {
            if header.magic != expected {
                return Err(ContainerError::BadMagic {
                    expected: expected.to_string(),
                    found: header.magic,
                });
            }
        }
        if header.version != FORMAT_VERSION {
            return Err(ContainerError::UnsupportedVersion(header.version));
        }

        let mut arrays = Vec::with_capacity(header.arrays.len());
        for e in &header.arrays {
            let elems = e.shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d)).ok_or(
                ContainerError::Array {
                    array: e.name.clone(),
                    reason: "shape overflows".to_string(),
                },
            )?;
            let nbytes = elems.checked_mul(e.dtype.size()).ok_or(ContainerError::Array {
                array: e.name.clone(),
                reason: "byte size overflows".to_string(),
            })?;
            if e.byte_offset % BLOB_ALIGN as u64 != 0 {
                return Err(ContainerError::Array {
                    array: e.name.clone(),
                    reason: format!("blob offset {} not {BLOB_ALIGN}-byte aligned", e.byte_offset),
                });
            }
            let start = usize::try_from(e.byte_offset).map_err(|_| ContainerError::Truncated)?;
            let end = start.checked_add(nbytes).ok_or(ContainerError::Truncated)?;
            if end > bytes.len() {
                return Err(ContainerError::Truncated);
            }
            let blob = &bytes[start..end];
            if crc32fast::hash(blob) != e.crc32 {
                return Err(ContainerError::Checksum { array: e.name.clone() });
            }
            arrays.push((
                e.name.clone(),
                Array { shape: e.shape.clone(), data: ArrayData::from_le_bytes(e.dtype, blob) },
            ));
        }

        Ok(Container { magic: header.magic, dims: header.dims, arrays })
    }

    pub fn write_file(&self, path: &Path) -> Result<()> {
        Ok(fs::write(path, self.to_bytes())?)
    }

    pub fn read_file(path: &Path, expected_magic: Option<&str>) -> Result<Container> {
        Container::from_bytes(&fs::read(path)?, expected_magic)
    }
}

fn align_up(n: usize, align: usize) -> usize {
    n.div_ceil(align) * align
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Container {
        let mut c = Container::new("DREG-TEST");
        c.set_dim("n", 3);
        c.insert("a", Array::f64(vec![3], vec![1.0, -2.5, std::f64::consts::PI]));
        c.insert("b", Array::f32(vec![2, 2], vec![0.5, 1.5, -3.0, 4.0]));
        c.insert("idx", Array::i32(vec![4], vec![0, 1, 2, -1]));
        c.insert("mask", Array::u8(vec![5], vec![0, 1, 1, 0, 1]));
        c
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let c = sample();
        let bytes = c.to_bytes();
        let c2 = Container::from_bytes(&bytes, Some("DREG-TEST")).unwrap();
        assert_eq!(c, c2);
        assert_eq!(bytes, c2.to_bytes());
    }

    #[test]
    fn blobs_are_aligned() {
        let bytes = sample().to_bytes();
        let header_len = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        let header: Header = serde_json::from_slice(&bytes[8..8 + header_len]).unwrap();
        for e in &header.arrays {
            assert_eq!(e.byte_offset % BLOB_ALIGN as u64, 0, "{}", e.name);
        }
    }

    #[test]
    fn truncated_file_reports_error() {
        let bytes = sample().to_bytes();
        let cut = &bytes[..bytes.len() - 3];
        assert!(matches!(
            Container::from_bytes(cut, Some("DREG-TEST")),
            Err(ContainerError::Truncated)
        ));
    }

    #[test]
    fn corrupted_blob_fails_checksum() {
        let mut bytes = sample().to_bytes();
        let n = bytes.len();
        bytes[n - 1] ^= 0xff;
        match Container::from_bytes(&bytes, Some("DREG-TEST")) {
            Err(ContainerError::Checksum { array }) => assert_eq!(array, "mask"),
            other => panic!("expected checksum error, got {other:?}"),
        }
    }

    #[test]
    fn wrong_magic_rejected() {
        let bytes = sample().to_bytes();
        assert!(matches!(
            Container::from_bytes(&bytes, Some("DREG-MODEL")),
            Err(ContainerError::BadMagic { .. })
        ));
        // Unconstrained read accepts it.
        assert!(Container::from_bytes(&bytes, None).is_ok());
    }

    #[test]
    fn header_length_cap_prevents_huge_alloc() {
        let mut bytes = vec![0u8; 16];
        bytes[..8].copy_from_slice(&u64::MAX.to_le_bytes());
        assert!(matches!(
            Container::from_bytes(&bytes, None),
            Err(ContainerError::Header(_))
        ));
    }
}

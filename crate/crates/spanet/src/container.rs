//! Flat binary tensor container with a JSON index.
//!
//! Layout on disk:
//!
//! ```text
//! bytes 0..8    magic "SPNT0001"
//! bytes 8..16   u64 little-endian: byte length of the JSON index
//! then          JSON index: {"tensors": [{name, dtype, shape, offset}, ...]}
//! then          payload: concatenated little-endian f64 values
//! ```
//!
//! `offset` is the byte position of a tensor inside the payload section; its
//! element count is the product of `shape`. Round-trips are bit-exact: every
//! f64 (including negative zero and subnormals) is stored by its raw bits.

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::spam::SpamParams;
use crate::{Error, Result};

/// File signature for the container format.
pub const CONTAINER_MAGIC: &[u8; 8] = b"SPNT0001";

/// One tensor: a name, a shape, and row-major f64 data.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct IndexEntry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Index {
    tensors: Vec<IndexEntry>,
}

/// An ordered collection of named tensors with binary (de)serialization.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorContainer {
    tensors: Vec<NamedTensor>,
}

impl TensorContainer {
    pub fn new() -> Self {
        Self::default()
    }

    /// Append a tensor. Names must be unique and the shape must account for
    /// every element.
    pub fn insert(&mut self, name: &str, shape: Vec<usize>, data: Vec<f64>) -> Result<()> {
        if self.tensors.iter().any(|t| t.name == name) {
            return Err(Error::MalformedContainer(format!(
                "duplicate tensor name {name:?}"
            )));
        }
        let expect: usize = shape.iter().product();
        if expect != data.len() {
            return Err(Error::DimensionMismatch(format!(
                "tensor {name:?}: shape {shape:?} holds {expect} elements, data has {}",
                data.len()
            )));
        }
        self.tensors.push(NamedTensor {
            name: name.to_string(),
            shape,
            data,
        });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn tensors(&self) -> &[NamedTensor] {
        &self.tensors
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Serialize to the container byte format. Deterministic: the same
    /// tensors in the same order produce identical bytes.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut offset = 0u64;
        let entries: Vec<IndexEntry> = self
            .tensors
            .iter()
            .map(|t| {
                let e = IndexEntry {
                    name: t.name.clone(),
                    dtype: "f64".to_string(),
                    shape: t.shape.clone(),
                    offset,
                };
                offset += (t.data.len() * 8) as u64;
                e
            })
            .collect();
        let index = serde_json::to_vec(&Index { tensors: entries })?;
        let mut out = Vec::with_capacity(16 + index.len() + offset as usize);
        out.extend_from_slice(CONTAINER_MAGIC);
        out.extend_from_slice(&(index.len() as u64).to_le_bytes());
        out.extend_from_slice(&index);
        for t in &self.tensors {
            for &v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    /// Parse and validate the container byte format.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: String| Error::MalformedContainer(msg);
        if bytes.len() < 16 {
            return Err(bad(format!("only {} bytes; header needs 16", bytes.len())));
        }
        if &bytes[0..8] != CONTAINER_MAGIC {
            return Err(bad("bad magic (not a tensor container)".to_string()));
        }
        let index_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let payload_start = 16usize
            .checked_add(index_len)
            .filter(|&end| end <= bytes.len())
            .ok_or_else(|| bad(format!("index length {index_len} exceeds file size")))?;
        let index: Index = serde_json::from_slice(&bytes[16..payload_start])
            .map_err(|e| bad(format!("index is not valid JSON: {e}")))?;
        let payload = &bytes[payload_start..];
        if payload.len() % 8 != 0 {
            return Err(bad(format!(
                "payload length {} is not a multiple of 8",
                payload.len()
            )));
        }

        let mut tensors = Vec::with_capacity(index.tensors.len());
        let mut names = HashSet::new();
        let mut expected_payload = 0usize;
        for e in index.tensors {
            if e.dtype != "f64" {
                return Err(bad(format!("tensor {:?} has dtype {:?}", e.name, e.dtype)));
            }
            if !names.insert(e.name.clone()) {
                return Err(bad(format!("duplicate tensor name {:?}", e.name)));
            }
            let count: usize = e.shape.iter().product();
            let start = e.offset as usize;
            let end = start
                .checked_add(count * 8)
                .filter(|&end| end <= payload.len())
                .ok_or_else(|| {
                    bad(format!(
                        "tensor {:?} spans bytes {start}..{} of a {}-byte payload",
                        e.name,
                        start + count * 8,
                        payload.len()
                    ))
                })?;
            let data: Vec<f64> = payload[start..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            expected_payload += count * 8;
            tensors.push(NamedTensor {
                name: e.name,
                shape: e.shape,
                data,
            });
        }
        if expected_payload != payload.len() {
            return Err(bad(format!(
                "payload holds {} bytes but the index accounts for {expected_payload}",
                payload.len()
            )));
        }
        Ok(Self { tensors })
    }

    pub fn write_file<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn read_file<P: AsRef<Path>>(path: P) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Pack SPAM parameters into a container, one flat tensor per named slot.
pub fn pack_spam(params: &SpamParams) -> TensorContainer {
    let mut c = TensorContainer::new();
    params.visit(&mut |name, slice| {
        c.insert(name, vec![slice.len()], slice.to_vec())
            .expect("visit names are unique");
    });
    c
}

/// Fill a parameter set shaped like `template` from a container. Every slot
/// must be present with the right element count; extra tensors are rejected.
pub fn unpack_spam(c: &TensorContainer, template: &SpamParams) -> Result<SpamParams> {
    let mut out = template.clone();
    let mut used = 0usize;
    let mut problem = None;
    out.visit_mut(&mut |name, slice| {
        if problem.is_some() {
            return;
        }
        match c.get(name) {
            Some(t) if t.data.len() == slice.len() => {
                slice.copy_from_slice(&t.data);
                used += 1;
            }
            Some(t) => {
                problem = Some(format!(
                    "tensor {name:?} has {} elements, slot needs {}",
                    t.data.len(),
                    slice.len()
                ));
            }
            None => problem = Some(format!("missing tensor {name:?}")),
        }
    });
    if let Some(msg) = problem {
        return Err(Error::MalformedContainer(msg));
    }
    if used != c.len() {
        return Err(Error::MalformedContainer(format!(
            "container holds {} tensors, parameter set uses {used}",
            c.len()
        )));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedStream;
    use crate::spam::SrfMode;

    fn sample() -> TensorContainer {
        let mut c = TensorContainer::new();
        let mut rng = SeedStream::new(7);
        c.insert("alpha", vec![2, 3], rng.normal_vec(6)).unwrap();
        c.insert("beta", vec![4], rng.normal_vec(4)).unwrap();
        c.insert("gamma", vec![1, 1, 5], rng.normal_vec(5)).unwrap();
        c
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let mut c = sample();
        c.insert(
            "special",
            vec![5],
            vec![-0.0, f64::MIN_POSITIVE, 5e-324, f64::MAX, -1.5e-308],
        )
        .unwrap();
        let bytes = c.to_bytes().unwrap();
        let back = TensorContainer::from_bytes(&bytes).unwrap();
        assert_eq!(back.len(), c.len());
        for (a, b) in c.tensors().iter().zip(back.tensors()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.shape, b.shape);
            for (x, y) in a.data.iter().zip(&b.data) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn serialization_is_deterministic() {
        let a = sample().to_bytes().unwrap();
        let b = sample().to_bytes().unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("params.spnt");
        let c = sample();
        c.write_file(&path).unwrap();
        assert_eq!(TensorContainer::read_file(&path).unwrap(), c);
    }

    #[test]
    fn rejects_duplicate_and_misshapen_inserts() {
        let mut c = sample();
        assert!(c.insert("alpha", vec![1], vec![0.0]).is_err());
        assert!(c.insert("delta", vec![2, 2], vec![0.0; 3]).is_err());
    }

    #[test]
    fn rejects_malformed_bytes() {
        let good = sample().to_bytes().unwrap();

        assert!(TensorContainer::from_bytes(&good[..10]).is_err());

        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        assert!(TensorContainer::from_bytes(&bad_magic).is_err());

        let mut huge_index = good.clone();
        huge_index[8..16].copy_from_slice(&u64::MAX.to_le_bytes());
        assert!(TensorContainer::from_bytes(&huge_index).is_err());

        let mut bad_json = good.clone();
        bad_json[16] = b'!';
        assert!(TensorContainer::from_bytes(&bad_json).is_err());

        let mut truncated = good.clone();
        truncated.truncate(good.len() - 8);
        assert!(TensorContainer::from_bytes(&truncated).is_err());

        let mut trailing = good.clone();
        trailing.extend_from_slice(&[0u8; 8]);
        assert!(TensorContainer::from_bytes(&trailing).is_err());
    }

    #[test]
    fn rejects_wrong_dtype() {
        let mut c = TensorContainer::new();
        c.insert("t", vec![1], vec![1.0]).unwrap();
        let bytes = c.to_bytes().unwrap();
        let text = String::from_utf8(bytes[16..16 + 8 + 50].to_vec()).unwrap_or_default();
        assert!(text.contains("f64"), "sanity: index mentions the dtype");
        let patched: Vec<u8> = {
            let mut b = bytes.clone();
            let idx = b.windows(3).position(|w| w == b"f64").unwrap();
            b[idx..idx + 3].copy_from_slice(b"f32");
            b
        };
        assert!(TensorContainer::from_bytes(&patched).is_err());
    }

    #[test]
    fn spam_params_round_trip() {
        let stream = SeedStream::new(11);
        let p = SpamParams::random(8, 4, 4, SrfMode::Depthwise, true, &stream).unwrap();
        let c = pack_spam(&p);
        let q = unpack_spam(&c, &p.zeros_like()).unwrap();
        assert_eq!(p, q);

        // A missing tensor and an extra tensor both fail.
        let mut missing = TensorContainer::new();
        for t in c.tensors().iter().skip(1) {
            missing
                .insert(&t.name, t.shape.clone(), t.data.clone())
                .unwrap();
        }
        assert!(unpack_spam(&missing, &p).is_err());

        let mut extra = c.clone();
        extra.insert("stray", vec![1], vec![0.0]).unwrap();
        assert!(unpack_spam(&extra, &p).is_err());
    }
}

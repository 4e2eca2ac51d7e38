//! The `leaf-weights-v1` container.
//!
//! Layout: the 8-byte magic `LEAFWTS\0`, a little-endian `u32` header length,
//! a UTF-8 JSON header `{version, metadata, tensors: [{name, shape}]}`, then
//! every tensor's values as little-endian `f64` in header order. Nothing else
//! follows the last payload.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::fsutil;

pub const VERSION: &str = "leaf-weights-v1";
const MAGIC: &[u8; 8] = b"LEAFWTS\0";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    version: String,
    metadata: BTreeMap<String, serde_json::Value>,
    tensors: Vec<Entry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Entry {
    name: String,
    shape: Vec<usize>,
}

/// Named tensors plus free-form JSON metadata.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct WeightFile {
    pub metadata: BTreeMap<String, serde_json::Value>,
    tensors: Vec<(String, Vec<usize>, Vec<f64>)>,
}

impl WeightFile {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, t: &Tensor) -> Result<()> {
        let name = name.into();
        if self.tensors.iter().any(|(n, _, _)| *n == name) {
            return Err(Error::Container(format!("duplicate tensor {name:?}")));
        }
        self.tensors.push((name, t.shape().to_vec(), t.to_vec()));
        Ok(())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.iter().map(|(n, _, _)| n.as_str())
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Tensor `name`, which must have exactly `shape`.
    pub fn tensor(&self, name: &str, shape: &[usize], requires_grad: bool) -> Result<Tensor> {
        let (_, s, v) = self
            .tensors
            .iter()
            .find(|(n, _, _)| n == name)
            .ok_or_else(|| Error::Container(format!("missing tensor {name:?}")))?;
        if s != shape {
            return Err(Error::Container(format!(
                "tensor {name:?} has shape {s:?}, expected {shape:?}"
            )));
        }
        if requires_grad {
            Tensor::param(v.clone(), s)
        } else {
            Tensor::new(v.clone(), s)
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            version: VERSION.to_string(),
            metadata: self.metadata.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|(name, shape, _)| Entry {
                    name: name.clone(),
                    shape: shape.clone(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::Container(e.to_string()))?;
        let len = u32::try_from(json.len()).map_err(|_| Error::Container("header too large".into()))?;
        let payload: usize = self.tensors.iter().map(|(_, _, v)| v.len() * 8).sum();
        let mut out = Vec::with_capacity(12 + json.len() + payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(&json);
        for (_, _, values) in &self.tensors {
            for v in values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    /// Parses a whole container. Nothing is returned unless every check passes.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 || &bytes[..8] != MAGIC {
            return Err(Error::Container("not a leaf weights file (bad magic)".into()));
        }
        let len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
        let body = &bytes[12..];
        if body.len() < len {
            return Err(Error::Container("truncated header".into()));
        }
        // Check the version before the full schema so that future layouts
        // report a version error rather than a parse error.
        let raw: serde_json::Value =
            serde_json::from_slice(&body[..len]).map_err(|e| Error::Container(format!("header: {e}")))?;
        let found = raw.get("version").and_then(|v| v.as_str()).unwrap_or("");
        if found != VERSION {
            return Err(Error::Version {
                found: found.to_string(),
                expected: VERSION.to_string(),
            });
        }
        let header: Header = serde_json::from_value(raw).map_err(|e| Error::Container(format!("header: {e}")))?;
        let mut payload = &body[len..];
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for Entry { name, shape } in header.tensors {
            let n = shape
                .iter()
                .try_fold(1usize, |acc, d| acc.checked_mul(*d))
                .ok_or_else(|| Error::Container(format!("shape of {name:?} overflows")))?;
            let want = n
                .checked_mul(8)
                .ok_or_else(|| Error::Container(format!("shape of {name:?} overflows")))?;
            if payload.len() < want {
                return Err(Error::Container(format!(
                    "truncated payload for {name:?}: need {want} bytes, {} remain",
                    payload.len()
                )));
            }
            let values = payload[..want]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            payload = &payload[want..];
            if tensors.iter().any(|(m, _, _): &(String, _, _)| *m == name) {
                return Err(Error::Container(format!("duplicate tensor {name:?}")));
            }
            tensors.push((name, shape, values));
        }
        if !payload.is_empty() {
            return Err(Error::Container(format!(
                "{} trailing bytes disagree with the shape table",
                payload.len()
            )));
        }
        Ok(Self {
            metadata: header.metadata,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fsutil::write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fsutil::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> WeightFile {
        let mut w = WeightFile::new();
        w.metadata.insert("kind".into(), "test".into());
        w.push(
            "a",
            &Tensor::new(vec![1.0, -2.5, 3.25, f64::MIN_POSITIVE], &[2, 2]).unwrap(),
        )
        .unwrap();
        w.push("b", &Tensor::vector(vec![0.1; 3])).unwrap();
        w
    }

    fn with_header(bytes: &[u8], edit: impl Fn(&mut serde_json::Value)) -> Vec<u8> {
        let len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let mut h: serde_json::Value = serde_json::from_slice(&bytes[12..12 + len]).unwrap();
        edit(&mut h);
        let json = serde_json::to_vec(&h).unwrap();
        let mut out = MAGIC.to_vec();
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&bytes[12 + len..]);
        out
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let bytes = sample().to_bytes().unwrap();
        let back = WeightFile::from_bytes(&bytes).unwrap();
        assert_eq!(back, sample());
        assert_eq!(back.to_bytes().unwrap(), bytes);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("w.bin");
        back.save(&p).unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), bytes);
        assert_eq!(
            WeightFile::load(&p)
                .unwrap()
                .tensor("a", &[2, 2], false)
                .unwrap()
                .to_vec()[3],
            f64::MIN_POSITIVE
        );
    }

    #[test]
    fn unknown_version_is_a_version_error() {
        let bytes = with_header(&sample().to_bytes().unwrap(), |h| {
            h["version"] = "leaf-weights-v9".into();
        });
        assert!(matches!(WeightFile::from_bytes(&bytes), Err(Error::Version { .. })));
    }

    #[test]
    fn shape_table_disagreement_is_rejected() {
        let good = sample().to_bytes().unwrap();
        let grown = with_header(&good, |h| h["tensors"][1]["shape"] = serde_json::json!([4]));
        assert!(matches!(WeightFile::from_bytes(&grown), Err(Error::Container(_))));
        let shrunk = with_header(&good, |h| h["tensors"][1]["shape"] = serde_json::json!([2]));
        assert!(matches!(WeightFile::from_bytes(&shrunk), Err(Error::Container(_))));
        let junk = with_header(&good, |h| h["tensors"] = serde_json::json!("x"));
        assert!(WeightFile::from_bytes(&junk).is_err());
    }

    #[test]
    fn truncation_is_rejected() {
        let good = sample().to_bytes().unwrap();
        for cut in [0, 5, 11, 20, good.len() - 1] {
            assert!(WeightFile::from_bytes(&good[..cut]).is_err(), "cut {cut}");
        }
    }

    #[test]
    fn tensor_lookup_checks_shape() {
        let w = sample();
        assert!(w.tensor("a", &[4], false).is_err());
        assert!(w.tensor("zz", &[1], false).is_err());
        assert!(w.tensor("b", &[3], true).unwrap().requires_grad());
        let mut w = w;
        assert!(w.push("a", &Tensor::scalar(1.0)).is_err());
    }
}

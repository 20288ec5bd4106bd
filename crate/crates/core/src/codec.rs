//! Binary container for named `f64` tensors plus a JSON metadata header.
//!
//! Layout: 8-byte magic, `u32` format version, `u64` header length, the JSON
//! header, then every tensor's data as little-endian `f64` in header order.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"JSANTENS";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Tensor)>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    meta: serde_json::Value,
    tensors: Vec<Entry>,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
}

impl Container {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}

pub fn encode(container: &Container) -> Vec<u8> {
    let header = Header {
        meta: container.meta.clone(),
        tensors: container
            .tensors
            .iter()
            .map(|(name, t)| Entry {
                name: name.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let header = serde_json::to_vec(&header).expect("header serializes");
    let payload: usize = container.tensors.iter().map(|(_, t)| t.len() * 8).sum();
    let mut out = Vec::with_capacity(20 + header.len() + payload);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for (_, t) in &container.tensors {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn bad(message: impl Into<String>) -> Error {
    Error::parse("tensor container", message.into())
}

pub fn decode(bytes: &[u8]) -> Result<Container> {
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(bad("missing magic"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes"));
    let rest = &bytes[20..];
    let header_len = usize::try_from(header_len)
        .ok()
        .filter(|&l| l <= rest.len())
        .ok_or_else(|| bad("header length exceeds file"))?;
    let header: Header = serde_json::from_slice(&rest[..header_len]).map_err(|e| bad(format!("header: {e}")))?;
    let mut payload = &rest[header_len..];

    let mut tensors = Vec::with_capacity(header.tensors.len());
    for entry in header.tensors {
        let count = entry
            .shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|&c| c > 0)
            .ok_or_else(|| bad(format!("invalid shape for {}", entry.name)))?;
        let nbytes = count.checked_mul(8).filter(|&n| n <= payload.len());
        let nbytes = nbytes.ok_or_else(|| bad(format!("truncated data for {}", entry.name)))?;
        let data = payload[..nbytes]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        payload = &payload[nbytes..];
        tensors.push((entry.name, Tensor::new(entry.shape, data)?));
    }
    if !payload.is_empty() {
        return Err(bad(format!("{} trailing bytes", payload.len())));
    }
    Ok(Container {
        meta: header.meta,
        tensors,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decode_inverts_encode_bitwise() {
        let c = Container {
            meta: serde_json::json!({"k": [1, 2]}),
            tensors: vec![
                ("a".into(), Tensor::from_rows(&[&[0.1, -0.0], &[f64::MIN_POSITIVE, 1e300]])),
                ("b".into(), Tensor::scalar(std::f64::consts::PI)),
            ],
        };
        let bytes = encode(&c);
        let back = decode(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.tensors[0].1.data()[1].to_bits(), (-0.0f64).to_bits());
    }

    #[test]
    fn rejects_truncation_and_garbage() {
        let c = Container {
            meta: serde_json::Value::Null,
            tensors: vec![("a".into(), Tensor::zeros(&[3, 3]))],
        };
        let bytes = encode(&c);
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode(&extra).is_err());
        assert!(decode(b"JSANTENS").is_err());
        assert!(decode(&[0u8; 40]).is_err());
    }
}

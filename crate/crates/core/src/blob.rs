//! Tensor container shared by weight checkpoints and embedding files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! offset 0        8 bytes   magic "TXMBLOB1"
//! offset 8        u64       header length H (bytes), a multiple of 8
//! offset 16       H bytes   UTF-8 JSON header, right-padded with spaces
//! offset 16 + H   8 * N     f64 values, little-endian
//! ```
//!
//! The header is `{"kind", "meta", "tensors": [{"name", "shape", "offset"}]}`,
//! where `offset` counts f64 values from the start of the data section and `N`
//! is the sum of all tensor sizes. Tensors are stored in insertion order.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::fields::Parameterized;

pub const MAGIC: &[u8; 8] = b"TXMBLOB1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl TensorEntry {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlobHeader {
    pub kind: String,
    #[serde(default)]
    pub meta: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Blob {
    pub header: BlobHeader,
    pub data: Vec<f64>,
}

impl Blob {
    pub fn new(kind: &str, meta: serde_json::Value) -> Self {
        Self {
            header: BlobHeader {
                kind: kind.to_string(),
                meta,
                tensors: Vec::new(),
            },
            data: Vec::new(),
        }
    }

    pub fn push(&mut self, name: &str, shape: &[usize], values: &[f64]) -> Result<()> {
        ensure!(
            shape.iter().product::<usize>() == values.len(),
            "tensor {name}: shape {shape:?} does not match {} values",
            values.len()
        );
        ensure!(self.entry(name).is_none(), "duplicate tensor {name}");
        self.header.tensors.push(TensorEntry {
            name: name.to_string(),
            shape: shape.to_vec(),
            offset: self.data.len(),
        });
        self.data.extend_from_slice(values);
        Ok(())
    }

    pub fn entry(&self, name: &str) -> Option<&TensorEntry> {
        self.header.tensors.iter().find(|t| t.name == name)
    }

    pub fn tensor(&self, name: &str) -> Result<(&[usize], &[f64])> {
        let e = self.entry(name).ok_or_else(|| Error::invalid(format!("missing tensor {name}")))?;
        Ok((&e.shape, &self.data[e.offset..e.offset + e.len()]))
    }

    /// Append every parameter of `p`, names prefixed with `prefix`.
    pub fn push_params(&mut self, prefix: &str, p: &mut dyn Parameterized) -> Result<()> {
        let mut res = Ok(());
        p.visit_params(&mut |name, shape, v| {
            if res.is_ok() {
                res = self.push(&format!("{prefix}{name}"), shape, v);
            }
        });
        res
    }

    /// Load every parameter of `p` from tensors named `prefix + name`; shapes must match.
    pub fn load_params(&self, prefix: &str, p: &mut dyn Parameterized) -> Result<()> {
        let mut res = Ok(());
        p.visit_params(&mut |name, shape, v| {
            if res.is_err() {
                return;
            }
            let full = format!("{prefix}{name}");
            res = self.tensor(&full).and_then(|(s, data)| {
                ensure!(s == shape, "tensor {full}: stored shape {s:?}, expected {shape:?}");
                v.copy_from_slice(data);
                Ok(())
            });
        });
        res
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut json = serde_json::to_vec(&self.header)?;
        while json.len() % 8 != 0 {
            json.push(b' ');
        }
        let mut out = Vec::with_capacity(16 + json.len() + 8 * self.data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 {
            return Err(Error::parse(bytes.len(), "truncated blob header"));
        }
        if &bytes[..8] != MAGIC {
            return Err(Error::parse(0, "bad magic, expected TXMBLOB1"));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
        let hlen = usize::try_from(hlen).map_err(|_| Error::parse(8, "header length overflows"))?;
        if hlen % 8 != 0 {
            return Err(Error::parse(8, format!("header length {hlen} is not a multiple of 8")));
        }
        let body = 16usize
            .checked_add(hlen)
            .filter(|&b| b <= bytes.len())
            .ok_or_else(|| Error::parse(8, format!("header length {hlen} runs past end of file")))?;
        let header: BlobHeader = serde_json::from_slice(&bytes[16..body]).map_err(|e| Error::parse(16, format!("header json: {e}")))?;
        let rest = &bytes[body..];
        if rest.len() % 8 != 0 {
            return Err(Error::parse(body, "data section is not a whole number of f64 values"));
        }
        let data: Vec<f64> = rest.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        let mut expect = 0;
        for t in &header.tensors {
            if t.offset != expect {
                return Err(Error::parse(16, format!("tensor {} offset {} but expected {expect}", t.name, t.offset)));
            }
            expect += t.len();
        }
        if expect != data.len() {
            return Err(Error::parse(body, format!("header declares {expect} values, file holds {}", data.len())));
        }
        Ok(Self { header, data })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::{GeometryNet, TextureField};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn round_trip_bit_exact() {
        let mut b = Blob::new("test", serde_json::json!({"res": 4}));
        b.push("a", &[2, 3], &[1.0, -0.0, f64::MIN_POSITIVE, 1e300, std::f64::consts::PI, -7.25]).unwrap();
        b.push("empty", &[0], &[]).unwrap();
        b.push("c", &[1], &[0.1]).unwrap();
        let bytes = b.to_bytes().unwrap();
        assert_eq!(&bytes[..8], MAGIC);
        let back = Blob::from_bytes(&bytes).unwrap();
        assert_eq!(back.header, b.header);
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back.data), bits(&b.data));
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn params_round_trip() {
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let mut net = GeometryNet::random(5, &mut r);
        let mut tex = TextureField::random(4, 3, 10, true, &mut r);
        let mut b = Blob::new("gen", serde_json::Value::Null);
        b.push_params("g.", &mut net).unwrap();
        b.push_params("t.", &mut tex).unwrap();
        let back = Blob::from_bytes(&b.to_bytes().unwrap()).unwrap();
        let mut net2 = GeometryNet::random(5, &mut r);
        let mut tex2 = TextureField::random(4, 3, 10, true, &mut r);
        back.load_params("g.", &mut net2).unwrap();
        back.load_params("t.", &mut tex2).unwrap();
        assert_eq!(net2, net);
        assert_eq!(tex2, tex);
        let mut wrong = GeometryNet::random(6, &mut r);
        assert!(back.load_params("g.", &mut wrong).is_err());
    }

    #[test]
    fn malformed_inputs() {
        let mut b = Blob::new("x", serde_json::Value::Null);
        b.push("a", &[2], &[1.0, 2.0]).unwrap();
        assert!(b.push("a", &[1], &[1.0]).is_err());
        assert!(b.push("z", &[3], &[1.0]).is_err());
        let bytes = b.to_bytes().unwrap();
        let offset = |r: Result<Blob>| match r {
            Err(Error::Parse { offset, .. }) => offset,
            other => panic!("expected parse error, got {other:?}"),
        };
        assert_eq!(offset(Blob::from_bytes(&bytes[..10])), 10);
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert_eq!(offset(Blob::from_bytes(&bad)), 0);
        assert_eq!(offset(Blob::from_bytes(&bytes[..bytes.len() - 8])), bytes.len() - 16);
        let mut huge = bytes.clone();
        huge[8..16].copy_from_slice(&(1u64 << 40).to_le_bytes());
        assert_eq!(offset(Blob::from_bytes(&huge)), 8);
    }
}

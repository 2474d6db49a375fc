//! Versioned binary checkpoint: model config, vocabulary and every
//! parameter tensor as little-endian f64. Round-trips bit-exactly.
//!
//! Layout: magic, `u32` version, then length-prefixed JSON header,
//! vocabulary text and parameter records.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::data::Vocabulary;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::params::ParamStore;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"SEMGENCK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    vocab_fingerprint: String,
    meta: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub store: ParamStore,
    /// Free-form provenance: producing command, config digest, epoch, ...
    pub meta: serde_json::Value,
}

impl Checkpoint {
    pub fn from_model(model: &Model, vocab: &Vocabulary, meta: serde_json::Value) -> Self {
        Checkpoint {
            config: model.config.clone(),
            vocab: vocab.clone(),
            store: model.store.clone(),
            meta,
        }
    }

    pub fn into_model(self) -> Result<(Model, Vocabulary)> {
        let model = Model::from_store(self.config, self.vocab.len(), self.store)?;
        Ok((model, self.vocab))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        let header = Header {
            model: self.config.clone(),
            vocab_fingerprint: self.vocab.fingerprint(),
            meta: self.meta.clone(),
        };
        put_bytes(&mut out, serde_json::to_string(&header).expect("header serializes").as_bytes());
        put_bytes(&mut out, self.vocab.to_text().as_bytes());
        out.extend_from_slice(&(self.store.len() as u64).to_le_bytes());
        for (_, p) in self.store.iter() {
            put_bytes(&mut out, p.name.as_bytes());
            out.push(p.trainable as u8);
            let shape = p.value.shape();
            out.extend_from_slice(&(shape.len() as u64).to_le_bytes());
            for d in shape {
                out.extend_from_slice(&(*d as u64).to_le_bytes());
            }
            for x in p.value.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let version = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {version} (expected {FORMAT_VERSION})"
            )));
        }
        let header: Header = serde_json::from_slice(r.bytes_field()?)
            .map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
        let vocab_text = std::str::from_utf8(r.bytes_field()?)
            .map_err(|_| Error::Checkpoint("vocabulary is not UTF-8".into()))?;
        let vocab = Vocabulary::from_text(vocab_text)?;
        if vocab.fingerprint() != header.vocab_fingerprint {
            return Err(Error::Checkpoint("vocabulary does not match its recorded fingerprint".into()));
        }
        let count = r.u64()? as usize;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let name = std::str::from_utf8(r.bytes_field()?)
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
                .to_string();
            let trainable = match r.take(1)?[0] {
                0 => false,
                1 => true,
                b => return Err(Error::Checkpoint(format!("bad trainable flag {b} on `{name}`"))),
            };
            let rank = r.u64()? as usize;
            if rank > 8 {
                return Err(Error::Checkpoint(format!("implausible rank {rank} on `{name}`")));
            }
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .filter(|n| n.checked_mul(8).is_some_and(|b| b <= r.remaining()))
                .ok_or_else(|| Error::Checkpoint(format!("tensor `{name}` overruns the file")))?;
            let data = r
                .take(n * 8)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            store.add(name, Tensor::new(shape, data)?, trainable)?;
        }
        if r.remaining() != 0 {
            return Err(Error::Checkpoint(format!("{} trailing bytes", r.remaining())));
        }
        Ok(Checkpoint {
            config: header.model,
            vocab,
            store,
            meta: header.meta,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn put_bytes(out: &mut Vec<u8>, b: &[u8]) {
    out.extend_from_slice(&(b.len() as u64).to_le_bytes());
    out.extend_from_slice(b);
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if n > self.remaining() {
            return Err(Error::Checkpoint("unexpected end of checkpoint".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn bytes_field(&mut self) -> Result<&'a [u8]> {
        let n = self.u64()?;
        let n = usize::try_from(n).map_err(|_| Error::Checkpoint("field length overflow".into()))?;
        self.take(n)
    }
}

#[cfg(test)]
mod tests {
    use std::collections::HashSet;

    use super::*;

    fn sample() -> Checkpoint {
        let vocab = Vocabulary::build(["alpha", "beta", "beta"], 8, &HashSet::new()).unwrap();
        let mut store = ParamStore::new();
        store
            .add("w", Tensor::new(vec![2, 2], vec![0.1, -0.0, f64::MIN_POSITIVE, 1e300]).unwrap(), true)
            .unwrap();
        store.add("b", Tensor::row(vec![3.0]), false).unwrap();
        Checkpoint {
            config: ModelConfig::default(),
            vocab,
            store,
            meta: serde_json::json!({"epoch": 3}),
        }
    }

    #[test]
    fn bit_exact_round_trip() {
        let c = sample();
        let bytes = c.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        let bits = |s: &ParamStore| -> Vec<u64> { s.iter().flat_map(|(_, p)| p.value.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>()).collect() };
        assert_eq!(bits(&back.store), bits(&c.store));
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn rejects_corruption() {
        let bytes = sample().to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
        let mut bad = bytes.clone();
        bad[8] = 9;
        assert!(Checkpoint::from_bytes(&bad).is_err());
        let mut long = bytes;
        long.push(0);
        assert!(Checkpoint::from_bytes(&long).is_err());
    }
}

//! Self-describing binary checkpoint.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "TLABCKPT" | version u32
//! vocab_size u32 | d_model u32 | n_layers u32 | n_heads u32 | max_seq_len u32 | seed u64
//! meta_init tag u8 (0 = token, 1 = mean) | meta_init token u32
//! thought tag u8 (0 = none, 1 = present) [| n_thought u32 | m_ahead u32]
//! label len u32 | label utf-8
//! param count u32
//! per param: name len u32 | name | ndim u32 | dims u64 * ndim | data f32 * numel
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{MetaInit, Model, ModelConfig};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"TLABCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// The thought regime a checkpoint was trained under.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ThoughtTag {
    pub n_thought: usize,
    pub m_ahead: usize,
}

impl std::fmt::Display for ThoughtTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}-{}", self.n_thought, self.m_ahead)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model<f32>,
    pub thought: Option<ThoughtTag>,
    pub label: String,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| Error::Checkpoint(e.to_string()))
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len());
    out.extend_from_slice(s.as_bytes());
}

impl Checkpoint {
    pub fn new(model: Model<f32>, thought: Option<ThoughtTag>, label: impl Into<String>) -> Self {
        Self {
            model,
            thought,
            label: label.into(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let c = &self.model.config;
        let mut out = Vec::with_capacity(64 + 4 * self.model.num_parameters());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        for v in [c.vocab_size, c.d_model, c.n_layers, c.n_heads, c.max_seq_len] {
            put_u32(&mut out, v);
        }
        out.extend_from_slice(&c.seed.to_le_bytes());
        match c.meta_init {
            MetaInit::Token(t) => {
                out.push(0);
                out.extend_from_slice(&t.to_le_bytes());
            }
            MetaInit::Mean => {
                out.push(1);
                out.extend_from_slice(&0u32.to_le_bytes());
            }
        }
        match self.thought {
            Some(t) => {
                out.push(1);
                put_u32(&mut out, t.n_thought);
                put_u32(&mut out, t.m_ahead);
            }
            None => out.push(0),
        }
        put_str(&mut out, &self.label);
        put_u32(&mut out, self.model.params.len());
        for (name, p) in self.model.names().iter().zip(&self.model.params) {
            put_str(&mut out, name);
            put_u32(&mut out, p.shape().len());
            for &d in p.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in p.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let mut dims = [0usize; 5];
        for d in dims.iter_mut() {
            *d = r.u32()? as usize;
        }
        let seed = r.u64()?;
        let meta_init = match (r.u8()?, r.u32()?) {
            (0, t) => MetaInit::Token(t),
            (1, _) => MetaInit::Mean,
            (tag, _) => return Err(Error::Checkpoint(format!("bad meta_init tag {tag}"))),
        };
        let config = ModelConfig {
            vocab_size: dims[0],
            d_model: dims[1],
            n_layers: dims[2],
            n_heads: dims[3],
            max_seq_len: dims[4],
            seed,
            meta_init,
        };
        let thought = match r.u8()? {
            0 => None,
            1 => Some(ThoughtTag {
                n_thought: r.u32()? as usize,
                m_ahead: r.u32()? as usize,
            }),
            tag => return Err(Error::Checkpoint(format!("bad thought tag {tag}"))),
        };
        let label = r.string()?;
        let count = r.u32()? as usize;
        let mut names = Vec::with_capacity(count);
        let mut params = Vec::with_capacity(count);
        for _ in 0..count {
            names.push(r.string()?);
            let ndim = r.u32()? as usize;
            let shape = (0..ndim)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            let raw = r.take(numel * 4)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            params.push(Tensor::new(shape, data)?);
        }
        if r.pos != buf.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", buf.len() - r.pos)));
        }
        Ok(Self {
            model: Model::from_parts(config, names, params)?,
            thought,
            label,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// SHA-256 of the serialized bytes, hex encoded.
    pub fn hash(&self) -> String {
        hash_bytes(&self.to_bytes())
    }
}

pub(crate) fn hash_bytes(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> Model<f32> {
        Model::init(&ModelConfig {
            vocab_size: 12,
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            max_seq_len: 16,
            seed: 11,
            meta_init: MetaInit::Token(4),
        })
        .unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ck = Checkpoint::new(model(), Some(ThoughtTag { n_thought: 8, m_ahead: 4 }), "8-4");
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let ck = Checkpoint::new(model(), None, "init");
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back.hash(), ck.hash());
        assert_eq!(back.thought, None);
    }

    #[test]
    fn rejects_corruption() {
        let bytes = Checkpoint::new(model(), None, "x").to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
    }
}

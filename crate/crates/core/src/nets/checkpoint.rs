//! Versioned binary checkpoints.
//!
//! Layout: `FGANCKPT` magic, `u32` version, `u64` header length, a JSON
//! header, the raw little-endian `f64` payload (value, first moment, second
//! moment per tensor, generator first), then a SHA-256 digest of everything
//! before it.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Discriminator, Generator, NetConfig};
use crate::engine::{ParamSet, Tensor};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"FGANCKPT";
pub const FORMAT_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

/// Everything needed to resume training or run inference.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub iteration: u64,
    pub net: NetConfig,
    /// Free-form run configuration stored alongside the weights.
    pub config: serde_json::Value,
    pub generator: Generator,
    pub discriminator: Discriminator,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct SetHeader {
    step: u64,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    iteration: u64,
    net: NetConfig,
    config: serde_json::Value,
    generator: SetHeader,
    discriminator: SetHeader,
}

fn set_header(p: &ParamSet) -> SetHeader {
    SetHeader {
        step: p.step(),
        tensors: p
            .names()
            .iter()
            .zip(p.tensors())
            .map(|(name, t)| TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    }
}

fn push_set(out: &mut Vec<u8>, p: &ParamSet) {
    let (m, v) = p.moments();
    for ((t, m), v) in p.tensors().iter().zip(m).zip(v) {
        for x in t.data().iter().chain(m).chain(v) {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            iteration: self.iteration,
            net: self.net,
            config: self.config.clone(),
            generator: set_header(self.generator.params()),
            discriminator: set_header(self.discriminator.params()),
        };
        let header = serde_json::to_vec(&header).expect("header serialises");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        push_set(&mut out, self.generator.params());
        push_set(&mut out, self.discriminator.params());
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let fixed = MAGIC.len() + 4 + 8;
        if bytes.len() < fixed + DIGEST_LEN {
            return Err(Error::Load(format!("file is only {} bytes", bytes.len())));
        }
        if &bytes[..8] != MAGIC {
            return Err(Error::Load("not a checkpoint file (bad magic)".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::Load(format!(
                "format version {version} is not supported (expected {FORMAT_VERSION})"
            )));
        }
        let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::Load("checksum mismatch (truncated or corrupt file)".into()));
        }
        let header_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let header_end = fixed
            .checked_add(header_len)
            .filter(|&e| e <= body.len())
            .ok_or_else(|| Error::Load("header runs past end of file".into()))?;
        let header: Header =
            serde_json::from_slice(&body[fixed..header_end]).map_err(|e| Error::Load(format!("bad header: {e}")))?;
        let mut reader = PayloadReader {
            data: &body[header_end..],
        };
        let g = reader.read_set(&header.generator)?;
        let d = reader.read_set(&header.discriminator)?;
        if !reader.data.is_empty() {
            return Err(Error::Load(format!("{} trailing payload bytes", reader.data.len())));
        }
        Ok(Self {
            iteration: header.iteration,
            net: header.net,
            config: header.config,
            generator: Generator::from_params(header.net, g)?,
            discriminator: Discriminator::from_params(header.net, d)?,
        })
    }

    /// Writes atomically: a sibling temp file is renamed over `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct PayloadReader<'a> {
    data: &'a [u8],
}

impl PayloadReader<'_> {
    fn take(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = n * 8;
        if self.data.len() < bytes {
            return Err(Error::Load("payload shorter than header declares".into()));
        }
        let (head, rest) = self.data.split_at(bytes);
        self.data = rest;
        Ok(head
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn read_set(&mut self, h: &SetHeader) -> Result<ParamSet> {
        let (mut names, mut tensors, mut ms, mut vs) = (vec![], vec![], vec![], vec![]);
        for e in &h.tensors {
            let n: usize = e.shape.iter().product();
            let t = Tensor::new(e.shape.clone(), self.take(n)?).map_err(|err| Error::Load(err.to_string()))?;
            names.push(e.name.clone());
            tensors.push(t);
            ms.push(self.take(n)?);
            vs.push(self.take(n)?);
        }
        ParamSet::from_parts(names, tensors, ms, vs, h.step)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::init_params;

    fn sample() -> Checkpoint {
        let net = NetConfig {
            res: 16,
            width: 2,
            patch: 4,
            pool_k: 2,
        };
        let (generator, discriminator) = init_params(3, net).unwrap();
        Checkpoint {
            iteration: 42,
            net,
            config: serde_json::json!({"seed": 3}),
            generator,
            discriminator,
        }
    }

    #[test]
    fn save_then_load_is_bit_identical() {
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("a.ckpt");
        let ck = sample();
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), ck.to_bytes());
    }

    #[test]
    fn truncation_is_detected() {
        let bytes = sample().to_bytes();
        for cut in [0, 10, 40, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(Checkpoint::from_bytes(&bytes[..cut]), Err(Error::Load(_))), "cut {cut}");
        }
    }

    #[test]
    fn version_mismatch_is_detected() {
        let mut bytes = sample().to_bytes();
        bytes[8] = 99;
        match Checkpoint::from_bytes(&bytes) {
            Err(Error::Load(msg)) => assert!(msg.contains("version 99")),
            other => panic!("expected load error, got {other:?}"),
        }
    }

    #[test]
    fn flipped_payload_bit_is_detected() {
        let mut bytes = sample().to_bytes();
        let i = bytes.len() - 100;
        bytes[i] ^= 1;
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Load(_))));
    }
}
